#include "nsns/report.hpp"

#include <cstdio>
#include <cstdlib>
#include <stdexcept>

#include "json.hpp"
#include "nsns/binio.hpp"

namespace nsns {

std::string format_sig6(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

void ReportTable::add_row(std::vector<Cell> row) {
  if (row.size() != columns_.size())
    throw std::invalid_argument("report: row with " + std::to_string(row.size()) +
                                " cells for " + std::to_string(columns_.size()) + " columns");
  rows_.push_back(std::move(row));
}

std::string ReportTable::to_csv() const {
  std::string out;
  for (size_t c = 0; c < columns_.size(); ++c) {
    if (c) out += ",";
    out += columns_[c];
  }
  out += "\n";
  for (const std::vector<Cell>& row : rows_) {
    for (size_t c = 0; c < row.size(); ++c) {
      if (c) out += ",";
      if (std::holds_alternative<std::string>(row[c]))
        out += std::get<std::string>(row[c]);
      else if (std::holds_alternative<long long>(row[c]))
        out += std::to_string(std::get<long long>(row[c]));
      else
        out += format_sig6(std::get<double>(row[c]));
    }
    out += "\n";
  }
  return out;
}

std::string ReportTable::to_jsonl() const {
  std::string out;
  for (const std::vector<Cell>& row : rows_) {
    nlohmann::json j;
    for (size_t c = 0; c < row.size(); ++c) {
      if (std::holds_alternative<std::string>(row[c]))
        j[columns_[c]] = std::get<std::string>(row[c]);
      else if (std::holds_alternative<long long>(row[c]))
        j[columns_[c]] = std::get<long long>(row[c]);
      else
        // normalize to six significant digits so csv and jsonl agree
        j[columns_[c]] = std::strtod(format_sig6(std::get<double>(row[c])).c_str(), nullptr);
    }
    out += j.dump() + "\n";
  }
  return out;
}

void ReportTable::write_csv(const std::string& path) const { atomic_write_file(path, to_csv()); }

void ReportTable::write_jsonl(const std::string& path) const {
  atomic_write_file(path, to_jsonl());
}

}  // namespace nsns
