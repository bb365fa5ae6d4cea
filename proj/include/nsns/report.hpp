#pragma once

#include <string>
#include <variant>
#include <vector>

namespace nsns {

using Cell = std::variant<std::string, long long, double>;

/// Homogeneous report rows with a stable column order. Doubles print with six
/// significant digits; files are written atomically (temp + rename).
class ReportTable {
 public:
  explicit ReportTable(std::vector<std::string> columns) : columns_(std::move(columns)) {}

  void add_row(std::vector<Cell> row);
  size_t rows() const { return rows_.size(); }

  std::string to_csv() const;
  std::string to_jsonl() const;

  void write_csv(const std::string& path) const;
  void write_jsonl(const std::string& path) const;

 private:
  std::vector<std::string> columns_;
  std::vector<std::vector<Cell>> rows_;
};

std::string format_sig6(double v);

}  // namespace nsns
