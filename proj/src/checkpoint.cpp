#include "nsns/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "nsns/binio.hpp"

namespace nsns {

namespace {
constexpr char kMagic[8] = {'N', 'S', 'N', 'S', 'C', 'K', 'P', 'T'};
constexpr uint16_t kVersion = 1;
}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
  std::ostringstream out(std::ios::binary);
  out.write(kMagic, 8);
  write_u16(out, kVersion);
  const std::string spec_json = model.spec.to_json();
  write_u32(out, static_cast<uint32_t>(spec_json.size()));
  out.write(spec_json.data(), static_cast<std::streamsize>(spec_json.size()));
  for (const auto& [name, tensor] : model.params) {
    write_u16(out, static_cast<uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor_f32(out, tensor);
  }
  atomic_write_file(path, out.str());
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  char magic[8];
  in.read(magic, 8);
  if (in.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("bad checkpoint magic in '" + path + "'");
  uint16_t version = read_u16(in, "checkpoint version");
  if (version != kVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) +
                             " in '" + path + "' (supported: 1)");
  uint32_t spec_len = read_u32(in, "checkpoint spec length");
  std::string spec_json(spec_len, '\0');
  in.read(spec_json.data(), static_cast<std::streamsize>(spec_len));
  if (static_cast<uint32_t>(in.gcount()) != spec_len)
    throw std::runtime_error("truncated file while reading checkpoint spec");

  Model model;
  model.spec = ModelSpec::from_json(spec_json);
  // parameters must appear in spec order; rebuild the expected list to verify
  Model reference = build_model(model.spec, 0);
  for (const auto& [expected_name, expected_tensor] : reference.params) {
    uint16_t name_len = read_u16(in, "checkpoint parameter name");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (in.gcount() != name_len)
      throw std::runtime_error("truncated file while reading checkpoint parameter name");
    if (name != expected_name)
      throw std::runtime_error("checkpoint parameter order mismatch: expected '" + expected_name +
                               "', found '" + name + "'");
    Tensor t = read_tensor_f32(in, "checkpoint parameter payload");
    if (t.shape != expected_tensor.shape)
      throw std::runtime_error("checkpoint parameter '" + name + "' has shape " + t.shape_str() +
                               ", spec requires " + expected_tensor.shape_str());
    model.params.emplace_back(name, std::move(t));
  }
  return model;
}

}  // namespace nsns
