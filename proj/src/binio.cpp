#include "nsns/binio.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace nsns {

namespace {

void write_bytes(std::ostream& out, const void* p, size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_bytes(std::istream& in, void* p, size_t n, const char* what) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(in.gcount()) != n)
    throw std::runtime_error(std::string("truncated file while reading ") + what);
}

}  // namespace

void write_u8(std::ostream& out, uint8_t v) { write_bytes(out, &v, 1); }

void write_u16(std::ostream& out, uint16_t v) {
  uint8_t b[2] = {static_cast<uint8_t>(v & 0xff), static_cast<uint8_t>(v >> 8)};
  write_bytes(out, b, 2);
}

void write_u32(std::ostream& out, uint32_t v) {
  uint8_t b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<uint8_t>((v >> (8 * i)) & 0xff);
  write_bytes(out, b, 4);
}

void write_f32(std::ostream& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_u32(out, bits);
}

uint8_t read_u8(std::istream& in, const char* what) {
  uint8_t v;
  read_bytes(in, &v, 1, what);
  return v;
}

uint16_t read_u16(std::istream& in, const char* what) {
  uint8_t b[2];
  read_bytes(in, b, 2, what);
  return static_cast<uint16_t>(b[0] | (uint16_t(b[1]) << 8));
}

uint32_t read_u32(std::istream& in, const char* what) {
  uint8_t b[4];
  read_bytes(in, b, 4, what);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= uint32_t(b[i]) << (8 * i);
  return v;
}

float read_f32(std::istream& in, const char* what) {
  uint32_t bits = read_u32(in, what);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

void write_tensor_f32(std::ostream& out, const Tensor& t) {
  if (t.rank() > 255) throw std::invalid_argument("tensor rank exceeds u8");
  write_u8(out, static_cast<uint8_t>(t.rank()));
  for (int e : t.shape) write_u32(out, static_cast<uint32_t>(e));
  for (double v : t.data) write_f32(out, static_cast<float>(v));
}

Tensor read_tensor_f32(std::istream& in, const char* what) {
  int rank = read_u8(in, what);
  std::vector<int> shape(static_cast<size_t>(rank));
  for (int i = 0; i < rank; ++i) shape[static_cast<size_t>(i)] =
      static_cast<int>(read_u32(in, what));
  Tensor t(shape);
  for (double& v : t.data) v = static_cast<double>(read_f32(in, what));
  return t;
}

void atomic_write_file(const std::string& path, const std::string& payload) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + tmp + "' for writing");
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw std::runtime_error("write failed for '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("cannot rename '" + tmp + "' to '" + path + "'");
}

}  // namespace nsns
