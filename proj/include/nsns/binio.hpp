#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "nsns/tensor.hpp"

namespace nsns {

// Little-endian primitives and the f32 tensor encoding shared by the
// checkpoint and dual-pair file formats.

void write_u8(std::ostream& out, uint8_t v);
void write_u16(std::ostream& out, uint16_t v);
void write_u32(std::ostream& out, uint32_t v);
void write_f32(std::ostream& out, float v);

uint8_t read_u8(std::istream& in, const char* what);
uint16_t read_u16(std::istream& in, const char* what);
uint32_t read_u32(std::istream& in, const char* what);
float read_f32(std::istream& in, const char* what);

/// u8 rank, u32 extents, then numel f32 little-endian values.
void write_tensor_f32(std::ostream& out, const Tensor& t);
Tensor read_tensor_f32(std::istream& in, const char* what);

/// Writes to `path + ".tmp"` then renames, so readers never observe a partial file.
void atomic_write_file(const std::string& path, const std::string& payload);

}  // namespace nsns
