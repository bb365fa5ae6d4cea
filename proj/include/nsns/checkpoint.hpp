#pragma once

#include <string>

#include "nsns/model.hpp"

namespace nsns {

/// Checkpoint file: magic "NSNSCKPT", u16 version, u32-length-prefixed canonical
/// spec JSON, then each parameter in spec order as u16 name length + name,
/// u8 rank, u32 extents, f32 little-endian payload. Suppression is not stored.
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace nsns
