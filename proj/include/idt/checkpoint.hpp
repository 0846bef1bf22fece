#pragma once

// Binary checkpoint (all integers and floats little-endian):
//
//   "IDTCKPT1"  u32 version
//   u32 patch_size, embed_dim, block_pairs, heads, registers, lobes, mlp_ratio, aux_depth
//   u32 tensor count
//   per tensor: u32 name length, name bytes, u32 rank, u64 extents[rank], f64 payload
//   u32 CRC32 of every preceding byte
//
// Model parameters and optional optimizer state share the tensor table; the
// latter use the "optim." name prefix.

#include "idt/model.hpp"

#include <filesystem>
#include <string>

namespace idt {

inline constexpr const char* kCheckpointMagic = "IDTCKPT1";
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kOptimPrefix = "optim.";

struct Checkpoint {
  model::Model model;
  model::ParamStore optimizer;  // names without the "optim." prefix; may be empty
};

std::string encode_checkpoint(const Checkpoint& ckpt);
// Throws FormatError on bad magic, version, CRC or structure.
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace idt
