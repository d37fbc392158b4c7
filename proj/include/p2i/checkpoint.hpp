#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "p2i/graph.hpp"
#include "p2i/hash.hpp"

namespace p2i {

// Binary checkpoint layout (all integers u32 little-endian, floats IEEE-754
// binary32 little-endian):
//   "P2I1" | spec hash (32 bytes) |
//   per conv layer, ids in ascending byte order:
//     id length | id bytes | out_channels | in_channels | kernel_h | kernel_w |
//     kernels (out*in*kh*kw floats) | biases (out floats)
// The layer records run to end of file.
struct Checkpoint {
  Digest spec_hash{};
  ParameterSet<float> params;
};

std::vector<std::uint8_t> encode_checkpoint(const Digest& spec_hash, const ParameterSet<float>& params);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const NetworkSpec& spec, const ParameterSet<float>& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Loads and verifies that the checkpoint belongs to `spec` (hash and extents).
ParameterSet<float> load_checkpoint_for(const std::filesystem::path& path, const NetworkSpec& spec);

/// SHA-256 of the encoded checkpoint bytes; identifies a parameter set.
Digest checkpoint_hash(const NetworkSpec& spec, const ParameterSet<float>& params);

}  // namespace p2i
