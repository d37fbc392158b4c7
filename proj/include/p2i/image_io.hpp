#pragma once

#include <filesystem>

#include "p2i/tensor.hpp"

namespace p2i {

/// Reads an 8/16-bit PNG or a PGM/PPM (P2, P3, P5, P6) file as a (1,C,H,W)
/// tensor with C = 1 (gray) or 3 (RGB) and values scaled to [0,1]. Alpha
/// channels are dropped. Errors name the offending path.
Tensor read_image(const std::filesystem::path& path);

/// Writes a (1,1,H,W) or (1,3,H,W) tensor as an 8-bit image, value
/// round(255 * clamp(v, 0, 1)). The format follows the extension: .png, .pgm
/// or .ppm.
void write_image(const std::filesystem::path& path, const Tensor& image);

// Raw tensor files: "P2IT", then u32 n, c, h, w, then n*c*h*w binary32
// values, all little-endian. Round trips are bit-exact.
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace p2i
