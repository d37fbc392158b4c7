#pragma once

#include <cstdint>
#include <filesystem>

#include "p2i/dataset.hpp"

namespace p2i {

/// Seeded generator of vessel-like test data: cubic Bezier curves of random
/// width drawn darker than a smoothly varying, noisy background.
struct SyntheticConfig {
  int count = 30;
  Size2 size{256, 256};
  int train = 20;  // the first `train` images are train, the rest test
  std::uint64_t seed = 2024;
  int min_curves = 6;
  int max_curves = 10;
  double min_radius = 1.2;
  double max_radius = 3.2;
};

struct SyntheticImage {
  Tensor rgb;   // (1,3,H,W)
  Tensor mask;  // (1,1,H,W), binary
};

SyntheticImage synth_vessel_image(Size2 size, std::uint64_t seed, const SyntheticConfig& config = {});

/// Writes images/NN.png, masks/NN.png and manifest.json under `dir` and
/// returns the manifest (paths resolved).
DatasetManifest write_synthetic_dataset(const SyntheticConfig& config, const std::filesystem::path& dir);

}  // namespace p2i
