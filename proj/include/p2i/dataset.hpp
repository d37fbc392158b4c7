#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "p2i/imaging.hpp"
#include "p2i/tensor.hpp"

namespace p2i {

enum class Split { kTrain, kVal, kTest };

std::string_view split_name(Split s);
Split parse_split(std::string_view name);

/// A pre-processed image with its ground truth.
///
/// `image` and `mask` are (1,1,H,W) at the working resolution (multiples of
/// 4); `original_mask` and the optional `fov` stay at the source resolution
/// so metrics can be computed there after resize_back.
struct ImageSample {
  std::string id;
  Split split = Split::kTrain;
  Tensor image;
  Tensor mask;
  Tensor original_mask;
  Tensor fov;  // empty when the manifest lists none
  Size2 original_size;
};

struct ManifestEntry {
  std::string id;
  std::filesystem::path image;
  std::filesystem::path mask;
  std::optional<std::filesystem::path> fov;
  Split split = Split::kTrain;
};

// Manifest files are JSON:
//   { "name": "drive",
//     "target": [584, 568],            // optional; default rounds each image
//                                      // up to multiples of 4
//     "preprocess": { "grayscale": true, "gamma": 1.7, "gamma_mode": "brighten",
//                     "apply_gamma": true, "apply_clahe": true,
//                     "clahe_tiles": [8, 8], "clahe_clip": 2.0, "clahe_bins": 256 },
//     "entries": [ { "id": "01", "image": "images/01.png", "mask": "masks/01.png",
//                    "fov": "fov/01.png", "split": "train" }, ... ] }
// Relative paths are resolved against the manifest's directory.
struct DatasetManifest {
  std::string name;
  std::optional<Size2> target;
  PreprocessConfig preprocess;
  std::vector<ManifestEntry> entries;
};

nlohmann::json manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

/// Reads, resizes and pre-processes one entry.
ImageSample load_sample(const ManifestEntry& entry, const DatasetManifest& manifest);

struct Dataset {
  std::string name;
  std::vector<ImageSample> samples;
  nlohmann::json provenance;

  std::vector<const ImageSample*> split(Split s) const;
};

struct PrepareResult {
  bool cache_hit = false;
  std::filesystem::path dir;
};

/// Pre-processes every manifest entry into `out_dir` and writes a provenance
/// record (dataset.json) keyed by the manifest content, the pre-processing
/// settings and the input file hashes. An up-to-date cache is left untouched.
PrepareResult prepare_dataset(const DatasetManifest& manifest, const std::filesystem::path& out_dir,
                              bool force = false);

Dataset load_prepared(const std::filesystem::path& dir);

/// Loads a prepared directory, or prepares in memory when given a manifest file.
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace p2i
