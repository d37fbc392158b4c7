#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "p2i/checkpoint.hpp"
#include "p2i/dataset.hpp"
#include "p2i/metrics.hpp"
#include "p2i/patching.hpp"
#include "p2i/training.hpp"

namespace p2i {

// The four table rows. Scratch is trained like phase 2 (random
// initialisation) but on whole images.
enum class Regime { kPatch, kImageScratch, kImageFrozen, kImageFinetuned };

std::string_view regime_name(Regime r);    // "patch", "image-scratch", ...
std::string_view regime_label(Regime r);   // "Patch", "Image/Scratch", ...
Regime parse_regime(std::string_view name);

/// Record of one pipeline step. Every checkpoint written by the pipeline has
/// a sibling `<checkpoint>.run.json` holding its manifest.
struct RunManifest {
  int phase = 1;
  Regime regime = Regime::kPatch;
  std::string dataset_id;
  std::string spec_name;
  std::string spec_hash;
  std::string checkpoint_hash;         // output parameters; empty for phase 1
  std::string parent_checkpoint_hash;  // required for phases 3 and 4
  std::string parent_manifest;         // path of the parent's run manifest
  std::uint64_t seed = 0;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json results = nlohmann::json::object();

  /// Phase/regime consistency and presence of the parent link.
  void validate() const;
  /// SHA-256 of the canonical JSON form without the hash itself.
  std::string content_hash() const;
};

nlohmann::json run_manifest_to_json(const RunManifest& m);
RunManifest run_manifest_from_json(const nlohmann::json& j);
void save_run_manifest(const RunManifest& m, const std::filesystem::path& path);
RunManifest load_run_manifest(const std::filesystem::path& path);

inline std::filesystem::path manifest_path_for(const std::filesystem::path& checkpoint) {
  return std::filesystem::path(checkpoint.string() + ".run.json");
}

/// Follows parent links from `path`; throws on a broken link, a hash
/// mismatch, a cycle, or a phase-4 run whose ancestor is not a phase-2 patch
/// run. Returns the chain, newest first.
std::vector<RunManifest> verify_lineage(const std::filesystem::path& path);

/// Identifier of a dataset: its name and a prefix of its cache key.
std::string dataset_id(const Dataset& ds);

// ---------------------------------------------------------------------------

struct PatchStrategy {
  enum class Kind { kGrid, kBalanced };
  Kind kind = Kind::kGrid;
  int patch_size = 64;
  int stride = 16;
  bool clamp_last = false;
  int n_pos = 500;
  int n_neg = 500;
  std::uint64_t seed = 1;
};

nlohmann::json strategy_to_json(const PatchStrategy& s);
PatchStrategy parse_strategy_kind(std::string_view name, PatchStrategy base = {});

/// Phase 1: patches from the training images only.
PatchDb phase1_build_patch_db(const std::vector<const ImageSample*>& train, const PatchStrategy& strategy);

/// Phase 2: training from a fresh He-uniform initialisation on patches.
TrainResult phase2_train_patch(const NetworkSpec& spec, const PatchDb& train, const PatchDb& val,
                               const TrainConfig& config, const TrainHooks& hooks = {});

/// Phase 3: the image network is the patch network with its weights copied
/// unchanged. The checkpoint must belong to `image_spec`.
ParameterSet<float> phase3_transfer(const Checkpoint& patch_checkpoint, const NetworkSpec& image_spec);

/// Phase 4: image-level training that starts from the transferred weights.
TrainResult phase4_finetune(const NetworkSpec& spec, const ParameterSet<float>& transferred,
                            const std::vector<const ImageSample*>& train, const std::vector<const ImageSample*>& val,
                            const TrainConfig& config, const TrainHooks& hooks = {});

// ---------------------------------------------------------------------------
// Evaluation

enum class SegmentMethod { kWholeImage, kPatches };

struct EvalOptions {
  SegmentMethod method = SegmentMethod::kWholeImage;
  int patch_size = 64;
  int stride = 16;
  int patch_batch = 32;
  bool fov = false;
  float threshold = 0.5f;
  /// Receives each probability map at the original image size.
  std::function<void(const ImageSample&, const Tensor&)> on_image;
};

struct Evaluation {
  MetricsReport report;
  double seconds_per_image = 0.0;  // segmentation only, excludes metrics
  std::size_t forward_passes = 0;
  std::size_t patches_per_image = 0;  // 0 for whole-image segmentation
};

/// Segments each sample, resizes the probabilities back to the original
/// size and scores them against the original mask.
Evaluation evaluate_samples(const NetworkSpec& spec, const ParameterSet<float>& params,
                            const std::vector<const ImageSample*>& samples, const EvalOptions& options);

/// Wall-clock comparison of the two segmentation methods on one image. Each
/// repetition runs both methods back to back and the minimum of each is
/// kept, which damps interference from other load on the machine.
struct SegmentTiming {
  double whole_seconds = 0.0;
  double patch_seconds = 0.0;
  std::size_t patches = 0;
  double speedup() const { return patch_seconds / whole_seconds; }
};

SegmentTiming time_segmentation(const NetworkSpec& spec, const ParameterSet<float>& params, const Tensor& image,
                                int patch_size, int stride, int patch_batch, int repetitions);

// ---------------------------------------------------------------------------

/// Training/validation images for image-level splits: the dataset's own
/// validation split when it has one, otherwise a seeded hold-out of
/// `fraction` of the training images.
HeldOut training_split(const Dataset& dataset, double fraction, std::uint64_t seed);

struct RegimeOptions {
  PatchStrategy strategy;
  TrainConfig patch_config = TrainConfig::patch_defaults();
  TrainConfig image_config = TrainConfig::image_defaults();
  int eval_stride = 16;
  bool fov = false;
  /// Checkpoints, run manifests, histories and reports go here when set.
  std::optional<std::filesystem::path> out_dir;
  /// Receives (phase label, epoch record) for progress output.
  std::function<void(std::string_view, const EpochRecord&)> on_epoch;
};

struct RegimeRow {
  Regime regime = Regime::kPatch;
  Evaluation eval;
  std::string checkpoint_hash;
};

struct RegimeComparison {
  std::string dataset;
  std::string spec;
  std::vector<RegimeRow> rows;  // Patch, Image/Frozen, Image/Fine-tuned, Image/Scratch
  std::vector<EpochRecord> patch_history, finetune_history, scratch_history;
  nlohmann::json patch_db;

  const RegimeRow& row(Regime r) const;
  nlohmann::json to_json() const;
  /// Aligned plain-text table: one row per regime, seven metrics and the
  /// mean segmentation time per image.
  std::string table() const;
};

/// Runs phases 1 to 4 and the scratch baseline, then evaluates all four
/// regimes on the test split with the same protocol. Validation images come
/// from `training_split` and are separated by image before any patch is
/// extracted.
RegimeComparison run_regimes(const Dataset& dataset, const NetworkSpec& spec, const RegimeOptions& options);

}  // namespace p2i
