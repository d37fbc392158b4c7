#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "p2i/dataset.hpp"
#include "p2i/graph.hpp"
#include "p2i/imaging.hpp"

namespace p2i {

enum class MergeRule {
  kMean,           // each pixel is the average of the patches covering it
  kSumNormalized,  // covering patches summed, divided by the plan's maximum coverage
};

struct PatchOffset {
  int y = 0;
  int x = 0;
  friend bool operator==(const PatchOffset&, const PatchOffset&) = default;
};

/// Square p x p windows of an image, given by their top-left anchors. A valid
/// plan keeps every window inside the image and covers every pixel.
struct PatchPlan {
  int patch_size = 0;
  Size2 image_size;
  std::vector<PatchOffset> offsets;
  MergeRule merge_rule = MergeRule::kMean;

  std::size_t size() const { return offsets.size(); }
  /// Number of windows covering each pixel, row-major.
  std::vector<int> coverage() const;
  /// Throws unless windows are in bounds and coverage is total.
  void validate() const;
};

/// Anchors 0, s, 2s, ... with a final anchor extent - p appended when needed
/// (clamp) or omitted (floor, which may leave the far border uncovered).
std::vector<int> grid_anchors(int extent, int patch_size, int stride, bool clamp_last);

/// Grid plan with clamped final anchors, so coverage is total. Requires
/// 0 < stride <= patch_size.
PatchPlan plan_grid(Size2 image, int patch_size, int stride);

/// Window k of every batch item, as a (N,C,p,p) tensor.
Tensor extract_patch(const Tensor& image, const PatchPlan& plan, std::size_t k);

/// All windows of a single (1,C,H,W) image, in plan order.
std::vector<Tensor> extract(const Tensor& image, const PatchPlan& plan);

/// Windows [begin, end) of a single image stacked into one batch.
Tensor extract_batch(const Tensor& image, const PatchPlan& plan, std::size_t begin, std::size_t end);

/// Reassembles (1,C,p,p) patches according to the plan. Sums are taken in
/// double in plan order, so merge(extract(x)) reproduces x bit for bit.
Tensor merge(const std::vector<Tensor>& patches, const PatchPlan& plan);

/// Segments by running the network on every window (in batches) and merging
/// the probabilities with the plan's rule.
Tensor segment_by_patches(const NetworkSpec& spec, const ParameterSet<float>& params, const Tensor& image,
                          const PatchPlan& plan, int batch_size = 32);

struct PatchOrigin {
  std::string sample;
  int y = 0;
  int x = 0;
};

/// Training patches with their ground truth, stored as (N,1,p,p) tensors.
struct PatchDb {
  int patch_size = 0;
  std::string strategy;
  Tensor images;
  Tensor masks;
  std::vector<PatchOrigin> origins;

  std::size_t size() const { return origins.size(); }
  /// Counts and class balance.
  nlohmann::json summary() const;
};

/// Every grid window of every sample, in sample then row-major anchor order.
/// `clamp_last` selects the grid edge policy (see grid_anchors).
PatchDb build_patch_db_grid(const std::vector<const ImageSample*>& samples, int patch_size, int stride,
                            bool clamp_last = false);

/// Per sample, n_pos windows centred on uniformly drawn foreground pixels and
/// n_neg on background pixels (drawn with replacement). Windows that would
/// leave the image are shifted inside it, which keeps the centre pixel within
/// the window.
PatchDb build_patch_db_balanced(const std::vector<const ImageSample*>& samples, int patch_size, int n_pos,
                                int n_neg, std::uint64_t seed);

// On disk a patch DB is a directory holding index.json and, per patch,
// patches/NNNNNN.image.p2t (raw float tensor) and patches/NNNNNN.mask.png.
void save_patch_db(const PatchDb& db, const std::filesystem::path& dir);
PatchDb load_patch_db(const std::filesystem::path& dir);

}  // namespace p2i
