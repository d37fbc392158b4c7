#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "p2i/tensor.hpp"

namespace p2i {

struct Confusion {
  std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;

  std::uint64_t total() const { return tp + tn + fp + fn; }
  Confusion& operator+=(const Confusion& o) {
    tp += o.tp;
    tn += o.tn;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
};

/// Ratios derived from a confusion table. A ratio whose denominator is zero
/// is 1: no positives gives sensitivity 1, no negatives specificity 1, and an
/// empty ground truth with an empty prediction Dice and Jaccard 1.
struct OverlapMetrics {
  double sens = 0, spec = 0, acc = 0, dice = 0, jaccard = 0;
};

OverlapMetrics overlap_metrics(const Confusion& c);

/// Counts prediction >= threshold against mask >= 0.5. When `fov` is
/// non-empty only pixels with fov >= 0.5 are counted.
Confusion confusion_counts(std::span<const float> prob, std::span<const float> mask, float threshold = 0.5f,
                           std::span<const float> fov = {});

/// Area under the ROC curve from a sweep over every distinct score with
/// trapezoidal integration (ties contribute half). Throws when the labels
/// hold a single class.
double auc_roc(std::span<const double> scores, std::span<const std::uint8_t> labels);
double auc_roc(std::span<const float> scores, std::span<const std::uint8_t> labels);

/// Average precision: sum over distinct thresholds, highest first, of
/// (R_k - R_{k-1}) * P_k. Throws when there are no positives.
double auprc(std::span<const double> scores, std::span<const std::uint8_t> labels);
double auprc(std::span<const float> scores, std::span<const std::uint8_t> labels);

struct CurvePoint {
  double threshold = 0;
  double x = 0;  // FPR for ROC, recall for PR
  double y = 0;  // TPR for ROC, precision for PR
};

struct Curves {
  std::vector<CurvePoint> roc;
  std::vector<CurvePoint> pr;
};

/// ROC and PR points at distinct thresholds, thinned to at most `max_points` each.
Curves curves(std::span<const float> scores, std::span<const std::uint8_t> labels, std::size_t max_points = 256);

struct ImageMetrics {
  std::string id;
  Confusion counts;
  OverlapMetrics overlap;
  double auc = 0;    // NaN when the image holds a single class
  double auprc = 0;  // NaN when the image has no positives
};

/// Pooled metrics over every evaluated pixel plus per-image values.
struct MetricsReport {
  Confusion counts;
  OverlapMetrics overlap;
  double auc = 0;
  double auprc = 0;
  bool fov_restricted = false;
  float threshold = 0.5f;
  std::vector<ImageMetrics> per_image;
  Curves curves;
};

nlohmann::json metrics_to_json(const MetricsReport& r);

/// Collects per-image results; finish() pools them.
class MetricsAccumulator {
 public:
  explicit MetricsAccumulator(float threshold = 0.5f) : threshold_(threshold) {}

  /// `prob` and `mask` are single-channel maps of equal shape; `fov` is empty
  /// or of the same shape.
  const ImageMetrics& add(const std::string& id, const Tensor& prob, const Tensor& mask, const Tensor& fov = {});

  MetricsReport finish() const;

 private:
  float threshold_;
  bool any_fov_ = false;
  std::vector<ImageMetrics> images_;
  std::vector<float> scores_;
  std::vector<std::uint8_t> labels_;
};

}  // namespace p2i
