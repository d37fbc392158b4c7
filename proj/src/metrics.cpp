#include "p2i/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace p2i {

using nlohmann::json;

OverlapMetrics overlap_metrics(const Confusion& c) {
  if (c.total() == 0) fail(ErrorCode::kInvalidArgument, "metrics: empty image");
  auto ratio = [](double num, double den) { return den == 0.0 ? 1.0 : num / den; };
  const double tp = static_cast<double>(c.tp), tn = static_cast<double>(c.tn);
  const double fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
  OverlapMetrics m;
  m.sens = ratio(tp, tp + fn);
  m.spec = ratio(tn, tn + fp);
  m.acc = (tp + tn) / static_cast<double>(c.total());
  m.dice = ratio(2.0 * tp, 2.0 * tp + fp + fn);
  m.jaccard = ratio(tp, tp + fp + fn);
  return m;
}

Confusion confusion_counts(std::span<const float> prob, std::span<const float> mask, float threshold,
                           std::span<const float> fov) {
  if (prob.size() != mask.size()) {
    fail(ErrorCode::kShape, "metrics: prediction has " + std::to_string(prob.size()) + " pixels, mask has " +
                                std::to_string(mask.size()));
  }
  if (!fov.empty() && fov.size() != prob.size()) fail(ErrorCode::kShape, "metrics: FOV mask size differs");
  if (prob.empty()) fail(ErrorCode::kInvalidArgument, "metrics: empty image");
  Confusion c;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    if (!fov.empty() && fov[i] < 0.5f) continue;
    const bool p = prob[i] >= threshold, g = mask[i] >= 0.5f;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

namespace {

// Cumulative (tp, fp) after admitting every score >= the group's threshold,
// one entry per distinct score, highest first.
struct Step {
  double threshold;
  double tp;
  double fp;
};

template <typename S>
std::vector<Step> sweep(std::span<const S> scores, std::span<const std::uint8_t> labels, double& pos, double& neg) {
  if (scores.size() != labels.size()) fail(ErrorCode::kShape, "metrics: scores and labels differ in length");
  std::vector<std::pair<S, std::uint8_t>> v(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) v[i] = {scores[i], labels[i] ? 1 : 0};
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<Step> steps;
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < v.size();) {
    const S s = v[i].first;
    for (; i < v.size() && v[i].first == s; ++i) (v[i].second ? tp : fp) += 1.0;
    steps.push_back({static_cast<double>(s), tp, fp});
  }
  pos = tp;
  neg = fp;
  return steps;
}

template <typename S>
double auc_impl(std::span<const S> scores, std::span<const std::uint8_t> labels) {
  double pos = 0, neg = 0;
  const std::vector<Step> steps = sweep(scores, labels, pos, neg);
  if (pos == 0 || neg == 0) fail(ErrorCode::kInvalidArgument, "AUC is undefined when labels hold a single class");
  double area = 0, tp0 = 0, fp0 = 0;
  for (const Step& s : steps) {
    area += (s.fp - fp0) * (s.tp + tp0);
    tp0 = s.tp;
    fp0 = s.fp;
  }
  return area / (2.0 * pos * neg);
}

template <typename S>
double auprc_impl(std::span<const S> scores, std::span<const std::uint8_t> labels) {
  double pos = 0, neg = 0;
  const std::vector<Step> steps = sweep(scores, labels, pos, neg);
  if (pos == 0) fail(ErrorCode::kInvalidArgument, "AUPRC is undefined without positive labels");
  double ap = 0, tp0 = 0;
  for (const Step& s : steps) {
    ap += (s.tp - tp0) / pos * (s.tp / (s.tp + s.fp));
    tp0 = s.tp;
  }
  return ap;
}

std::vector<CurvePoint> thin(std::vector<CurvePoint> pts, std::size_t max_points) {
  if (pts.size() <= max_points || max_points < 2) return pts;
  std::vector<CurvePoint> out;
  out.reserve(max_points);
  for (std::size_t k = 0; k < max_points; ++k) out.push_back(pts[k * (pts.size() - 1) / (max_points - 1)]);
  return out;
}

double nan() { return std::numeric_limits<double>::quiet_NaN(); }

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json overlap_json(const OverlapMetrics& m) {
  return {{"sens", m.sens}, {"spec", m.spec}, {"acc", m.acc}, {"dice", m.dice}, {"jaccard", m.jaccard}};
}

json counts_json(const Confusion& c) { return {{"tp", c.tp}, {"tn", c.tn}, {"fp", c.fp}, {"fn", c.fn}}; }

json curve_json(const std::vector<CurvePoint>& pts) {
  json a = json::array();
  for (const CurvePoint& p : pts) a.push_back({p.threshold, p.x, p.y});
  return a;
}

}  // namespace

double auc_roc(std::span<const double> s, std::span<const std::uint8_t> l) { return auc_impl(s, l); }
double auc_roc(std::span<const float> s, std::span<const std::uint8_t> l) { return auc_impl(s, l); }
double auprc(std::span<const double> s, std::span<const std::uint8_t> l) { return auprc_impl(s, l); }
double auprc(std::span<const float> s, std::span<const std::uint8_t> l) { return auprc_impl(s, l); }

Curves curves(std::span<const float> scores, std::span<const std::uint8_t> labels, std::size_t max_points) {
  double pos = 0, neg = 0;
  const std::vector<Step> steps = sweep(scores, labels, pos, neg);
  Curves c;
  c.roc.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  for (const Step& s : steps) {
    c.roc.push_back({s.threshold, neg > 0 ? s.fp / neg : 0.0, pos > 0 ? s.tp / pos : 0.0});
    c.pr.push_back({s.threshold, pos > 0 ? s.tp / pos : 0.0, s.tp / (s.tp + s.fp)});
  }
  c.roc = thin(std::move(c.roc), max_points);
  c.pr = thin(std::move(c.pr), max_points);
  return c;
}

const ImageMetrics& MetricsAccumulator::add(const std::string& id, const Tensor& prob, const Tensor& mask,
                                            const Tensor& fov) {
  if (prob.shape() != mask.shape()) {
    fail(ErrorCode::kShape, "metrics for '" + id + "': prediction " + to_string(prob.shape()) + " vs mask " +
                                to_string(mask.shape()));
  }
  if (!fov.empty() && fov.shape() != mask.shape()) {
    fail(ErrorCode::kShape, "metrics for '" + id + "': FOV " + to_string(fov.shape()) + " vs mask " +
                                to_string(mask.shape()));
  }
  ImageMetrics im;
  im.id = id;
  im.counts = confusion_counts(prob.values(), mask.values(), threshold_, fov.values());
  im.overlap = overlap_metrics(im.counts);

  std::vector<float> s;
  std::vector<std::uint8_t> l;
  s.reserve(prob.size());
  l.reserve(prob.size());
  for (std::size_t i = 0; i < prob.size(); ++i) {
    if (!fov.empty() && fov.data()[i] < 0.5f) continue;
    s.push_back(prob.data()[i]);
    l.push_back(mask.data()[i] >= 0.5f ? 1 : 0);
  }
  const bool has_pos = im.counts.tp + im.counts.fn > 0, has_neg = im.counts.tn + im.counts.fp > 0;
  im.auc = has_pos && has_neg ? auc_roc(std::span<const float>(s), l) : nan();
  im.auprc = has_pos ? auprc(std::span<const float>(s), l) : nan();
  scores_.insert(scores_.end(), s.begin(), s.end());
  labels_.insert(labels_.end(), l.begin(), l.end());
  any_fov_ = any_fov_ || !fov.empty();
  images_.push_back(std::move(im));
  return images_.back();
}

MetricsReport MetricsAccumulator::finish() const {
  if (images_.empty()) fail(ErrorCode::kInvalidArgument, "metrics: no images evaluated");
  MetricsReport r;
  r.threshold = threshold_;
  r.fov_restricted = any_fov_;
  r.per_image = images_;
  for (const ImageMetrics& im : images_) r.counts += im.counts;
  r.overlap = overlap_metrics(r.counts);
  const bool has_pos = r.counts.tp + r.counts.fn > 0, has_neg = r.counts.tn + r.counts.fp > 0;
  r.auc = has_pos && has_neg ? auc_roc(std::span<const float>(scores_), labels_) : nan();
  r.auprc = has_pos ? auprc(std::span<const float>(scores_), labels_) : nan();
  r.curves = curves(scores_, labels_);
  return r;
}

json metrics_to_json(const MetricsReport& r) {
  json per = json::array();
  json lists{{"id", json::array()},  {"sens", json::array()},    {"spec", json::array()}, {"acc", json::array()},
             {"dice", json::array()}, {"jaccard", json::array()}, {"auc", json::array()},  {"auprc", json::array()}};
  for (const ImageMetrics& im : r.per_image) {
    json e = overlap_json(im.overlap);
    e["id"] = im.id;
    e["counts"] = counts_json(im.counts);
    e["auc"] = number_or_null(im.auc);
    e["auprc"] = number_or_null(im.auprc);
    per.push_back(e);
    lists["id"].push_back(im.id);
    lists["sens"].push_back(im.overlap.sens);
    lists["spec"].push_back(im.overlap.spec);
    lists["acc"].push_back(im.overlap.acc);
    lists["dice"].push_back(im.overlap.dice);
    lists["jaccard"].push_back(im.overlap.jaccard);
    lists["auc"].push_back(number_or_null(im.auc));
    lists["auprc"].push_back(number_or_null(im.auprc));
  }
  json metrics = overlap_json(r.overlap);
  metrics["auc"] = number_or_null(r.auc);
  metrics["auprc"] = number_or_null(r.auprc);
  return {{"threshold", r.threshold},
          {"fov_restricted", r.fov_restricted},
          {"counts", counts_json(r.counts)},
          {"metrics", metrics},
          {"per_image", per},
          {"per_image_lists", lists},
          {"curves", {{"roc", curve_json(r.curves.roc)}, {"pr", curve_json(r.curves.pr)}}}};
}

}  // namespace p2i
