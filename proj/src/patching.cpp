#include "p2i/patching.hpp"

#include <cstdio>
#include <random>

#include "p2i/file_util.hpp"
#include "p2i/image_io.hpp"

namespace p2i {
namespace fs = std::filesystem;
using nlohmann::json;

std::vector<int> grid_anchors(int extent, int p, int stride, bool clamp_last) {
  if (stride <= 0) fail(ErrorCode::kInvalidArgument, "patch grid: stride must be positive");
  if (p <= 0 || p > extent) {
    fail(ErrorCode::kInvalidArgument, "patch grid: patch size " + std::to_string(p) + " does not fit extent " +
                                          std::to_string(extent));
  }
  std::vector<int> a;
  for (int v = 0; v + p <= extent; v += stride) a.push_back(v);
  if (clamp_last && a.back() + p < extent) a.push_back(extent - p);
  return a;
}

std::vector<int> PatchPlan::coverage() const {
  std::vector<int> cov(static_cast<std::size_t>(image_size.h) * image_size.w, 0);
  for (const PatchOffset& o : offsets)
    for (int y = o.y; y < o.y + patch_size; ++y)
      for (int x = o.x; x < o.x + patch_size; ++x) ++cov[static_cast<std::size_t>(y) * image_size.w + x];
  return cov;
}

void PatchPlan::validate() const {
  if (patch_size <= 0) fail(ErrorCode::kInvalidArgument, "patch plan: patch size must be positive");
  for (const PatchOffset& o : offsets) {
    if (o.y < 0 || o.x < 0 || o.y + patch_size > image_size.h || o.x + patch_size > image_size.w) {
      fail(ErrorCode::kInvalidArgument, "patch plan: window at (" + std::to_string(o.y) + "," + std::to_string(o.x) +
                                            ") leaves the " + std::to_string(image_size.h) + "x" +
                                            std::to_string(image_size.w) + " image");
    }
  }
  const std::vector<int> cov = coverage();
  for (std::size_t i = 0; i < cov.size(); ++i) {
    if (cov[i] == 0) {
      fail(ErrorCode::kInvalidArgument, "patch plan: pixel (" + std::to_string(i / image_size.w) + "," +
                                            std::to_string(i % image_size.w) + ") is not covered");
    }
  }
}

PatchPlan plan_grid(Size2 image, int patch_size, int stride) {
  if (stride > patch_size) {
    fail(ErrorCode::kInvalidArgument, "patch plan: stride " + std::to_string(stride) + " exceeds patch size " +
                                          std::to_string(patch_size) + " and would leave gaps");
  }
  PatchPlan plan;
  plan.patch_size = patch_size;
  plan.image_size = image;
  const std::vector<int> ys = grid_anchors(image.h, patch_size, stride, true);
  const std::vector<int> xs = grid_anchors(image.w, patch_size, stride, true);
  for (int y : ys)
    for (int x : xs) plan.offsets.push_back({y, x});
  return plan;
}

namespace {

void check_image(const Tensor& image, const PatchPlan& plan) {
  if (image.h() != plan.image_size.h || image.w() != plan.image_size.w) {
    fail(ErrorCode::kShape, "patch plan is for " + std::to_string(plan.image_size.h) + "x" +
                                std::to_string(plan.image_size.w) + " images, got " + to_string(image.shape()));
  }
}

void copy_window(const Tensor& image, int n, PatchOffset o, int p, Tensor& out, int out_n) {
  for (int c = 0; c < image.c(); ++c)
    for (int y = 0; y < p; ++y) {
      const float* src = &image.at(n, c, o.y + y, o.x);
      std::copy(src, src + p, &out.at(out_n, c, y, 0));
    }
}

}  // namespace

Tensor extract_patch(const Tensor& image, const PatchPlan& plan, std::size_t k) {
  check_image(image, plan);
  const int p = plan.patch_size;
  Tensor out(Shape{image.n(), image.c(), p, p});
  for (int n = 0; n < image.n(); ++n) copy_window(image, n, plan.offsets.at(k), p, out, n);
  return out;
}

std::vector<Tensor> extract(const Tensor& image, const PatchPlan& plan) {
  std::vector<Tensor> out;
  out.reserve(plan.size());
  for (std::size_t k = 0; k < plan.size(); ++k) out.push_back(extract_patch(image, plan, k));
  return out;
}

Tensor extract_batch(const Tensor& image, const PatchPlan& plan, std::size_t begin, std::size_t end) {
  check_image(image, plan);
  if (image.n() != 1) fail(ErrorCode::kShape, "extract_batch: expected a single image");
  const int p = plan.patch_size;
  Tensor out(Shape{static_cast<int>(end - begin), image.c(), p, p});
  for (std::size_t k = begin; k < end; ++k) copy_window(image, 0, plan.offsets.at(k), p, out, static_cast<int>(k - begin));
  return out;
}

Tensor merge(const std::vector<Tensor>& patches, const PatchPlan& plan) {
  if (patches.size() != plan.size()) {
    fail(ErrorCode::kInvalidArgument, "merge: got " + std::to_string(patches.size()) + " patches for a plan of " +
                                          std::to_string(plan.size()));
  }
  if (patches.empty()) fail(ErrorCode::kInvalidArgument, "merge: empty plan");
  const int p = plan.patch_size, H = plan.image_size.h, W = plan.image_size.w, C = patches.front().c();
  std::vector<double> sum(static_cast<std::size_t>(C) * H * W, 0.0);
  for (std::size_t k = 0; k < patches.size(); ++k) {
    const Tensor& t = patches[k];
    if (t.shape() != Shape{1, C, p, p}) {
      fail(ErrorCode::kShape, "merge: patch " + std::to_string(k) + " has shape " + to_string(t.shape()));
    }
    const PatchOffset o = plan.offsets[k];
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x)
          sum[(static_cast<std::size_t>(c) * H + o.y + y) * W + o.x + x] += t.at(0, c, y, x);
  }
  const std::vector<int> cov = plan.coverage();
  const int max_cov = *std::max_element(cov.begin(), cov.end());
  Tensor out(Shape{1, C, H, W});
  for (int c = 0; c < C; ++c)
    for (std::size_t i = 0; i < cov.size(); ++i) {
      if (cov[i] == 0) fail(ErrorCode::kInvalidArgument, "merge: plan leaves pixels uncovered");
      const double d = plan.merge_rule == MergeRule::kMean ? cov[i] : max_cov;
      out.data()[c * cov.size() + i] = static_cast<float>(sum[c * cov.size() + i] / d);
    }
  return out;
}

Tensor segment_by_patches(const NetworkSpec& spec, const ParameterSet<float>& params, const Tensor& image,
                          const PatchPlan& plan, int batch_size) {
  if (batch_size <= 0) fail(ErrorCode::kInvalidArgument, "segment_by_patches: batch size must be positive");
  std::vector<Tensor> probs;
  probs.reserve(plan.size());
  for (std::size_t b = 0; b < plan.size(); b += static_cast<std::size_t>(batch_size)) {
    const std::size_t e = std::min(plan.size(), b + static_cast<std::size_t>(batch_size));
    const Tensor out = forward(spec, params, extract_batch(image, plan, b, e), false).output;
    for (int i = 0; i < out.n(); ++i) probs.push_back(batch_item(out, i));
  }
  return merge(probs, plan);
}

json PatchDb::summary() const {
  double fg = 0.0;
  std::size_t positive_patches = 0;
  const std::size_t area = static_cast<std::size_t>(patch_size) * patch_size;
  for (std::size_t k = 0; k < size(); ++k) {
    double s = 0.0;
    const float* m = masks.data() + k * area;
    for (std::size_t i = 0; i < area; ++i) s += m[i];
    fg += s;
    if (s > 0) ++positive_patches;
  }
  return {{"patches", size()},
          {"patch_size", patch_size},
          {"strategy", strategy},
          {"foreground_fraction", size() ? fg / static_cast<double>(size() * area) : 0.0},
          {"patches_with_foreground", positive_patches}};
}

namespace {

void check_patch_size(int p) {
  if (p <= 0 || p % 4 != 0) {
    fail(ErrorCode::kInvalidArgument, "patch size " + std::to_string(p) + " must be a positive multiple of 4");
  }
}

PatchDb make_db(int p, std::string strategy, std::size_t count) {
  PatchDb db;
  db.patch_size = p;
  db.strategy = std::move(strategy);
  db.images = Tensor(Shape{static_cast<int>(count), 1, p, p});
  db.masks = Tensor(Shape{static_cast<int>(count), 1, p, p});
  db.origins.reserve(count);
  return db;
}

void add_window(PatchDb& db, const ImageSample& s, PatchOffset o) {
  const int k = static_cast<int>(db.origins.size());
  copy_window(s.image, 0, o, db.patch_size, db.images, k);
  copy_window(s.mask, 0, o, db.patch_size, db.masks, k);
  db.origins.push_back({s.id, o.y, o.x});
}

}  // namespace

PatchDb build_patch_db_grid(const std::vector<const ImageSample*>& samples, int p, int stride, bool clamp_last) {
  check_patch_size(p);
  if (samples.empty()) fail(ErrorCode::kInvalidArgument, "patch DB: no training images");
  std::size_t total = 0;
  std::vector<std::pair<std::vector<int>, std::vector<int>>> anchors;
  for (const ImageSample* s : samples) {
    anchors.emplace_back(grid_anchors(s->image.h(), p, stride, clamp_last),
                         grid_anchors(s->image.w(), p, stride, clamp_last));
    total += anchors.back().first.size() * anchors.back().second.size();
  }
  PatchDb db = make_db(p, "grid", total);
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (int y : anchors[i].first)
      for (int x : anchors[i].second) add_window(db, *samples[i], {y, x});
  return db;
}

PatchDb build_patch_db_balanced(const std::vector<const ImageSample*>& samples, int p, int n_pos, int n_neg,
                                std::uint64_t seed) {
  check_patch_size(p);
  if (samples.empty()) fail(ErrorCode::kInvalidArgument, "patch DB: no training images");
  if (n_pos < 0 || n_neg < 0) fail(ErrorCode::kInvalidArgument, "patch DB: patch counts must be non-negative");
  PatchDb db = make_db(p, "balanced", samples.size() * static_cast<std::size_t>(n_pos + n_neg));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const ImageSample& s = *samples[i];
    const int H = s.image.h(), W = s.image.w();
    if (p > H || p > W) fail(ErrorCode::kInvalidArgument, "patch DB: patch size exceeds image '" + s.id + "'");
    std::vector<std::uint32_t> pos, neg;
    for (std::size_t j = 0; j < s.mask.size(); ++j) (s.mask.data()[j] >= 0.5f ? pos : neg).push_back(static_cast<std::uint32_t>(j));
    if ((n_pos > 0 && pos.empty()) || (n_neg > 0 && neg.empty())) {
      fail(ErrorCode::kInvalidArgument, "patch DB: image '" + s.id + "' has no " +
                                            (pos.empty() ? "foreground" : "background") + " pixels to centre on");
    }
    std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ull * (i + 1)));
    auto place = [&](std::uint32_t centre) {
      const int cy = static_cast<int>(centre / W), cx = static_cast<int>(centre % W);
      add_window(db, s, {std::clamp(cy - p / 2, 0, H - p), std::clamp(cx - p / 2, 0, W - p)});
    };
    for (int k = 0; k < n_pos; ++k) place(pos[rng() % pos.size()]);
    for (int k = 0; k < n_neg; ++k) place(neg[rng() % neg.size()]);
  }
  return db;
}

void save_patch_db(const PatchDb& db, const fs::path& dir) {
  fs::create_directories(dir / "patches");
  json origins = json::array();
  for (std::size_t k = 0; k < db.size(); ++k) {
    char stem[32];
    std::snprintf(stem, sizeof(stem), "patches/%06zu", k);
    save_tensor(dir / (std::string(stem) + ".image.p2t"), batch_item(db.images, static_cast<int>(k)));
    write_image(dir / (std::string(stem) + ".mask.png"), batch_item(db.masks, static_cast<int>(k)));
    origins.push_back({{"sample", db.origins[k].sample}, {"y", db.origins[k].y}, {"x", db.origins[k].x},
                       {"image", std::string(stem) + ".image.p2t"}, {"mask", std::string(stem) + ".mask.png"}});
  }
  json index = db.summary();
  index["format"] = 1;
  index["entries"] = origins;
  write_text_atomic(dir / "index.json", index.dump(1) + "\n");
}

PatchDb load_patch_db(const fs::path& dir) {
  json index;
  try {
    index = json::parse(read_text(dir / "index.json"));
    const int p = index.at("patch_size").get<int>();
    const json& entries = index.at("entries");
    PatchDb db = make_db(p, index.at("strategy").get<std::string>(), entries.size());
    for (std::size_t k = 0; k < entries.size(); ++k) {
      const json& e = entries[k];
      const Tensor img = load_tensor(dir / e.at("image").get<std::string>());
      const Tensor mask = binarize(read_image(dir / e.at("mask").get<std::string>()));
      if (img.shape() != Shape{1, 1, p, p} || mask.shape() != Shape{1, 1, p, p}) {
        fail(ErrorCode::kFormat, "patch DB '" + dir.string() + "': entry " + std::to_string(k) + " has the wrong size");
      }
      std::copy(img.values().begin(), img.values().end(), &db.images.at(static_cast<int>(k), 0, 0, 0));
      std::copy(mask.values().begin(), mask.values().end(), &db.masks.at(static_cast<int>(k), 0, 0, 0));
      db.origins.push_back({e.at("sample").get<std::string>(), e.at("y").get<int>(), e.at("x").get<int>()});
    }
    return db;
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, "patch DB '" + dir.string() + "': " + e.what());
  }
}

}  // namespace p2i
