// Acceptance checks, one line per criterion:
//   [PASS] criterion N (name): details (seconds)
// Usage: p2i_acceptance [N ...]   runs the listed criteria, all by default.
// The exit status is 0 when every gating criterion passed; criterion 9 needs
// the DRIVE data (see README) and never affects the exit status.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "p2i/checkpoint.hpp"
#include "p2i/dataset.hpp"
#include "p2i/grad_check.hpp"
#include "p2i/metrics.hpp"
#include "p2i/ops.hpp"
#include "p2i/patching.hpp"
#include "p2i/reference_nets.hpp"
#include "p2i/synthetic.hpp"
#include "p2i/training.hpp"
#include "p2i/transfer.hpp"

using namespace p2i;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
  bool skipped = false;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

template <typename T>
BasicTensor<T> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  BasicTensor<T> t(s);
  for (T& v : t.values()) v = static_cast<T>(d(rng));
  return t;
}

double project(const TensorD& t, const TensorD& r) {
  double s = 0;
  for (std::size_t i = 0; i < t.size(); ++i) s += t.data()[i] * r.data()[i];
  return s;
}

std::vector<double> values(const TensorD& t) { return {t.values().begin(), t.values().end()}; }

TensorD from(Shape s, std::span<const double> v) { return TensorD(s, std::vector<double>(v.begin(), v.end())); }

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("p2i_acceptance_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// ---------------------------------------------------------------------------
// 1. Finite-difference gradients

Outcome gradient_suite() {
  constexpr int kCases = 20;
  constexpr double kOpTol = 1e-6, kGraphTol = 1e-5;
  std::mt19937_64 rng(1001);
  std::uniform_int_distribution<int> ext(1, 7), ch(1, 3), ker(0, 2);
  double worst_op = 0.0;
  std::string failure;
  auto record = [&](const char* op, int c, const GradCheckReport& r) {
    worst_op = std::max(worst_op, r.max_rel_error);
    if (!r.passed && failure.empty()) failure = fmt("%s case %d rel err %.3g", op, c, r.max_rel_error);
  };

  for (int c = 0; c < kCases; ++c) {
    // Convolution: input and parameter gradients.
    const int kh = 2 * ker(rng) + 1, kw = 2 * ker(rng) + 1, out = ch(rng);
    const Shape s{1 + c % 2, ch(rng), ext(rng), ext(rng)};
    const TensorD x = random_tensor<double>(s, rng);
    LayerParams<double> p(out, s.c, kh, kw);
    for (double& v : p.kernels) v = std::uniform_real_distribution<double>(-1, 1)(rng);
    for (double& v : p.biases) v = std::uniform_real_distribution<double>(-1, 1)(rng);
    const TensorD r = random_tensor<double>({s.n, out, s.h, s.w}, rng);
    const ConvGrads<double> g = conv2d_backward(x, p, r);
    record("conv input", c,
           grad_check([&](std::span<const double> v) { return project(conv2d_forward(from(s, v), p), r); }, values(x),
                      values(g.input), kOpTol));
    std::vector<double> theta(p.kernels), analytic(g.params.kernels);
    theta.insert(theta.end(), p.biases.begin(), p.biases.end());
    analytic.insert(analytic.end(), g.params.biases.begin(), g.params.biases.end());
    record("conv params", c,
           grad_check(
               [&](std::span<const double> v) {
                 LayerParams<double> q = p;
                 std::copy(v.begin(), v.begin() + static_cast<long>(q.kernels.size()), q.kernels.begin());
                 std::copy(v.begin() + static_cast<long>(q.kernels.size()), v.end(), q.biases.begin());
                 return project(conv2d_forward(x, q), r);
               },
               theta, analytic, kOpTol));

    // Element-wise and resampling ops on even extents.
    const Shape e{1 + c % 2, 1 + c % 3, 2 * (1 + c % 3), 2 * (1 + (c / 3) % 3)};
    TensorD z = random_tensor<double>(e, rng, -3, 3);
    for (double& v : z.values()) v += v < 0 ? -0.1 : 0.1;  // keep ReLU inputs away from the kink
    const TensorD re = random_tensor<double>(e, rng);
    record("relu", c,
           grad_check([&](std::span<const double> v) { return project(relu(from(e, v)), re); }, values(z),
                      values(relu_backward(z, re)), kOpTol));
    record("sigmoid", c,
           grad_check([&](std::span<const double> v) { return project(sigmoid(from(e, v)), re); }, values(z),
                      values(sigmoid_backward(sigmoid(z), re)), kOpTol));
    const TensorD ru = random_tensor<double>({e.n, e.c, 2 * e.h, 2 * e.w}, rng);
    record("upsample2", c,
           grad_check([&](std::span<const double> v) { return project(upsample2(from(e, v)), ru); }, values(z),
                      values(upsample2_backward(ru)), kOpTol));

    // Max-pool on well-separated distinct values so no probe changes a winner.
    TensorD m(e);
    std::vector<double> levels(m.size());
    for (std::size_t i = 0; i < levels.size(); ++i) levels[i] = 0.01 * static_cast<double>(i);
    std::shuffle(levels.begin(), levels.end(), rng);
    std::copy(levels.begin(), levels.end(), m.values().begin());
    const PoolResult<double> pr = maxpool2(m);
    const TensorD rp = random_tensor<double>(pr.output.shape(), rng);
    record("maxpool2", c,
           grad_check([&](std::span<const double> v) { return project(maxpool2(from(e, v)).output, rp); }, values(m),
                      values(maxpool2_backward(e, pr.argmax, rp)), kOpTol));

    // Channel concatenation with respect to both operands.
    const Shape sb{e.n, 1 + c % 2, e.h, e.w};
    const TensorD b = random_tensor<double>(sb, rng);
    const TensorD rc = random_tensor<double>({e.n, e.c + sb.c, e.h, e.w}, rng);
    const auto [ga, gb] = concat_backward(rc, e.c);
    record("concat a", c,
           grad_check([&](std::span<const double> v) { return project(concat_channels(from(e, v), b), rc); },
                      values(z), values(ga), kOpTol));
    record("concat b", c,
           grad_check([&](std::span<const double> v) { return project(concat_channels(z, from(sb, v)), rc); },
                      values(b), values(gb), kOpTol));
  }

  // Whole Light network. Each case probes every fourth parameter, so the 20
  // cases cover every parameter five times.
  const NetworkSpec light = build_reference(Family::kLight);
  double worst_graph = 0.0;
  std::size_t checked = 0, skipped = 0;
  for (int c = 0; c < kCases; ++c) {
    std::mt19937_64 r(2000 + static_cast<std::uint64_t>(c));
    ParameterSet<double> params = params_cast<double>(init_params(light, 100 + static_cast<std::uint64_t>(c)));
    for (auto& [id, lp] : params.layers)
      for (double& v : lp.biases) v = std::uniform_real_distribution<double>(-0.1, 0.1)(r);
    const TensorD x = random_tensor<double>({1, 1, 8, 8}, r, 0, 1);
    const TensorD proj = random_tensor<double>({1, 1, 8, 8}, r);
    const GradCheckReport rep = network_grad_check(light, params, x, proj, kGraphTol, 1e-5, 4, static_cast<std::size_t>(c % 4));
    worst_graph = std::max(worst_graph, rep.max_rel_error);
    checked += rep.checked;
    skipped += rep.skipped;
    if (!rep.passed && failure.empty()) failure = fmt("Light case %d rel err %.3g", c, rep.max_rel_error);
  }
  Outcome o;
  o.pass = failure.empty();
  o.detail = fmt("%d cases each for conv, relu, sigmoid, maxpool2, upsample2, concat: max rel err %.2e (< %.0e); "
                 "Light graph %d cases, %zu probes (%zu skipped at kinks): max rel err %.2e (< %.0e)",
                 kCases, worst_op, kOpTol, kCases, checked, skipped, worst_graph, kGraphTol);
  if (!o.pass) o.detail += "; first failure: " + failure;
  return o;
}

// ---------------------------------------------------------------------------
// 2. merge(extract(x)) == x

using Mat = std::vector<std::vector<double>>;

Mat matmul(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

Mat transpose(const Mat& a) {
  Mat t(a[0].size(), std::vector<double>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) t[j][i] = a[i][j];
  return t;
}

// The 6x6 image with 2x2 patches: patch (r, s) is A_r X A_s^T with
// A_k = [I_2 0] J^(2k) built from the nilpotent Jordan block J, and
// sum of A_r^T P_rs A_s over all (r, s) rebuilds X.
bool jordan_case(std::mt19937_64& rng) {
  const Tensor img = random_tensor<float>({1, 1, 6, 6}, rng);
  Mat X(6, std::vector<double>(6));
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) X[y][x] = img.at(0, 0, y, x);
  Mat J(6, std::vector<double>(6, 0.0));
  for (int i = 0; i + 1 < 6; ++i) J[i][i + 1] = 1.0;
  const Mat J2 = matmul(J, J);
  std::vector<Mat> A{{{1, 0, 0, 0, 0, 0}, {0, 1, 0, 0, 0, 0}}};
  for (int k = 1; k < 3; ++k) A.push_back(matmul(A.back(), J2));
  const PatchPlan plan = plan_grid({6, 6}, 2, 2);
  const std::vector<Tensor> patches = extract(img, plan);
  Mat recon(6, std::vector<double>(6, 0.0));
  for (int r = 0; r < 3; ++r)
    for (int s = 0; s < 3; ++s) {
      const Mat block = matmul(matmul(A[r], X), transpose(A[s]));
      const Tensor& patch = patches[static_cast<std::size_t>(r * 3 + s)];
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
          if (patch.at(0, 0, i, j) != block[i][j]) return false;
      const Mat placed = matmul(matmul(transpose(A[r]), block), A[s]);
      for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) recon[i][j] += placed[i][j];
    }
  return recon == X && merge(patches, plan) == img;
}

Outcome patch_identity() {
  std::mt19937_64 rng(2002);
  std::size_t exhaustive = 0, failures = 0;
  std::string first;
  for (int h = 1; h <= 12; ++h)
    for (int w = 1; w <= 12; ++w) {
      const Tensor img = random_tensor<float>({1, 1 + (h + w) % 2, h, w}, rng);
      for (int p = 1; p <= std::min({4, h, w}); ++p)
        for (int s = 1; s <= p; ++s, ++exhaustive) {
          const PatchPlan plan = plan_grid({h, w}, p, s);
          if (merge(extract(img, plan), plan) != img && failures++ == 0) first = fmt("%dx%d p=%d s=%d", h, w, p, s);
        }
    }

  std::uniform_int_distribution<int> side(13, 300);
  for (int k = 0; k < 100; ++k) {
    const int h = side(rng), w = side(rng);
    const int p = std::uniform_int_distribution<int>(1, std::min({64, h, w}))(rng);
    const int s = std::uniform_int_distribution<int>(1, p)(rng);
    PatchPlan plan = plan_grid({h, w}, p, s);
    if (k % 2 == 1) {
      // Extra windows at random positions: overlaps of every multiplicity.
      const int extra = std::uniform_int_distribution<int>(1, 20)(rng);
      for (int e = 0; e < extra; ++e) {
        plan.offsets.push_back({std::uniform_int_distribution<int>(0, h - p)(rng),
                                std::uniform_int_distribution<int>(0, w - p)(rng)});
      }
    }
    const Tensor img = random_tensor<float>({1, 1 + k % 3, h, w}, rng, -100, 100);
    if (merge(extract(img, plan), plan) != img && failures++ == 0) first = fmt("random %dx%d p=%d s=%d", h, w, p, s);
  }
  const bool jordan = jordan_case(rng);
  Outcome o;
  o.pass = failures == 0 && jordan;
  o.detail = fmt("%zu exhaustive plans (images up to 12x12, p <= 4, every stride 1..p) and 100 random plans "
                 "(50 with extra overlapping windows) reconstruct bitwise; 6x6/2x2 Jordan construction %s",
                 exhaustive, jordan ? "matches" : "FAILS");
  if (failures) o.detail += fmt("; %zu failures, first %s", failures, first.c_str());
  return o;
}

// ---------------------------------------------------------------------------
// 3. Receptive-field consistency

Outcome receptive_field() {
  const NetworkSpec spec = build_reference(Family::kLight);
  const int r = receptive_radius(spec);
  std::mt19937_64 rng(2003);
  double worst = 0.0;
  std::size_t compared = 0, patches = 0;
  for (int k = 0; k < 50; ++k) {
    const ParameterSet<float> params = init_params(spec, 300 + static_cast<std::uint64_t>(k));
    // Sizes, patch sides and strides on the 4-pixel pooling lattice, so every
    // window is aligned with the whole image's pooling grid.
    const int P = 4 * std::uniform_int_distribution<int>(17, 24)(rng);
    const int h = 4 * std::uniform_int_distribution<int>(P / 4, 40)(rng);
    const int w = 4 * std::uniform_int_distribution<int>(P / 4, 40)(rng);
    const int s = 4 * std::uniform_int_distribution<int>(1, P / 4)(rng);
    const Tensor img = random_tensor<float>({1, 1, h, w}, rng, 0, 1);
    const Tensor whole = forward(spec, params, img, false).output;
    const PatchPlan plan = plan_grid({h, w}, P, s);
    const Tensor batch = extract_batch(img, plan, 0, plan.size());
    const Tensor out = forward(spec, params, batch, false).output;
    for (std::size_t q = 0; q < plan.size(); ++q, ++patches) {
      const PatchOffset o = plan.offsets[q];
      for (int y = r; y < P - r; ++y)
        for (int x = r; x < P - r; ++x, ++compared) {
          const double d = std::abs(static_cast<double>(out.at(static_cast<int>(q), 0, y, x)) -
                                    whole.at(0, 0, o.y + y, o.x + x));
          worst = std::max(worst, d);
        }
    }
  }
  Outcome o;
  o.pass = worst <= 1e-6 && compared > 0;
  o.detail = fmt("Light (receptive radius %d): 50 random images/plans, %zu patches, %zu interior pixels, "
                 "max |patch - whole| = %.3g (<= 1e-6)",
                 r, patches, compared, worst);
  return o;
}

// ---------------------------------------------------------------------------
// 4. Phase-3 transfer is a no-op

Outcome phase3_noop() {
  const NetworkSpec spec = build_reference(Family::kLight);
  const fs::path dir = scratch_dir("phase3");
  std::mt19937_64 rng(2004);
  const ParameterSet<float> fp = init_params(spec, 4);
  save_checkpoint(dir / "patch.ckpt", spec, fp);
  const ParameterSet<float> fi = phase3_transfer(load_checkpoint(dir / "patch.ckpt"), spec);
  const Size2 sizes[] = {{64, 64}, {128, 96}, {256, 256}};
  int identical = 0;
  for (int k = 0; k < 20; ++k) {
    const Size2 sz = sizes[k % 3];
    const Tensor x = random_tensor<float>({1, 1, sz.h, sz.w}, rng, 0, 1);
    if (forward(spec, fi, x, false).output == forward(spec, fp, x, false).output) ++identical;
  }
  const bool same_hash = checkpoint_hash(spec, fi) == checkpoint_hash(spec, fp);
  Outcome o;
  o.pass = identical == 20 && same_hash;
  o.detail = fmt("%d/20 inputs (64x64, 128x96, 256x256) give bitwise-identical outputs; checkpoint hash %s", identical,
                 same_hash ? "unchanged" : "CHANGED");
  return o;
}

// ---------------------------------------------------------------------------
// 5. Loss and metric oracles

double pairwise_auc(const std::vector<double>& s, const std::vector<std::uint8_t>& l) {
  double num = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!l[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (l[j]) continue;
      pairs += 1;
      num += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  }
  return num / pairs;
}

Outcome loss_metric_oracles() {
  std::string failure;
  double worst_loss = 0;
  auto loss_case = [&](std::vector<double> y, std::vector<double> p, double expect) {
    const int n = static_cast<int>(y.size());
    const double got = combined_loss(TensorD(Shape{1, 1, 1, n}, std::move(y)), TensorD(Shape{1, 1, 1, n}, std::move(p)),
                                     false)
                           .loss;
    worst_loss = std::max(worst_loss, std::abs(got - expect));
  };
  for (int n : {1, 7, 100}) loss_case(std::vector<double>(n, 1.0), std::vector<double>(n, 1.0), -1.0);
  loss_case({1, 0}, {0.5, 0.5}, -2.0 * std::log(0.5) - 0.5);
  loss_case({1}, {0.25}, -std::log(0.25) - 0.4);
  loss_case({1, 0, 1, 0}, {0.9, 0.2, 0.6, 0.1},
            -(std::log(0.9) + std::log(0.8) + std::log(0.6) + std::log(0.9)) - 2.0 * 1.5 / (2.0 + 1.8));
  if (worst_loss > 1e-9) failure = fmt("combined_loss off by %.3g", worst_loss);

  std::mt19937_64 rng(2005);
  double worst_auc = 0;
  for (int k = 0; k < 200; ++k) {
    const int n = std::uniform_int_distribution<int>(2, 1000)(rng);
    std::vector<double> s(static_cast<std::size_t>(n));
    std::vector<std::uint8_t> l(static_cast<std::size_t>(n));
    std::uniform_real_distribution<double> u(0, 1);
    for (int i = 0; i < n; ++i) {
      s[i] = k % 3 == 0 ? std::round(u(rng) * 10) / 10 : u(rng);  // every third set has heavy ties
      l[i] = u(rng) < 0.3 ? 1 : 0;
    }
    l[0] = 1;
    l[1] = 0;
    worst_auc = std::max(worst_auc, std::abs(auc_roc(std::span<const double>(s), l) - pairwise_auc(s, l)));
  }
  if (worst_auc > 1e-9 && failure.empty()) failure = fmt("AUC off by %.3g", worst_auc);

  // Jaccard/Dice identity on every report: random maps and real network outputs.
  double worst_j = 0;
  std::size_t reports = 0;
  auto check_report = [&](const MetricsReport& r) {
    auto one = [&](const OverlapMetrics& m) {
      worst_j = std::max(worst_j, std::abs(m.jaccard - m.dice / (2.0 - m.dice)));
      ++reports;
    };
    one(r.overlap);
    for (const ImageMetrics& im : r.per_image) one(im.overlap);
  };
  for (int k = 0; k < 100; ++k) {
    MetricsAccumulator acc;
    const int images = 1 + k % 4;
    for (int i = 0; i < images; ++i) {
      const int h = std::uniform_int_distribution<int>(1, 40)(rng), w = std::uniform_int_distribution<int>(1, 40)(rng);
      Tensor prob = random_tensor<float>({1, 1, h, w}, rng, 0, 1);
      Tensor mask = random_tensor<float>({1, 1, h, w}, rng, 0, 1);
      const double fg = k % 10 == 0 ? 0.0 : std::uniform_real_distribution<double>(0, 1)(rng);
      for (float& v : mask.values()) v = v < fg ? 1.0f : 0.0f;
      if (k % 7 == 0) prob = Tensor(prob.shape());  // empty prediction
      acc.add(std::to_string(i), prob, mask);
    }
    check_report(acc.finish());
  }
  const NetworkSpec light = build_reference(Family::kLight);
  Dataset ds;
  for (int i = 0; i < 4; ++i) {
    const SyntheticImage im = synth_vessel_image({64, 64}, 500 + static_cast<std::uint64_t>(i));
    ImageSample s;
    s.id = std::to_string(i);
    s.image = to_grayscale(im.rgb);
    s.mask = s.original_mask = im.mask;
    s.original_size = {64, 64};
    ds.samples.push_back(s);
  }
  std::vector<const ImageSample*> all;
  for (const ImageSample& s : ds.samples) all.push_back(&s);
  for (int seed = 0; seed < 5; ++seed) {
    check_report(evaluate_samples(light, init_params(light, 600 + static_cast<std::uint64_t>(seed)), all, {}).report);
  }
  if (worst_j > 1e-12 && failure.empty()) failure = fmt("J vs D/(2-D) off by %.3g", worst_j);

  Outcome o;
  o.pass = failure.empty();
  o.detail = fmt("combined_loss max err %.2e on 6 hand-evaluated cases (<= 1e-9); AUC vs pairwise estimator max err "
                 "%.2e on 200 sets, n <= 1000 (<= 1e-9); |J - D/(2-D)| max %.2e over %zu reports (<= 1e-12)",
                 worst_loss, worst_auc, worst_j, reports);
  if (!o.pass) o.detail += "; " + failure;
  return o;
}

// ---------------------------------------------------------------------------
// 6. Scheduler and stopper

Outcome schedules() {
  // Decay by 0.2 from 1.0 reaches 6.4e-5, then 1.28e-5 (still above the
  // floor), then the floor. The eight stated values appear in order with
  // 1.28e-5 between the last two.
  PlateauScheduler sched;
  double lr = sched.step(1.0, 1.0);
  std::vector<double> seen{lr};
  for (int epoch = 0; epoch < 100; ++epoch) {
    const double next = sched.step(1.0, lr);
    if (next != lr) seen.push_back(next);
    lr = next;
  }
  const std::vector<double> expect{1.0, 0.2, 0.04, 0.008, 0.0016, 0.00032, 0.000064, 0.0000128, 1e-5};
  bool seq_ok = seen.size() == expect.size() && seen.back() == 1e-5;
  for (std::size_t i = 0; seq_ok && i < expect.size(); ++i) seq_ok = std::abs(seen[i] - expect[i]) <= 1e-15 * expect[i];

  int cases = 0, early_ok = 0;
  for (int patience : {1, 5, 30})
    for (int best : {1, 2, 7, 20, 45}) {
      ++cases;
      EarlyStopper stop(patience);
      int fired = -1;
      for (int epoch = 1; epoch <= best + patience + 5; ++epoch) {
        const double val = epoch <= best ? 10.0 - epoch : 10.0 - best + 0.5 * std::sin(epoch);
        if (stop.update(epoch, std::max(val, 10.0 - best))) {
          fired = epoch;
          break;
        }
      }
      if (fired == best + patience && stop.best_epoch() == best) ++early_ok;
    }
  Outcome o;
  o.pass = seq_ok && early_ok == cases;
  std::ostringstream s;
  for (std::size_t i = 0; i < seen.size(); ++i) s << (i ? " -> " : "") << seen[i];
  o.detail = "plateau under stagnant validation: " + s.str() + (seq_ok ? " (as expected)" : " (UNEXPECTED)") +
             fmt("; early stop fired at best epoch + patience in %d/%d cases", early_ok, cases);
  return o;
}

// ---------------------------------------------------------------------------
// 7. Synthetic end-to-end

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Outcome synthetic_end_to_end() {
  const fs::path dir = scratch_dir("synthetic");
  SyntheticConfig sc;  // 30 images at 256x256, 20 train / 10 test
  const DatasetManifest m = write_synthetic_dataset(sc, dir / "raw");
  prepare_dataset(m, dir / "prepared");
  const Dataset ds = load_prepared(dir / "prepared");

  RegimeOptions o;
  o.patch_config.max_epochs = 10;
  o.image_config.max_epochs = 40;
  o.out_dir = dir / "run";
  int epochs = 0;
  o.on_epoch = [&](std::string_view, const EpochRecord&) { ++epochs; };
  const RegimeComparison cmp = run_regimes(ds, build_reference(Family::kLight), o);

  const double patch = cmp.row(Regime::kPatch).eval.report.overlap.dice;
  const double frozen = cmp.row(Regime::kImageFrozen).eval.report.overlap.dice;
  const double tuned = cmp.row(Regime::kImageFinetuned).eval.report.overlap.dice;
  const double scratch = cmp.row(Regime::kImageScratch).eval.report.overlap.dice;
  std::vector<double> gains;
  const auto& fr = cmp.row(Regime::kImageFrozen).eval.report.per_image;
  const auto& ft = cmp.row(Regime::kImageFinetuned).eval.report.per_image;
  for (std::size_t i = 0; i < ft.size(); ++i) gains.push_back(ft[i].overlap.dice - fr[i].overlap.dice);
  const double med = median(gains);

  const bool a = std::abs(frozen - patch) <= 0.03;
  const bool b = tuned >= frozen - 0.01 && med > 0.0;
  const bool c = tuned >= scratch;
  Outcome out;
  out.pass = a && b && c;
  out.detail = fmt("Dice patch %.4f, frozen %.4f, fine-tuned %.4f, scratch %.4f; (a) |frozen-patch| = %.4f %s; "
                   "(b) fine-tuned - frozen = %+.4f, median per-image gain %+.4f %s; (c) fine-tuned - scratch = %+.4f "
                   "%s; epoch caps 10 patch / 40 image, %d epochs recorded",
                   patch, frozen, tuned, scratch, std::abs(frozen - patch), a ? "ok" : "FAIL", tuned - frozen, med,
                   b ? "ok" : "FAIL", tuned - scratch, c ? "ok" : "FAIL", epochs);
  return out;
}

// ---------------------------------------------------------------------------
// 8. Timing ordering

Outcome timing() {
  const Tensor image = preprocess(synth_vessel_image({256, 256}, 7).rgb, {});
  Outcome o;
  o.pass = true;
  std::string rows;
  for (Family f : {Family::kLight, Family::kMiniUnet, Family::kDense}) {
    const NetworkSpec spec = build_reference(f);
    const ParameterSet<float> params = init_params(spec, 8);
    const SegmentTiming t = time_segmentation(spec, params, image, 64, 16, 32, f == Family::kLight ? 5 : 3);
    o.pass = o.pass && t.speedup() >= 10.0;
    rows += fmt("%s%s %.3f s vs %.3f s (%.1fx)", rows.empty() ? "" : "; ", std::string(family_name(f)).c_str(),
                t.whole_seconds, t.patch_seconds, t.speedup());
  }
  o.detail = "256x256, whole image vs " + std::to_string(plan_grid({256, 256}, 64, 16).size()) +
             " stride-16 patches, min of interleaved runs: " + rows + " (each >= 10x)";
  return o;
}

// ---------------------------------------------------------------------------
// 9. DRIVE (optional)

Outcome drive() {
  const char* env = std::getenv("P2I_DRIVE_MANIFEST");
  Outcome o;
  if (!env || !fs::exists(env)) {
    o.skipped = true;
    o.detail = "set P2I_DRIVE_MANIFEST to a DRIVE dataset manifest to run (see README)";
    return o;
  }
  const fs::path dir = scratch_dir("drive");
  prepare_dataset(load_manifest(env), dir / "prepared");
  const Dataset ds = load_prepared(dir / "prepared");
  RegimeOptions opt;
  if (const char* cap = std::getenv("P2I_DRIVE_PATCH_EPOCHS")) opt.patch_config.max_epochs = std::atoi(cap);
  if (const char* cap = std::getenv("P2I_DRIVE_IMAGE_EPOCHS")) opt.image_config.max_epochs = std::atoi(cap);
  opt.out_dir = dir / "run";
  opt.on_epoch = [](std::string_view label, const EpochRecord& r) {
    std::fprintf(stderr, "  [%s] epoch %d val %.4f\n", std::string(label).c_str(), r.epoch, r.val_loss);
  };
  const RegimeComparison cmp = run_regimes(ds, build_reference(Family::kLight), opt);
  const OverlapMetrics& m = cmp.row(Regime::kImageFinetuned).eval.report.overlap;
  o.pass = m.acc >= 0.95 && m.dice >= 0.74;
  o.detail = fmt("Light fine-tuned on %zu test images: Acc %.4f (>= 0.95), Dice %.4f (>= 0.74)",
                 cmp.row(Regime::kImageFinetuned).eval.report.per_image.size(), m.acc, m.dice);
  return o;
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
  bool gating = true;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "gradient suite", gradient_suite},
      {2, "patch decomposition identity", patch_identity},
      {3, "receptive-field consistency", receptive_field},
      {4, "phase-3 no-op", phase3_noop},
      {5, "loss/metric oracles", loss_metric_oracles},
      {6, "scheduler/stopper", schedules},
      {7, "synthetic end-to-end", synthetic_end_to_end},
      {8, "timing ordering", timing},
      {9, "DRIVE smoke run (optional)", drive, false},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  bool ok = true;
  for (const Criterion& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("error: ") + e.what();
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const char* tag = o.skipped ? "SKIP" : o.pass ? "PASS" : "FAIL";
    std::printf("[%s] criterion %d (%s): %s (%.1f s)\n", tag, c.id, c.name, o.detail.c_str(), s);
    std::fflush(stdout);
    if (c.gating && !o.pass) ok = false;
  }
  return ok ? 0 : 1;
}
