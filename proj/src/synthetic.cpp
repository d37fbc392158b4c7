#include "p2i/synthetic.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "p2i/image_io.hpp"

namespace p2i {
namespace {

double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }
double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * unit(rng); }

}  // namespace

SyntheticImage synth_vessel_image(Size2 size, std::uint64_t seed, const SyntheticConfig& cfg) {
  const int H = size.h, W = size.w;
  if (H <= 0 || W <= 0) fail(ErrorCode::kInvalidArgument, "synthetic: image size must be positive");
  std::mt19937_64 rng(seed);

  // Background: illumination ramp plus a few low-frequency waves.
  std::vector<double> bg(static_cast<std::size_t>(H) * W);
  const double base = uniform(rng, 0.45, 0.6);
  const double gy = uniform(rng, -0.1, 0.1), gx = uniform(rng, -0.1, 0.1);
  struct Wave {
    double fy, fx, phase, amp;
  };
  std::vector<Wave> waves(4);
  for (Wave& w : waves) {
    w = {uniform(rng, 0.5, 4.0), uniform(rng, 0.5, 4.0), uniform(rng, 0.0, 2 * std::numbers::pi),
         uniform(rng, 0.01, 0.04)};
  }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double v = static_cast<double>(y) / H, u = static_cast<double>(x) / W;
      double b = base + gy * (v - 0.5) + gx * (u - 0.5);
      for (const Wave& w : waves) b += w.amp * std::sin(2 * std::numbers::pi * (w.fy * v + w.fx * u) + w.phase);
      bg[static_cast<std::size_t>(y) * W + x] = b;
    }

  // Vessels: per-pixel depth of the darkest covering curve and the
  // normalised distance to the nearest curve centre line.
  std::vector<double> dark(bg.size(), 0.0);
  std::vector<std::uint8_t> mask(bg.size(), 0);
  const int curves = cfg.min_curves + static_cast<int>(rng() % static_cast<std::uint64_t>(cfg.max_curves - cfg.min_curves + 1));
  for (int k = 0; k < curves; ++k) {
    double py[4], px[4];
    for (int i = 0; i < 4; ++i) {
      py[i] = uniform(rng, -0.1 * H, 1.1 * H);
      px[i] = uniform(rng, -0.1 * W, 1.1 * W);
    }
    const double r0 = uniform(rng, cfg.min_radius, cfg.max_radius);
    const double r1 = std::max(cfg.min_radius, r0 * uniform(rng, 0.5, 1.0));
    const double depth = uniform(rng, 0.12, 0.25);
    const int samples = 4 * (H + W);
    for (int s = 0; s <= samples; ++s) {
      const double t = static_cast<double>(s) / samples, m = 1.0 - t;
      const double cy = m * m * m * py[0] + 3 * m * m * t * py[1] + 3 * m * t * t * py[2] + t * t * t * py[3];
      const double cx = m * m * m * px[0] + 3 * m * m * t * px[1] + 3 * m * t * t * px[2] + t * t * t * px[3];
      const double r = r0 + (r1 - r0) * t;
      const int reach = static_cast<int>(std::ceil(2 * r)) + 1;
      const int ylo = std::max(0, static_cast<int>(cy) - reach), yhi = std::min(H - 1, static_cast<int>(cy) + reach);
      const int xlo = std::max(0, static_cast<int>(cx) - reach), xhi = std::min(W - 1, static_cast<int>(cx) + reach);
      for (int y = ylo; y <= yhi; ++y)
        for (int x = xlo; x <= xhi; ++x) {
          const double d = std::hypot(y - cy, x - cx) / r;
          const std::size_t i = static_cast<std::size_t>(y) * W + x;
          if (d <= 1.0) mask[i] = 1;
          // Full depth inside the vessel, fading out over one radius.
          const double a = d <= 1.0 ? 1.0 : std::max(0.0, 2.0 - d);
          dark[i] = std::max(dark[i], depth * a);
        }
    }
  }

  SyntheticImage out{Tensor(Shape{1, 3, H, W}), Tensor(Shape{1, 1, H, W})};
  std::normal_distribution<double> noise(0.0, 0.02);
  const double tint[3] = {uniform(rng, 0.75, 0.95), 1.0, uniform(rng, 0.35, 0.55)};
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * W + x;
      const double g = bg[i] - dark[i] + noise(rng);
      for (int c = 0; c < 3; ++c) out.rgb.at(0, c, y, x) = static_cast<float>(std::clamp(tint[c] * g, 0.0, 1.0));
      out.mask.at(0, 0, y, x) = mask[i];
    }
  return out;
}

DatasetManifest write_synthetic_dataset(const SyntheticConfig& cfg, const std::filesystem::path& dir) {
  if (cfg.count <= 0 || cfg.train < 0 || cfg.train > cfg.count) {
    fail(ErrorCode::kInvalidArgument, "synthetic: need 0 <= train <= count and count > 0");
  }
  if (cfg.size.h % 4 != 0 || cfg.size.w % 4 != 0) {
    fail(ErrorCode::kInvalidArgument, "synthetic: image extents must be multiples of 4");
  }
  DatasetManifest m;
  m.name = "synthetic-vessels";
  m.target = cfg.size;
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32)};
  std::vector<std::uint32_t> seeds(static_cast<std::size_t>(cfg.count) * 2);
  seq.generate(seeds.begin(), seeds.end());
  for (int i = 0; i < cfg.count; ++i) {
    char id[16];
    std::snprintf(id, sizeof(id), "%02d", i + 1);
    const std::uint64_t s = (static_cast<std::uint64_t>(seeds[2 * i]) << 32) | seeds[2 * i + 1];
    const SyntheticImage img = synth_vessel_image(cfg.size, s, cfg);
    const std::string image_rel = std::string("images/") + id + ".png";
    const std::string mask_rel = std::string("masks/") + id + ".png";
    write_image(dir / image_rel, img.rgb);
    write_image(dir / mask_rel, img.mask);
    m.entries.push_back({id, image_rel, mask_rel, std::nullopt, i < cfg.train ? Split::kTrain : Split::kTest});
  }
  save_manifest(m, dir / "manifest.json");
  for (ManifestEntry& e : m.entries) {
    e.image = dir / e.image;
    e.mask = dir / e.mask;
  }
  return m;
}

}  // namespace p2i
