#include "p2i/imaging.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace p2i {

Tensor to_grayscale(const Tensor& rgb) {
  if (rgb.c() != 3) {
    fail(ErrorCode::kShape, "to_grayscale: expected 3 channels, got " + std::to_string(rgb.c()));
  }
  Tensor out(Shape{rgb.n(), 1, rgb.h(), rgb.w()});
  const std::size_t hw = rgb.shape().plane();
  for (int n = 0; n < rgb.n(); ++n) {
    const float* r = rgb.plane(n, 0);
    const float* g = rgb.plane(n, 1);
    const float* b = rgb.plane(n, 2);
    float* o = out.plane(n, 0);
    for (std::size_t i = 0; i < hw; ++i) o[i] = 0.299f * r[i] + 0.587f * g[i] + 0.114f * b[i];
  }
  return out;
}

Tensor gamma_correct(const Tensor& img, double gamma, bool brighten) {
  if (!(gamma > 0.0)) fail(ErrorCode::kInvalidArgument, "gamma_correct: gamma must be positive");
  const double e = brighten ? 1.0 / gamma : gamma;
  Tensor out(img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = std::clamp(static_cast<double>(img.data()[i]), 0.0, 1.0);
    out.data()[i] = static_cast<float>(std::pow(v, e));
  }
  return out;
}

namespace {

// For each output coordinate along one axis: the two tiles whose centres
// bracket it and the weight of the first.
struct Blend {
  std::vector<int> a, b;
  std::vector<float> wa;
};

Blend tile_blend(int extent, int tiles) {
  std::vector<double> centre(tiles);
  for (int t = 0; t < tiles; ++t) {
    const int lo = static_cast<int>(static_cast<long>(t) * extent / tiles);
    const int hi = static_cast<int>(static_cast<long>(t + 1) * extent / tiles);
    centre[t] = 0.5 * (lo + hi - 1);
  }
  Blend bl;
  bl.a.resize(extent);
  bl.b.resize(extent);
  bl.wa.resize(extent);
  int t = 0;
  for (int i = 0; i < extent; ++i) {
    while (t + 1 < tiles && centre[t + 1] <= i) ++t;
    if (i <= centre[0]) {
      bl.a[i] = bl.b[i] = 0;
      bl.wa[i] = 1.0f;
    } else if (t + 1 >= tiles) {
      bl.a[i] = bl.b[i] = tiles - 1;
      bl.wa[i] = 1.0f;
    } else {
      bl.a[i] = t;
      bl.b[i] = t + 1;
      bl.wa[i] = static_cast<float>((centre[t + 1] - i) / (centre[t + 1] - centre[t]));
    }
  }
  return bl;
}

}  // namespace

Tensor clahe(const Tensor& img, const ClaheParams& p) {
  if (p.tiles_y <= 0 || p.tiles_x <= 0 || p.bins < 2) {
    fail(ErrorCode::kInvalidArgument, "clahe: tiles must be positive and bins at least 2");
  }
  const int H = img.h(), W = img.w(), B = p.bins;
  if (H < p.tiles_y || W < p.tiles_x) {
    fail(ErrorCode::kShape, "clahe: image " + std::to_string(H) + "x" + std::to_string(W) + " is smaller than one " +
                                "tile of a " + std::to_string(p.tiles_y) + "x" + std::to_string(p.tiles_x) + " grid");
  }
  const Blend by = tile_blend(H, p.tiles_y), bx = tile_blend(W, p.tiles_x);
  Tensor out(img.shape());
  std::vector<int> bin(static_cast<std::size_t>(H) * W);
  std::vector<float> lut(static_cast<std::size_t>(p.tiles_y) * p.tiles_x * B);

  for (int n = 0; n < img.n(); ++n) {
    for (int c = 0; c < img.c(); ++c) {
      const float* src = img.plane(n, c);
      for (std::size_t i = 0; i < bin.size(); ++i) {
        const double v = std::clamp(static_cast<double>(src[i]), 0.0, 1.0);
        bin[i] = static_cast<int>(std::lround(v * (B - 1)));
      }
      for (int ty = 0; ty < p.tiles_y; ++ty) {
        const int y0 = static_cast<int>(static_cast<long>(ty) * H / p.tiles_y);
        const int y1 = static_cast<int>(static_cast<long>(ty + 1) * H / p.tiles_y);
        for (int tx = 0; tx < p.tiles_x; ++tx) {
          const int x0 = static_cast<int>(static_cast<long>(tx) * W / p.tiles_x);
          const int x1 = static_cast<int>(static_cast<long>(tx + 1) * W / p.tiles_x);
          std::vector<double> hist(B, 0.0);
          for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) hist[bin[static_cast<std::size_t>(y) * W + x]] += 1.0;
          const double area = static_cast<double>(y1 - y0) * (x1 - x0);
          if (p.clip > 0.0) {
            const double limit = std::max(1.0, p.clip * area / B);
            double excess = 0.0;
            for (double& h : hist) {
              if (h > limit) {
                excess += h - limit;
                h = limit;
              }
            }
            for (double& h : hist) h += excess / B;
          }
          float* l = &lut[(static_cast<std::size_t>(ty) * p.tiles_x + tx) * B];
          double cdf = 0.0;
          for (int b = 0; b < B; ++b) {
            cdf += hist[b];
            l[b] = static_cast<float>(std::min(1.0, cdf / area));
          }
        }
      }
      float* dst = out.plane(n, c);
      for (int y = 0; y < H; ++y) {
        const float wy = by.wa[y];
        const float* la = &lut[static_cast<std::size_t>(by.a[y]) * p.tiles_x * B];
        const float* lb = &lut[static_cast<std::size_t>(by.b[y]) * p.tiles_x * B];
        for (int x = 0; x < W; ++x) {
          const int v = bin[static_cast<std::size_t>(y) * W + x];
          const float wx = bx.wa[x];
          const std::size_t ia = static_cast<std::size_t>(bx.a[x]) * B + v;
          const std::size_t ib = static_cast<std::size_t>(bx.b[x]) * B + v;
          const float top = la[ib] + wx * (la[ia] - la[ib]);
          const float bottom = lb[ib] + wx * (lb[ia] - lb[ib]);
          dst[static_cast<std::size_t>(y) * W + x] = std::clamp(bottom + wy * (top - bottom), 0.0f, 1.0f);
        }
      }
    }
  }
  return out;
}

Tensor resize_bilinear(const Tensor& img, Size2 target) {
  if (target.h <= 0 || target.w <= 0) {
    fail(ErrorCode::kInvalidArgument, "resize: target extents must be positive, got " + std::to_string(target.h) +
                                          "x" + std::to_string(target.w));
  }
  const int H = img.h(), W = img.w();
  if (H == target.h && W == target.w) return img;
  if (H <= 0 || W <= 0) fail(ErrorCode::kShape, "resize: empty source image");
  auto axis = [](int src, int dst, std::vector<int>& i0, std::vector<int>& i1, std::vector<float>& f) {
    i0.resize(dst);
    i1.resize(dst);
    f.resize(dst);
    const double scale = static_cast<double>(src) / dst;
    for (int i = 0; i < dst; ++i) {
      const double s = std::clamp((i + 0.5) * scale - 0.5, 0.0, static_cast<double>(src - 1));
      i0[i] = static_cast<int>(std::floor(s));
      i1[i] = std::min(i0[i] + 1, src - 1);
      f[i] = static_cast<float>(s - i0[i]);
    }
  };
  std::vector<int> y0, y1, x0, x1;
  std::vector<float> fy, fx;
  axis(H, target.h, y0, y1, fy);
  axis(W, target.w, x0, x1, fx);
  Tensor out(Shape{img.n(), img.c(), target.h, target.w});
  for (int n = 0; n < img.n(); ++n)
    for (int c = 0; c < img.c(); ++c) {
      const float* s = img.plane(n, c);
      float* d = out.plane(n, c);
      for (int y = 0; y < target.h; ++y) {
        const float* r0 = s + static_cast<std::size_t>(y0[y]) * W;
        const float* r1 = s + static_cast<std::size_t>(y1[y]) * W;
        for (int x = 0; x < target.w; ++x) {
          const float top = r0[x0[x]] + fx[x] * (r0[x1[x]] - r0[x0[x]]);
          const float bot = r1[x0[x]] + fx[x] * (r1[x1[x]] - r1[x0[x]]);
          d[static_cast<std::size_t>(y) * target.w + x] = top + fy[y] * (bot - top);
        }
      }
    }
  return out;
}

Tensor resize_mask(const Tensor& mask, Size2 target) {
  if (target.h <= 0 || target.w <= 0) {
    fail(ErrorCode::kInvalidArgument, "resize_mask: target extents must be positive");
  }
  const int H = mask.h(), W = mask.w();
  Tensor out(Shape{mask.n(), mask.c(), target.h, target.w});
  auto src_index = [](int i, int src, int dst) {
    return std::min(src - 1, static_cast<int>(std::floor((i + 0.5) * src / dst)));
  };
  for (int n = 0; n < mask.n(); ++n)
    for (int c = 0; c < mask.c(); ++c)
      for (int y = 0; y < target.h; ++y) {
        const int sy = src_index(y, H, target.h);
        for (int x = 0; x < target.w; ++x) {
          out.at(n, c, y, x) = mask.at(n, c, sy, src_index(x, W, target.w)) >= 0.5f ? 1.0f : 0.0f;
        }
      }
  return out;
}

Tensor binarize(const Tensor& t, float threshold) {
  Tensor out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out.data()[i] = t.data()[i] >= threshold ? 1.0f : 0.0f;
  return out;
}

Size2 round_up(Size2 s, int m) { return {(s.h + m - 1) / m * m, (s.w + m - 1) / m * m}; }

nlohmann::json preprocess_to_json(const PreprocessConfig& c) {
  return {{"grayscale", c.grayscale},
          {"gamma", c.gamma},
          {"gamma_mode", c.gamma_brighten ? "brighten" : "darken"},
          {"apply_gamma", c.apply_gamma},
          {"apply_clahe", c.apply_clahe},
          {"clahe_tiles", {c.clahe.tiles_y, c.clahe.tiles_x}},
          {"clahe_clip", c.clahe.clip},
          {"clahe_bins", c.clahe.bins}};
}

PreprocessConfig preprocess_from_json(const nlohmann::json& j) {
  PreprocessConfig c;
  try {
    c.grayscale = j.value("grayscale", c.grayscale);
    c.gamma = j.value("gamma", c.gamma);
    const std::string mode = j.value("gamma_mode", std::string("brighten"));
    if (mode != "brighten" && mode != "darken") {
      fail(ErrorCode::kFormat, "preprocess: gamma_mode must be 'brighten' or 'darken'");
    }
    c.gamma_brighten = mode == "brighten";
    c.apply_gamma = j.value("apply_gamma", c.apply_gamma);
    c.apply_clahe = j.value("apply_clahe", c.apply_clahe);
    if (j.contains("clahe_tiles")) {
      c.clahe.tiles_y = j.at("clahe_tiles").at(0).get<int>();
      c.clahe.tiles_x = j.at("clahe_tiles").at(1).get<int>();
    }
    c.clahe.clip = j.value("clahe_clip", c.clahe.clip);
    c.clahe.bins = j.value("clahe_bins", c.clahe.bins);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, std::string("preprocess settings: ") + e.what());
  }
  return c;
}

Tensor preprocess(const Tensor& image, const PreprocessConfig& config) {
  Tensor x = image;
  if (x.c() == 3) {
    if (!config.grayscale) {
      fail(ErrorCode::kInvalidArgument, "preprocess: colour input needs grayscale conversion enabled");
    }
    x = to_grayscale(x);
  } else if (x.c() != 1) {
    fail(ErrorCode::kShape, "preprocess: expected 1 or 3 channels, got " + std::to_string(x.c()));
  }
  if (config.apply_gamma) x = gamma_correct(x, config.gamma, config.gamma_brighten);
  if (config.apply_clahe) x = clahe(x, config.clahe);
  return x;
}

AugmentParams sample_augment(Size2 size, std::uint64_t seed, double max_shift) {
  std::mt19937_64 rng(seed);
  AugmentParams a;
  a.flip_h = (rng() >> 63) != 0;
  a.flip_v = (rng() >> 63) != 0;
  const int my = static_cast<int>(std::floor(max_shift * size.h));
  const int mx = static_cast<int>(std::floor(max_shift * size.w));
  a.shift_y = std::uniform_int_distribution<int>(-my, my)(rng);
  a.shift_x = std::uniform_int_distribution<int>(-mx, mx)(rng);
  return a;
}

Tensor apply_augment(const Tensor& t, const AugmentParams& a) {
  const int H = t.h(), W = t.w();
  Tensor out(t.shape());
  for (int n = 0; n < t.n(); ++n)
    for (int c = 0; c < t.c(); ++c)
      for (int y = 0; y < H; ++y) {
        const int sy = y - a.shift_y;
        if (sy < 0 || sy >= H) continue;
        const int fy = a.flip_v ? H - 1 - sy : sy;
        for (int x = 0; x < W; ++x) {
          const int sx = x - a.shift_x;
          if (sx < 0 || sx >= W) continue;
          out.at(n, c, y, x) = t.at(n, c, fy, a.flip_h ? W - 1 - sx : sx);
        }
      }
  return out;
}

}  // namespace p2i
