#include "p2i/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "p2i/parallel.hpp"

namespace p2i {
namespace {

constexpr int kRowBlock = 16;
constexpr std::size_t kStripTiles = 4;

// Row dot product with eight independent lanes combined in a fixed order, so
// the result does not depend on compiler vectorisation choices.
template <typename T>
T dot(const T* a, const T* b, int n) {
  T lanes[8] = {};
  int x = 0;
  for (; x + 8 <= n; x += 8) {
    for (int l = 0; l < 8; ++l) lanes[l] += a[x + l] * b[x + l];
  }
  for (; x < n; ++x) lanes[x & 7] += a[x] * b[x];
  return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
}

template <typename T>
T sum(const T* a, int n) {
  T lanes[8] = {};
  int x = 0;
  for (; x + 8 <= n; x += 8) {
    for (int l = 0; l < 8; ++l) lanes[l] += a[x + l];
  }
  for (; x < n; ++x) lanes[x & 7] += a[x];
  return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
}

template <typename T>
void check_conv(const BasicTensor<T>& input, const LayerParams<T>& p) {
  p.validate();
  if (input.c() != p.in_channels) {
    fail(ErrorCode::kShape, "conv2d: input channel dimension is " + std::to_string(input.c()) +
                                " but kernels expect " + std::to_string(p.in_channels));
  }
  if (p.kernel_h % 2 == 0 || p.kernel_w % 2 == 0) {
    fail(ErrorCode::kShape, "conv2d: kernel extents must be odd, got " + std::to_string(p.kernel_h) +
                                "x" + std::to_string(p.kernel_w));
  }
}

void check_same(const Shape& a, const Shape& b, const char* what) {
  if (a == b) return;
  const char* dim = a.n != b.n ? "batch" : a.c != b.c ? "channel" : a.h != b.h ? "height" : "width";
  fail(ErrorCode::kShape, std::string(what) + ": " + dim + " dimension mismatch, " + to_string(a) +
                              " vs " + to_string(b));
}

}  // namespace

std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.n) + "," + std::to_string(s.c) + "," + std::to_string(s.h) + "," +
         std::to_string(s.w) + ")";
}

template <typename T>
BasicTensor<T> stack_batch(std::span<const BasicTensor<T>> items) {
  if (items.empty()) return BasicTensor<T>(Shape{0, 0, 0, 0});
  Shape s = items.front().shape();
  std::vector<T> data;
  data.reserve(s.numel() * items.size());
  for (const auto& t : items) {
    if (t.c() != s.c || t.h() != s.h || t.w() != s.w) {
      fail(ErrorCode::kShape, "stack_batch: item shape " + to_string(t.shape()) +
                                  " differs from " + to_string(s));
    }
    data.insert(data.end(), t.values().begin(), t.values().end());
  }
  int total = 0;
  for (const auto& t : items) total += t.n();
  return BasicTensor<T>(Shape{total, s.c, s.h, s.w}, std::move(data));
}

template <typename T>
void LayerParams<T>::validate() const {
  if (out_channels <= 0 || in_channels <= 0 || kernel_h <= 0 || kernel_w <= 0) {
    fail(ErrorCode::kShape, "layer params: non-positive extent");
  }
  if (kernels.size() != static_cast<std::size_t>(out_channels) * in_channels * kernel_h * kernel_w) {
    fail(ErrorCode::kShape, "layer params: kernel count does not match declared output channels");
  }
  if (biases.size() != static_cast<std::size_t>(out_channels)) {
    fail(ErrorCode::kShape, "layer params: bias count does not match declared output channels");
  }
}

// Shared "same" correlation kernel. Computes, for output channels [k0, k0+KG)
// and rows [y0, y1) of one batch item:
//   out[k][y][x] = bias[k] + sum_c sum_dy sum_dx w[k][c][dy][dx] * in[c][y+dy-rh][x+dx-rw]
// with the sum taken in exactly that order for every element. The input is a
// zero-padded copy, so border terms contribute an exact +0 and every column
// follows the same code path. Column tiles keep KG x kTile accumulators in
// registers.
constexpr int kTile = 16;
constexpr int kKg = 4;

template <typename T>
struct CorrArgs {
  const T* in;  // C padded planes of (H + 2rh) x (W + 2rw), `plane` elements apart
  std::size_t plane;
  int C, H, W;
  const T* w;     // [K][C][kh][kw]
  const T* bias;  // K values or nullptr for zero
  int kh, kw;
  T* out;  // K planes of H x W
};

typedef float Vec8f __attribute__((vector_size(32)));
typedef double Vec4d __attribute__((vector_size(32)));

template <typename T>
struct VecOf;
template <>
struct VecOf<float> {
  using type = Vec8f;
};
template <>
struct VecOf<double> {
  using type = Vec4d;
};
template <typename T>
using Vec = typename VecOf<T>::type;

template <typename T>
inline Vec<T> load_vec(const T* p) {
  Vec<T> v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

template <typename T, int KG, int TW>
inline void corr_tile(const CorrArgs<T>& a, int k0, int y, int x) {
  constexpr int L = static_cast<int>(sizeof(Vec<T>) / sizeof(T));
  constexpr bool vectorised = TW % L == 0;
  constexpr int NV = vectorised ? TW / L : 1;
  const int C = a.C, kh = a.kh, kw = a.kw;
  const int pw = a.W + kw - 1;
  const std::size_t phw = a.plane;
  const std::size_t wstride = static_cast<std::size_t>(C) * kh * kw;
  const T* wbase = a.w + static_cast<std::size_t>(k0) * wstride;
  const std::size_t hw = static_cast<std::size_t>(a.H) * a.W;

  if constexpr (vectorised) {
    Vec<T> acc[KG][NV];
    for (int kk = 0; kk < KG; ++kk) {
      const T b = a.bias ? a.bias[k0 + kk] : T(0);
      for (int v = 0; v < NV; ++v) acc[kk][v] = Vec<T>{} + b;
    }
    for (int c = 0; c < C; ++c) {
      const T* ip = a.in + c * phw;
      for (int dy = 0; dy < kh; ++dy) {
        const T* src = ip + static_cast<std::size_t>(y + dy) * pw + x;
        const T* wrow = wbase + (static_cast<std::size_t>(c) * kh + dy) * kw;
        for (int dx = 0; dx < kw; ++dx) {
          Vec<T> in[NV];
          for (int v = 0; v < NV; ++v) in[v] = load_vec(src + dx + v * L);
          for (int kk = 0; kk < KG; ++kk) {
            const T wv = wrow[kk * wstride + dx];
            for (int v = 0; v < NV; ++v) acc[kk][v] += wv * in[v];
          }
        }
      }
    }
    for (int kk = 0; kk < KG; ++kk) {
      T* o = a.out + (k0 + kk) * hw + static_cast<std::size_t>(y) * a.W + x;
      std::memcpy(o, acc[kk], sizeof(acc[kk]));
    }
  } else {
    T acc[KG][TW];
    for (int kk = 0; kk < KG; ++kk) {
      const T b = a.bias ? a.bias[k0 + kk] : T(0);
      for (int v = 0; v < TW; ++v) acc[kk][v] = b;
    }
    for (int c = 0; c < C; ++c) {
      const T* ip = a.in + c * phw;
      for (int dy = 0; dy < kh; ++dy) {
        const T* src = ip + static_cast<std::size_t>(y + dy) * pw + x;
        const T* wrow = wbase + (static_cast<std::size_t>(c) * kh + dy) * kw;
        for (int dx = 0; dx < kw; ++dx)
          for (int kk = 0; kk < KG; ++kk)
            for (int v = 0; v < TW; ++v) acc[kk][v] += wrow[kk * wstride + dx] * src[dx + v];
      }
    }
    for (int kk = 0; kk < KG; ++kk) {
      T* o = a.out + (k0 + kk) * hw + static_cast<std::size_t>(y) * a.W + x;
      for (int v = 0; v < TW; ++v) o[v] = acc[kk][v];
    }
  }
}

template <typename T, int TW>
void corr_groups(const CorrArgs<T>& a, int K, int y, int x) {
  int k0 = 0;
  for (; k0 + kKg <= K; k0 += kKg) corr_tile<T, kKg, TW>(a, k0, y, x);
  switch (K - k0) {
    case 3: corr_tile<T, 3, TW>(a, k0, y, x); break;
    case 2: corr_tile<T, 2, TW>(a, k0, y, x); break;
    case 1: corr_tile<T, 1, TW>(a, k0, y, x); break;
    default: break;
  }
}

// One task per block of output rows. Every column tile is finished for all
// output channel groups before moving on, so the strip of input it reads
// (C x kh rows, one tile wide) stays in L1 instead of being streamed once per
// group.
template <typename T>
void correlate(const CorrArgs<T>& a, int K) {
  const int blocks = (a.H + kRowBlock - 1) / kRowBlock;
  const int W = a.W;
  // Tile origins along a row. A narrow remainder is covered by a full tile
  // ending at the last column; planes narrower than a tile use single columns.
  std::vector<int> tiles;
  for (int x = 0; x + kTile <= W; x += kTile) tiles.push_back(x);
  if (W < kTile) tiles.push_back(0);
  else if (W % kTile != 0) tiles.push_back(W - kTile);
  parallel_for(static_cast<std::size_t>(blocks), [&](std::size_t task) {
    const int y0 = static_cast<int>(task) * kRowBlock, y1 = std::min(a.H, y0 + kRowBlock);
    // Column strips keep the rolling three-row window of a wide plane small
    // enough to stay in L2 while the strip's rows are swept.
    for (std::size_t s0 = 0; s0 < tiles.size(); s0 += kStripTiles) {
      const std::size_t s1 = std::min(tiles.size(), s0 + kStripTiles);
      for (int y = y0; y < y1; ++y) {
        for (std::size_t t = s0; t < s1; ++t) {
          if (W >= kTile) {
            corr_groups<T, kTile>(a, K, y, tiles[t]);
          } else {
            for (int x = 0; x < W; ++x) corr_groups<T, 1>(a, K, y, x);
          }
        }
      }
    }
  });
}

// out[kk * KW + dx] = sum over r < nrows of <g[kk] + r*gs, x + dx + r*xs>
// over n columns, for kk < kg and dx < KW, sharing loads between taps and
// channels. Vector lanes are reduced in a fixed order, then the scalar tails
// are added.
template <typename T, int KW>
void block_dots(const T* const* g, std::size_t gs, int kg, const T* x, std::size_t xs, int nrows, int n, T* out) {
  constexpr int L = static_cast<int>(sizeof(Vec<T>) / sizeof(T));
  Vec<T> lanes[kKg][KW] = {};
  T tail[kKg][KW] = {};
  for (int r = 0; r < nrows; ++r) {
    const T* xr = x + r * xs;
    int i = 0;
    for (; i + L <= n; i += L) {
      Vec<T> xv[KW];
      for (int dx = 0; dx < KW; ++dx) xv[dx] = load_vec(xr + i + dx);
      for (int kk = 0; kk < kg; ++kk) {
        const Vec<T> gv = load_vec(g[kk] + r * gs + i);
        for (int dx = 0; dx < KW; ++dx) lanes[kk][dx] += gv * xv[dx];
      }
    }
    for (int kk = 0; kk < kg; ++kk)
      for (int j = i; j < n; ++j)
        for (int dx = 0; dx < KW; ++dx) tail[kk][dx] += g[kk][r * gs + j] * xr[j + dx];
  }
  for (int kk = 0; kk < kg; ++kk) {
    for (int dx = 0; dx < KW; ++dx) {
      T total = T(0);
      for (int l = 0; l < L; ++l) total += lanes[kk][dx][l];
      out[kk * KW + dx] = total + tail[kk][dx];
    }
  }
}

// Distance between padded planes: at least ph * pw, rounded to an odd number
// of cache lines. Power-of-two image widths would otherwise place the same
// row of every channel in a handful of cache sets.
template <typename T>
std::size_t padded_plane(int ph, int pw) {
  constexpr std::size_t line = 64 / sizeof(T);
  std::size_t lines = (static_cast<std::size_t>(ph) * pw + line - 1) / line;
  if (lines % 2 == 0) ++lines;
  return lines * line;
}

// Copies C planes of batch item n into a zero-bordered buffer laid out with
// padded_plane() spacing.
template <typename T>
void pad_item(const BasicTensor<T>& t, int n, int rh, int rw, std::vector<T>& buf) {
  const int C = t.c(), H = t.h(), W = t.w(), pw = W + 2 * rw, ph = H + 2 * rh;
  const std::size_t plane = padded_plane<T>(ph, pw);
  buf.assign(static_cast<std::size_t>(C) * plane, T(0));
  for (int c = 0; c < C; ++c) {
    const T* src = t.plane(n, c);
    T* dst = buf.data() + static_cast<std::size_t>(c) * plane;
    for (int y = 0; y < H; ++y) {
      std::copy(src + static_cast<std::size_t>(y) * W, src + static_cast<std::size_t>(y + 1) * W,
                dst + static_cast<std::size_t>(y + rh) * pw + rw);
    }
  }
}

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const LayerParams<T>& p) {
  check_conv(input, p);
  const int N = input.n(), C = input.c(), H = input.h(), W = input.w(), K = p.out_channels;
  BasicTensor<T> out(Shape{N, K, H, W});
  std::vector<T> padded;
  for (int n = 0; n < N; ++n) {
    pad_item(input, n, p.kernel_h / 2, p.kernel_w / 2, padded);
    correlate(CorrArgs<T>{padded.data(), padded_plane<T>(H + 2 * (p.kernel_h / 2), W + 2 * (p.kernel_w / 2)), C, H,
                          W, p.kernels.data(), p.biases.data(), p.kernel_h,
                          p.kernel_w, out.plane(n, 0)},
              K);
  }
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const LayerParams<T>& p,
                             const BasicTensor<T>& grad_out) {
  check_conv(input, p);
  const int N = input.n(), C = input.c(), H = input.h(), W = input.w(), K = p.out_channels;
  check_same(grad_out.shape(), Shape{N, K, H, W}, "conv2d_backward");
  const int kh = p.kernel_h, kw = p.kernel_w, rh = kh / 2, rw = kw / 2;

  ConvGrads<T> g{BasicTensor<T>(input.shape()), LayerParams<T>(K, C, kh, kw)};
  // Input adjoint: correlation of grad_out with the spatially flipped kernel,
  // channel roles swapped.
  std::vector<T> flipped(p.kernels.size());
  for (int k = 0; k < K; ++k)
    for (int c = 0; c < C; ++c)
      for (int dy = 0; dy < kh; ++dy)
        for (int dx = 0; dx < kw; ++dx)
          flipped[((static_cast<std::size_t>(c) * K + k) * kh + (kh - 1 - dy)) * kw + (kw - 1 - dx)] =
              p.weight(k, c, dy, dx);
  std::vector<T> padded;
  for (int n = 0; n < N; ++n) {
    pad_item(grad_out, n, rh, rw, padded);
    correlate(CorrArgs<T>{padded.data(), padded_plane<T>(H + 2 * rh, W + 2 * rw), K, H, W, flipped.data(), nullptr, kh,
                          kw, g.input.plane(n, 0)},
              C);
  }

  // Kernel adjoint over a zero-padded copy of the input, one task per
  // (output channel group, input channel). Each block of rows contributes a
  // float partial sum that is gathered in double.
  const int pw = W + 2 * rw;
  const std::size_t plane = padded_plane<T>(H + 2 * rh, pw);
  const std::size_t item = static_cast<std::size_t>(C) * plane;
  std::vector<T> padded_in(item * N);
  {
    std::vector<T> buf;
    for (int n = 0; n < N; ++n) {
      pad_item(input, n, rh, rw, buf);
      std::copy(buf.begin(), buf.end(), padded_in.begin() + static_cast<std::ptrdiff_t>(item * n));
    }
  }
  const int groups = (K + kKg - 1) / kKg;
  parallel_for(static_cast<std::size_t>(groups) * C, [&](std::size_t task) {
    const int c = static_cast<int>(task % C);
    const int k0 = static_cast<int>(task / C) * kKg;
    const int kg = std::min(kKg, K - k0);
    const std::size_t taps = static_cast<std::size_t>(kh) * kw;
    std::vector<double> acc(taps * kKg, 0.0);
    for (int n = 0; n < N; ++n) {
      const T* ip = padded_in.data() + item * n + static_cast<std::size_t>(c) * plane;
      for (int y0 = 0; y0 < H; y0 += kRowBlock) {
        const int rows = std::min(kRowBlock, H - y0);
        const T* grows[kKg];
        for (int kk = 0; kk < kg; ++kk) grows[kk] = grad_out.plane(n, k0 + kk) + static_cast<std::size_t>(y0) * W;
        for (int dy = 0; dy < kh; ++dy) {
          const T* irow = ip + static_cast<std::size_t>(y0 + dy) * pw;
          if (kw == 3) {
            T partial[kKg * 3];
            block_dots<T, 3>(grows, static_cast<std::size_t>(W), kg, irow, static_cast<std::size_t>(pw), rows, W,
                             partial);
            for (int kk = 0; kk < kg; ++kk)
              for (int dx = 0; dx < 3; ++dx) acc[kk * taps + dy * 3 + dx] += static_cast<double>(partial[kk * 3 + dx]);
          } else {
            for (int dx = 0; dx < kw; ++dx) {
              T partial[kKg];
              block_dots<T, 1>(grows, static_cast<std::size_t>(W), kg, irow + dx, static_cast<std::size_t>(pw), rows,
                               W, partial);
              for (int kk = 0; kk < kg; ++kk) acc[kk * taps + dy * kw + dx] += static_cast<double>(partial[kk]);
            }
          }
        }
      }
    }
    for (int kk = 0; kk < kg; ++kk) {
      T* wk = &g.params.weight(k0 + kk, c, 0, 0);
      for (std::size_t i = 0; i < taps; ++i) wk[i] = static_cast<T>(acc[kk * taps + i]);
    }
  });

  for (int k = 0; k < K; ++k) {
    double acc = 0.0;
    for (int n = 0; n < N; ++n) {
      const T* gp = grad_out.plane(n, k);
      for (int y = 0; y < H; ++y) acc += static_cast<double>(sum(gp + static_cast<std::size_t>(y) * W, W));
    }
    g.params.biases[k] = static_cast<T>(acc);
  }
  return g;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
  BasicTensor<T> out(input.shape());
  const T* in = input.data();
  T* o = out.data();
  for (std::size_t i = 0; i < input.size(); ++i) o[i] = in[i] > T(0) ? in[i] : T(0);
  return out;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& input, const BasicTensor<T>& grad_out) {
  check_same(input.shape(), grad_out.shape(), "relu_backward");
  BasicTensor<T> out(input.shape());
  const T* in = input.data();
  const T* g = grad_out.data();
  T* o = out.data();
  for (std::size_t i = 0; i < input.size(); ++i) o[i] = in[i] > T(0) ? g[i] : T(0);
  return out;
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& input) {
  BasicTensor<T> out(input.shape());
  const T* in = input.data();
  T* o = out.data();
  for (std::size_t i = 0; i < input.size(); ++i) {
    const T x = std::clamp(in[i], T(-40), T(40));
    o[i] = T(1) / (T(1) + std::exp(-x));
  }
  return out;
}

template <typename T>
BasicTensor<T> sigmoid_backward(const BasicTensor<T>& output, const BasicTensor<T>& grad_out) {
  check_same(output.shape(), grad_out.shape(), "sigmoid_backward");
  BasicTensor<T> out(output.shape());
  const T* y = output.data();
  const T* g = grad_out.data();
  T* o = out.data();
  for (std::size_t i = 0; i < output.size(); ++i) o[i] = g[i] * y[i] * (T(1) - y[i]);
  return out;
}

template <typename T>
PoolResult<T> maxpool2(const BasicTensor<T>& input) {
  const Shape& s = input.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    fail(ErrorCode::kShape, "maxpool2: spatial extent " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                                " is odd; resize the input to a multiple of 4");
  }
  if (input.size() > std::numeric_limits<std::uint32_t>::max()) {
    fail(ErrorCode::kShape, "maxpool2: tensor too large for 32-bit argmax indices");
  }
  const int Ho = s.h / 2, Wo = s.w / 2;
  PoolResult<T> r{BasicTensor<T>(Shape{s.n, s.c, Ho, Wo}), std::vector<std::uint32_t>(static_cast<std::size_t>(s.n) * s.c * Ho * Wo)};
  std::size_t oi = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* ip = input.plane(n, c);
      const std::size_t base = input.index(n, c, 0, 0);
      T* op = r.output.plane(n, c);
      for (int y = 0; y < Ho; ++y) {
        for (int x = 0; x < Wo; ++x, ++oi) {
          std::size_t best = static_cast<std::size_t>(2 * y) * s.w + 2 * x;
          const std::size_t cand[3] = {best + 1, best + s.w, best + s.w + 1};
          for (std::size_t i : cand) {
            if (ip[i] > ip[best]) best = i;
          }
          op[static_cast<std::size_t>(y) * Wo + x] = ip[best];
          r.argmax[oi] = static_cast<std::uint32_t>(base + best);
        }
      }
    }
  }
  return r;
}

template <typename T>
BasicTensor<T> maxpool2_backward(const Shape& input_shape, const std::vector<std::uint32_t>& argmax,
                                 const BasicTensor<T>& grad_out) {
  if (grad_out.size() != argmax.size() || input_shape.h != 2 * grad_out.h() ||
      input_shape.w != 2 * grad_out.w() || input_shape.c != grad_out.c() || input_shape.n != grad_out.n()) {
    fail(ErrorCode::kShape, "maxpool2_backward: grad_out " + to_string(grad_out.shape()) +
                                " does not match pooled input " + to_string(input_shape));
  }
  BasicTensor<T> g(input_shape);
  T* gi = g.data();
  const T* go = grad_out.data();
  for (std::size_t i = 0; i < argmax.size(); ++i) gi[argmax[i]] += go[i];
  return g;
}

template <typename T>
BasicTensor<T> upsample2(const BasicTensor<T>& input) {
  const Shape& s = input.shape();
  BasicTensor<T> out(Shape{s.n, s.c, 2 * s.h, 2 * s.w});
  const int Wo = 2 * s.w;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* ip = input.plane(n, c);
      T* op = out.plane(n, c);
      for (int y = 0; y < s.h; ++y) {
        T* r0 = op + static_cast<std::size_t>(2 * y) * Wo;
        T* r1 = r0 + Wo;
        const T* src = ip + static_cast<std::size_t>(y) * s.w;
        for (int x = 0; x < s.w; ++x) {
          r0[2 * x] = r0[2 * x + 1] = src[x];
        }
        std::copy(r0, r0 + Wo, r1);
      }
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> upsample2_backward(const BasicTensor<T>& grad_out) {
  const Shape& s = grad_out.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    fail(ErrorCode::kShape, "upsample2_backward: odd gradient extent " + to_string(s));
  }
  const int Ho = s.h / 2, Wo = s.w / 2;
  BasicTensor<T> g(Shape{s.n, s.c, Ho, Wo});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* gp = grad_out.plane(n, c);
      T* op = g.plane(n, c);
      for (int y = 0; y < Ho; ++y) {
        const T* r0 = gp + static_cast<std::size_t>(2 * y) * s.w;
        const T* r1 = r0 + s.w;
        for (int x = 0; x < Wo; ++x) {
          op[static_cast<std::size_t>(y) * Wo + x] = ((r0[2 * x] + r0[2 * x + 1]) + r1[2 * x]) + r1[2 * x + 1];
        }
      }
    }
  }
  return g;
}

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) {
    const char* dim = a.n() != b.n() ? "batch" : a.h() != b.h() ? "height" : "width";
    fail(ErrorCode::kShape, std::string("concat_channels: ") + dim + " dimension mismatch, " +
                                to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const Shape sa = a.shape();
  BasicTensor<T> out(Shape{sa.n, a.c() + b.c(), sa.h, sa.w});
  const std::size_t pa = sa.plane() * a.c(), pb = sa.plane() * b.c();
  for (int n = 0; n < sa.n; ++n) {
    T* dst = out.data() + static_cast<std::size_t>(n) * (pa + pb);
    std::copy_n(a.data() + n * pa, pa, dst);
    std::copy_n(b.data() + n * pb, pb, dst + pa);
  }
  return out;
}

template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> concat_backward(const BasicTensor<T>& grad_out, int channels_a) {
  const Shape s = grad_out.shape();
  if (channels_a < 0 || channels_a > s.c) {
    fail(ErrorCode::kShape, "concat_backward: split point " + std::to_string(channels_a) +
                                " outside channel range of " + to_string(s));
  }
  BasicTensor<T> ga(Shape{s.n, channels_a, s.h, s.w});
  BasicTensor<T> gb(Shape{s.n, s.c - channels_a, s.h, s.w});
  const std::size_t pa = s.plane() * channels_a, pb = s.plane() * (s.c - channels_a);
  for (int n = 0; n < s.n; ++n) {
    const T* src = grad_out.data() + static_cast<std::size_t>(n) * (pa + pb);
    std::copy_n(src, pa, ga.data() + n * pa);
    std::copy_n(src + pa, pb, gb.data() + n * pb);
  }
  return {std::move(ga), std::move(gb)};
}

#define P2I_INSTANTIATE(T)                                                                              \
  template BasicTensor<T> stack_batch(std::span<const BasicTensor<T>>);                                 \
  template struct LayerParams<T>;                                                                       \
  template BasicTensor<T> conv2d_forward(const BasicTensor<T>&, const LayerParams<T>&);                 \
  template ConvGrads<T> conv2d_backward(const BasicTensor<T>&, const LayerParams<T>&,                   \
                                        const BasicTensor<T>&);                                         \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                  \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);                  \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                               \
  template BasicTensor<T> sigmoid_backward(const BasicTensor<T>&, const BasicTensor<T>&);               \
  template PoolResult<T> maxpool2(const BasicTensor<T>&);                                               \
  template BasicTensor<T> maxpool2_backward(const Shape&, const std::vector<std::uint32_t>&,            \
                                            const BasicTensor<T>&);                                     \
  template BasicTensor<T> upsample2(const BasicTensor<T>&);                                             \
  template BasicTensor<T> upsample2_backward(const BasicTensor<T>&);                                    \
  template BasicTensor<T> concat_channels(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template std::pair<BasicTensor<T>, BasicTensor<T>> concat_backward(const BasicTensor<T>&, int);

P2I_INSTANTIATE(float)
P2I_INSTANTIATE(double)

#undef P2I_INSTANTIATE

}  // namespace p2i
