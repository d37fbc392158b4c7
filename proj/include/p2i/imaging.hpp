#pragma once

#include <cstdint>

#include "json.hpp"
#include "p2i/tensor.hpp"

namespace p2i {

struct Size2 {
  int h = 0;
  int w = 0;
  friend bool operator==(const Size2&, const Size2&) = default;
};

/// BT.601 luma, 0.299 R + 0.587 G + 0.114 B, of a (N,3,H,W) tensor.
Tensor to_grayscale(const Tensor& rgb);

/// out = in^(1/gamma) when brightening (the default), in^gamma otherwise.
/// Inputs are clamped to [0,1] first.
Tensor gamma_correct(const Tensor& img, double gamma = 1.7, bool brighten = true);

struct ClaheParams {
  int tiles_y = 8;
  int tiles_x = 8;
  double clip = 2.0;
  int bins = 256;

  friend bool operator==(const ClaheParams&, const ClaheParams&) = default;
};

/// Contrast limited adaptive histogram equalisation of each (1-channel) plane.
///
/// The plane is split into tiles_y x tiles_x tiles with boundaries at
/// floor(i * H / tiles_y). Values are quantised to round(v * (bins - 1)).
/// Each tile histogram is clipped at max(1, clip * area / bins) and the
/// clipped mass is spread evenly over all bins; the tile mapping is the
/// normalised cumulative histogram, so it lies in [0,1]. Every pixel blends
/// the mappings of its four nearest tile centres bilinearly (clamped at the
/// image border).
Tensor clahe(const Tensor& img, const ClaheParams& params = {});

/// Bilinear resampling with pixel centres aligned: source coordinate
/// (i + 0.5) * src / dst - 0.5, clamped to the valid range. Identity when the
/// size is unchanged.
Tensor resize_bilinear(const Tensor& img, Size2 target);

/// Bilinear resize of a probability map back to the original image size.
inline Tensor resize_back(const Tensor& prob, Size2 original) { return resize_bilinear(prob, original); }

/// Nearest-neighbour resize followed by re-binarisation at 0.5.
Tensor resize_mask(const Tensor& mask, Size2 target);

/// 1 where v >= threshold, else 0.
Tensor binarize(const Tensor& t, float threshold = 0.5f);

/// Smallest multiple-of-m extents not below the given size.
Size2 round_up(Size2 s, int m);

/// Pre-processing chain, applied in the fixed order grayscale, gamma, CLAHE.
struct PreprocessConfig {
  bool grayscale = true;
  double gamma = 1.7;
  bool gamma_brighten = true;
  bool apply_gamma = true;
  bool apply_clahe = true;
  ClaheParams clahe;

  friend bool operator==(const PreprocessConfig&, const PreprocessConfig&) = default;
};

nlohmann::json preprocess_to_json(const PreprocessConfig& c);
PreprocessConfig preprocess_from_json(const nlohmann::json& j);

/// Runs the chain on a (1,C,H,W) image; the result has one channel.
Tensor preprocess(const Tensor& image, const PreprocessConfig& config);

/// One geometric transform applied identically to an image and its mask:
/// optional flips, then an integer translation with zero fill.
struct AugmentParams {
  bool flip_h = false;
  bool flip_v = false;
  int shift_y = 0;
  int shift_x = 0;

  friend bool operator==(const AugmentParams&, const AugmentParams&) = default;
};

/// Draws flips with probability 1/2 each and shifts uniformly within
/// +-floor(max_shift * extent).
AugmentParams sample_augment(Size2 size, std::uint64_t seed, double max_shift = 0.1);

Tensor apply_augment(const Tensor& t, const AugmentParams& a);

}  // namespace p2i
