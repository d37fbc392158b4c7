#include "p2i/reference_nets.hpp"

#include <array>

namespace p2i {
namespace {

// Encoder-decoder with 8 filters everywhere:
//   1->8 | 8->8, pool | 8->8 x2, pool | 8->8 x2, concat(pooled) 16->8 |
//   up, concat 16->8, 8->8 x2 | up, concat 16->8, 8->8 x2 | 8->1, sigmoid
// 80 + 9*584 + 3*1160 + 73 = 8,889 parameters.
NetworkSpec light() {
  SpecBuilder b("light");
  std::string x = b.conv_relu(std::string(kInputId), 8);
  const std::string skip1 = b.conv_relu(x, 8);
  x = b.maxpool(skip1);
  x = b.conv_relu(x, 8);
  const std::string skip2 = b.conv_relu(x, 8);
  const std::string pooled = b.maxpool(skip2);
  x = b.conv_relu(pooled, 8);
  x = b.conv_relu(x, 8);
  x = b.conv_relu(b.concat(x, pooled), 8);
  x = b.concat(b.upsample(x), skip2);
  x = b.conv_relu(x, 8);
  x = b.conv_relu(x, 8);
  x = b.conv_relu(x, 8);
  x = b.concat(b.upsample(x), skip1);
  x = b.conv_relu(x, 8);
  x = b.conv_relu(x, 8);
  x = b.conv_relu(x, 8);
  return b.finish(b.sigmoid(b.conv(x, 1)));
}

// Reduced U-Net with widths 24 / 64 / 72: 316,657 parameters.
NetworkSpec mini_unet() {
  SpecBuilder b("mini-unet");
  std::string x = b.conv_relu(std::string(kInputId), 24);
  const std::string skip1 = b.conv_relu(x, 24);
  x = b.conv_relu(b.maxpool(skip1), 64);
  x = b.conv_relu(x, 64);
  const std::string skip2 = b.conv_relu(x, 64);
  x = b.conv_relu(b.maxpool(skip2), 72);
  x = b.concat(b.upsample(x), skip2);
  x = b.conv_relu(x, 64);
  x = b.conv_relu(x, 64);
  x = b.conv_relu(x, 64);
  x = b.concat(b.upsample(x), skip1);
  x = b.conv_relu(x, 24);
  x = b.conv_relu(x, 24);
  x = b.conv_relu(x, 24);
  return b.finish(b.sigmoid(b.conv(x, 1)));
}

// Dense blocks of 1 / 7 / 4 / 6 / 4 layers (two down, bottleneck, two up).
// Each dense layer is 1x1 conv to delta filters then 3x3 conv to omega
// filters, stacked onto its input. Transitions are 1x1 convs to pi filters.
NetworkSpec dense() {
  SpecBuilder b("dense");
  DenseGrowthRule rule;
  auto block = [&](std::string stack, int layers) {
    for (int i = 0; i < layers; ++i) {
      const std::string neck = b.conv_relu(stack, rule.delta(), 1);
      const std::string grown = b.conv_relu(neck, rule.omega, 3);
      stack = b.concat(stack, grown);
      rule.grow();
    }
    return stack;
  };
  auto transition = [&](const std::string& stack) { return b.conv_relu(stack, rule.pi(), 1); };

  constexpr std::array<int, 5> kLayers = {1, 7, 4, 6, 4};
  std::string x = b.conv_relu(std::string(kInputId), rule.omega);
  const std::string skip1 = transition(block(x, kLayers[0]));
  const std::string skip2 = transition(block(b.maxpool(skip1), kLayers[1]));
  x = transition(block(b.maxpool(skip2), kLayers[2]));
  x = transition(block(b.concat(b.upsample(x), skip2), kLayers[3]));
  x = block(b.concat(b.upsample(x), skip1), kLayers[4]);
  return b.finish(b.sigmoid(b.conv(x, 1, 1)));
}

}  // namespace

std::string_view family_name(Family f) {
  switch (f) {
    case Family::kLight: return "light";
    case Family::kMiniUnet: return "mini-unet";
    case Family::kDense: return "dense";
  }
  return "?";
}

Family parse_family(std::string_view name) {
  for (Family f : {Family::kLight, Family::kMiniUnet, Family::kDense}) {
    if (family_name(f) == name) return f;
  }
  fail(ErrorCode::kInvalidArgument, "unknown network family '" + std::string(name) +
                                        "' (expected light, mini-unet or dense)");
}

std::size_t family_target_count(Family f) {
  switch (f) {
    case Family::kLight: return 8'889;
    case Family::kMiniUnet: return 316'657;
    case Family::kDense: return 1'032'588;
  }
  return 0;
}

NetworkSpec build_reference(Family f) {
  switch (f) {
    case Family::kLight: return light();
    case Family::kMiniUnet: return mini_unet();
    case Family::kDense: return dense();
  }
  fail(ErrorCode::kInvalidArgument, "unknown family");
}

}  // namespace p2i
