#pragma once

#include <cstddef>
#include <string>
#include <string_view>

#include "p2i/graph.hpp"

namespace p2i {

enum class Family { kLight, kMiniUnet, kDense };

std::string_view family_name(Family f);
Family parse_family(std::string_view name);

/// Published trainable-parameter counts the reference layouts aim for.
std::size_t family_target_count(Family f);

/// Filter-count rule of the densely connected family: the growth width starts
/// at 8 and grows by 2 after every dense concatenation; bottleneck convs use
/// 4x the growth width and transition convs half of it.
struct DenseGrowthRule {
  int omega = 8;
  int increment = 2;

  int delta() const { return omega * 4; }
  int pi() const { return omega / 2; }
  void grow() { omega += increment; }
};

NetworkSpec build_reference(Family f);

}  // namespace p2i
