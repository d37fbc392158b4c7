#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace p2i {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  // Coordinates whose probe points crossed a non-differentiable point
  // (ReLU sign change, max-pool winner change) and were therefore not compared.
  std::size_t skipped = 0;
  double tolerance = 0.0;
  bool passed = false;
};

using ScalarFn = std::function<double(std::span<const double>)>;
/// Returns true when the probe point lies on the same smooth piece as the base point.
using BranchFn = std::function<bool(std::span<const double>)>;

/// Central finite differences in double precision.
std::vector<double> numeric_gradient(const ScalarFn& f, std::span<const double> x, double step = 1e-5);

/// Compares `analytic` against central differences of `f` at `x`.
///
/// The per-coordinate error is |a - n| / max(|a|, |n|, 1e-3 * scale), where
/// scale is the largest gradient magnitude seen; coordinates more than three
/// orders of magnitude below the dominant gradient are judged on that floor.
GradCheckReport grad_check(const ScalarFn& f, std::span<const double> x, std::span<const double> analytic,
                           double tolerance, double step = 1e-5, const BranchFn& same_branch = {});

}  // namespace p2i
