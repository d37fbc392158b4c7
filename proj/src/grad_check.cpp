#include "p2i/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "p2i/error.hpp"

namespace p2i {

std::vector<double> numeric_gradient(const ScalarFn& f, std::span<const double> x, double step) {
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + step;
    const double fp = f(probe);
    probe[i] = x[i] - step;
    const double fm = f(probe);
    probe[i] = x[i];
    g[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

GradCheckReport grad_check(const ScalarFn& f, std::span<const double> x, std::span<const double> analytic,
                           double tolerance, double step, const BranchFn& same_branch) {
  if (analytic.size() != x.size()) {
    fail(ErrorCode::kShape, "grad_check: analytic gradient has " + std::to_string(analytic.size()) +
                                " entries for " + std::to_string(x.size()) + " inputs");
  }
  GradCheckReport r;
  r.tolerance = tolerance;
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> numeric(x.size(), 0.0);
  std::vector<char> usable(x.size(), 1);
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + step;
    bool ok = !same_branch || same_branch(probe);
    const double fp = f(probe);
    probe[i] = x[i] - step;
    ok = ok && (!same_branch || same_branch(probe));
    const double fm = f(probe);
    probe[i] = x[i];
    numeric[i] = (fp - fm) / (2.0 * step);
    usable[i] = ok;
  }
  double scale = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!usable[i]) continue;
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  const double floor = std::max(1e-3 * scale, 1e-300);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!usable[i]) {
      ++r.skipped;
      continue;
    }
    ++r.checked;
    const double diff = std::abs(analytic[i] - numeric[i]);
    const double err = diff == 0.0 ? 0.0 : diff / std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    if (err > r.max_rel_error) {
      r.max_rel_error = err;
      r.worst_index = i;
    }
  }
  r.passed = r.checked > 0 && r.max_rel_error < tolerance;
  return r;
}

}  // namespace p2i
