#include <algorithm>
#include <vector>

#include "p2i/grad_check.hpp"
#include "p2i/graph.hpp"

namespace p2i {
namespace {

// Sign bits of every ReLU input plus every max-pool winner.
std::vector<std::uint32_t> activation_pattern(const NetworkSpec& spec, const Tape<double>& tape) {
  std::vector<std::uint32_t> sig;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (spec.layers[i].kind == LayerKind::kRelu) {
      const int j = tape.info[i].input_index[0];
      const TensorD& in = j < 0 ? tape.input : tape.activations[j];
      for (double v : in.values()) sig.push_back(v > 0.0 ? 1u : 0u);
    }
  }
  for (const auto& [i, idx] : tape.pool_argmax) sig.insert(sig.end(), idx.begin(), idx.end());
  return sig;
}

}  // namespace

GradCheckReport network_grad_check(const NetworkSpec& spec, const ParameterSet<double>& params,
                                   const TensorD& input, const TensorD& projection, double tolerance,
                                   double step, std::size_t every, std::size_t first) {
  if (every == 0 || first >= every) fail(ErrorCode::kInvalidArgument, "network_grad_check: need first < every");
  // Flatten θ in map order: kernels then biases per layer.
  std::vector<double> theta;
  for (const auto& [id, lp] : params.layers) {
    theta.insert(theta.end(), lp.kernels.begin(), lp.kernels.end());
    theta.insert(theta.end(), lp.biases.begin(), lp.biases.end());
  }
  auto unflatten = [&](std::span<const double> v) {
    ParameterSet<double> p = params;
    std::size_t o = 0;
    for (auto& [id, lp] : p.layers) {
      std::copy_n(v.begin() + static_cast<long>(o), lp.kernels.size(), lp.kernels.begin());
      o += lp.kernels.size();
      std::copy_n(v.begin() + static_cast<long>(o), lp.biases.size(), lp.biases.begin());
      o += lp.biases.size();
    }
    return p;
  };
  auto objective = [&](const TensorD& out) {
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out.data()[i] * projection.data()[i];
    return s;
  };

  auto base = forward(spec, params, input, true);
  const auto base_pattern = activation_pattern(spec, *base.tape);
  auto grads = backward(base.tape, projection);
  std::vector<double> analytic;
  for (const auto& [id, lp] : grads.params.layers) {
    analytic.insert(analytic.end(), lp.kernels.begin(), lp.kernels.end());
    analytic.insert(analytic.end(), lp.biases.begin(), lp.biases.end());
  }

  // The branch probe runs the recorded forward once and caches the objective
  // for the value probe that follows at the same point.
  std::vector<double> cached_point;
  double cached_value = 0.0;
  auto same_branch = [&](std::span<const double> v) {
    ParameterSet<double> p = unflatten(v);
    auto r = forward(spec, p, input, true);
    cached_point.assign(v.begin(), v.end());
    cached_value = objective(r.output);
    return activation_pattern(spec, *r.tape) == base_pattern;
  };
  auto f = [&](std::span<const double> v) {
    if (cached_point.size() == v.size() && std::equal(v.begin(), v.end(), cached_point.begin())) {
      return cached_value;
    }
    return objective(forward(spec, unflatten(v), input, false).output);
  };
  if (every == 1) return grad_check(f, theta, analytic, tolerance, step, same_branch);

  // Check the coordinates first, first + every, ... with the others held at
  // their base values.
  std::vector<std::size_t> picked;
  for (std::size_t i = first; i < theta.size(); i += every) picked.push_back(i);
  std::vector<double> sub(picked.size()), sub_analytic(picked.size());
  for (std::size_t k = 0; k < picked.size(); ++k) {
    sub[k] = theta[picked[k]];
    sub_analytic[k] = analytic[picked[k]];
  }
  auto scatter = [&](std::span<const double> v) {
    std::vector<double> full = theta;
    for (std::size_t k = 0; k < picked.size(); ++k) full[picked[k]] = v[k];
    return full;
  };
  return grad_check([&](std::span<const double> v) { return f(scatter(v)); }, sub, sub_analytic, tolerance, step,
                    [&](std::span<const double> v) { return same_branch(scatter(v)); });
}

}  // namespace p2i
