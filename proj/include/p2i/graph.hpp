#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "p2i/ops.hpp"
#include "p2i/tensor.hpp"

namespace p2i {

enum class LayerKind { kConv, kRelu, kSigmoid, kMaxPool2, kUpsample2, kConcat };

std::string_view layer_kind_name(LayerKind kind);
LayerKind parse_layer_kind(std::string_view name);

/// Id of the implicit graph input.
inline constexpr std::string_view kInputId = "input";

struct LayerSpec {
  std::string id;
  LayerKind kind = LayerKind::kConv;
  std::vector<std::string> inputs;
  // conv only
  int filters = 0;
  int kernel_h = 3;
  int kernel_w = 3;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// A network as an ordered DAG of layers. Every layer may only consume the
/// graph input or layers listed before it.
struct NetworkSpec {
  std::string name;
  int input_channels = 1;
  // Paper-compatible specs reach exactly two pooling levels below the input
  // resolution, so any multiple-of-4 input size is valid.
  bool strict_pooling = true;
  std::vector<LayerSpec> layers;
  std::string output;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

/// Per-layer facts derived from a validated spec.
struct LayerInfo {
  int channels = 0;
  int depth = 0;  // number of pooling levels below full resolution
  std::vector<int> input_index;  // -1 denotes the graph input
};

/// Checks ids, ordering, arity, channel/scale compatibility and the output
/// contract. Returns derived per-layer info in layer order.
std::vector<LayerInfo> validate(const NetworkSpec& spec);

/// Σ over conv layers of k_h·k_w·C_in·C_out + C_out.
std::size_t parameter_count(const NetworkSpec& spec);

/// Input extents must be multiples of this (2^max pooling depth).
int size_multiple(const NetworkSpec& spec);

/// Conservative half-width, in input pixels, of the region an output pixel
/// depends on. Output pixel (y, x) is a function of input rows
/// [y - radius, y + radius] and the same columns, provided the enclosing
/// offset is a multiple of size_multiple().
int receptive_radius(const NetworkSpec& spec);

template <typename T>
struct ParameterSet {
  std::map<std::string, LayerParams<T>> layers;
  std::uint64_t seed = 0;

  std::size_t count() const;
  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;
};

template <typename To, typename From>
ParameterSet<To> params_cast(const ParameterSet<From>& p) {
  ParameterSet<To> out;
  out.seed = p.seed;
  for (const auto& [id, lp] : p.layers) out.layers.emplace(id, params_cast<To>(lp));
  return out;
}

/// He-uniform kernels (bound sqrt(6 / fan_in)) and zero biases; deterministic per seed.
ParameterSet<float> init_params(const NetworkSpec& spec, std::uint64_t seed);

/// Throws unless `params` has exactly the conv layers of `spec` with matching extents.
template <typename T>
void check_params(const NetworkSpec& spec, const ParameterSet<T>& params);

/// Activations kept for the backward pass. Refers to the spec and parameters
/// passed to forward(); both must outlive the tape.
template <typename T>
struct Tape {
  const NetworkSpec* spec = nullptr;
  const ParameterSet<T>* params = nullptr;
  std::vector<LayerInfo> info;
  BasicTensor<T> input;
  std::vector<BasicTensor<T>> activations;
  std::map<std::size_t, std::vector<std::uint32_t>> pool_argmax;
};

template <typename T>
struct ForwardResult {
  BasicTensor<T> output;
  std::optional<Tape<T>> tape;
};

template <typename T>
ForwardResult<T> forward(const NetworkSpec& spec, const ParameterSet<T>& params, const BasicTensor<T>& input,
                         bool record);

template <typename T>
struct Gradients {
  ParameterSet<T> params;
  BasicTensor<T> input;
};

template <typename T>
Gradients<T> backward(const std::optional<Tape<T>>& tape, const BasicTensor<T>& grad_out);

struct GradCheckReport;

/// Finite-difference check of backward() for every parameter of the network,
/// using the objective <projection, forward(input)> in double precision.
/// Probes whose ReLU sign pattern or max-pool winners differ from the base
/// point are reported as skipped rather than compared. With `every` > 1 only
/// the flattened coordinates first, first + every, ... are probed.
GradCheckReport network_grad_check(const NetworkSpec& spec, const ParameterSet<double>& params,
                                   const TensorD& input, const TensorD& projection, double tolerance,
                                   double step = 1e-5, std::size_t every = 1, std::size_t first = 0);

/// Fluent construction of specs with auto-generated layer ids.
class SpecBuilder {
 public:
  SpecBuilder(std::string name, int input_channels = 1);

  std::string conv(const std::string& in, int filters, int kernel = 3);
  std::string relu(const std::string& in);
  std::string conv_relu(const std::string& in, int filters, int kernel = 3) { return relu(conv(in, filters, kernel)); }
  std::string sigmoid(const std::string& in);
  std::string maxpool(const std::string& in);
  std::string upsample(const std::string& in);
  std::string concat(const std::string& a, const std::string& b);

  NetworkSpec finish(const std::string& output, bool strict_pooling = true);

 private:
  std::string add(LayerKind kind, std::vector<std::string> inputs, int filters = 0, int kernel = 3);

  NetworkSpec spec_;
  std::map<LayerKind, int> counters_;
};

}  // namespace p2i
