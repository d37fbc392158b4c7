#include "p2i/graph.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <unordered_map>

namespace p2i {

std::string_view layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv: return "conv";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kSigmoid: return "sigmoid";
    case LayerKind::kMaxPool2: return "maxpool2";
    case LayerKind::kUpsample2: return "upsample2";
    case LayerKind::kConcat: return "concat";
  }
  return "?";
}

LayerKind parse_layer_kind(std::string_view name) {
  for (LayerKind k : {LayerKind::kConv, LayerKind::kRelu, LayerKind::kSigmoid, LayerKind::kMaxPool2,
                      LayerKind::kUpsample2, LayerKind::kConcat}) {
    if (layer_kind_name(k) == name) return k;
  }
  fail(ErrorCode::kFormat, "unknown layer kind '" + std::string(name) + "'");
}

std::vector<LayerInfo> validate(const NetworkSpec& spec) {
  if (spec.input_channels <= 0) fail(ErrorCode::kInvalidArgument, "spec: input_channels must be positive");
  std::unordered_map<std::string, int> index;
  std::vector<LayerInfo> info(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const std::string where = "spec: layer '" + l.id + "'";
    if (l.id.empty() || l.id == kInputId) fail(ErrorCode::kInvalidArgument, "spec: invalid layer id '" + l.id + "'");
    if (index.contains(l.id)) fail(ErrorCode::kInvalidArgument, "spec: duplicate layer id '" + l.id + "'");

    const std::size_t arity = l.kind == LayerKind::kConcat ? 2 : 1;
    if (l.inputs.size() != arity) {
      fail(ErrorCode::kInvalidArgument, where + " expects " + std::to_string(arity) + " input(s)");
    }
    std::vector<int> channels, depths;
    for (const std::string& in : l.inputs) {
      if (in == kInputId) {
        info[i].input_index.push_back(-1);
        channels.push_back(spec.input_channels);
        depths.push_back(0);
        continue;
      }
      auto it = index.find(in);
      if (it == index.end()) {
        fail(ErrorCode::kInvalidArgument, where + " consumes '" + in + "', which is not defined before it");
      }
      info[i].input_index.push_back(it->second);
      channels.push_back(info[it->second].channels);
      depths.push_back(info[it->second].depth);
    }

    LayerInfo& li = info[i];
    li.channels = channels[0];
    li.depth = depths[0];
    switch (l.kind) {
      case LayerKind::kConv:
        if (l.filters <= 0) fail(ErrorCode::kInvalidArgument, where + " needs a positive filter count");
        if (l.kernel_h <= 0 || l.kernel_w <= 0 || l.kernel_h % 2 == 0 || l.kernel_w % 2 == 0) {
          fail(ErrorCode::kInvalidArgument, where + " needs odd kernel extents");
        }
        li.channels = l.filters;
        break;
      case LayerKind::kMaxPool2:
        li.depth += 1;
        break;
      case LayerKind::kUpsample2:
        if (li.depth == 0) fail(ErrorCode::kInvalidArgument, where + " up-samples above input resolution");
        li.depth -= 1;
        break;
      case LayerKind::kConcat:
        if (depths[0] != depths[1]) {
          fail(ErrorCode::kInvalidArgument, where + " concatenates tensors at different resolutions");
        }
        li.channels = channels[0] + channels[1];
        break;
      default:
        break;
    }
    index.emplace(l.id, static_cast<int>(i));
  }

  auto it = index.find(spec.output);
  if (it == index.end()) fail(ErrorCode::kInvalidArgument, "spec: output '" + spec.output + "' is not a layer");
  const int out = it->second;
  if (spec.layers[out].kind != LayerKind::kSigmoid || info[out].channels != 1) {
    fail(ErrorCode::kInvalidArgument, "spec: output layer must be a sigmoid with 1 channel");
  }
  if (info[out].depth != 0) fail(ErrorCode::kInvalidArgument, "spec: output is not at input resolution");
  if (spec.strict_pooling) {
    int deepest = 0;
    for (const LayerInfo& li : info) deepest = std::max(deepest, li.depth);
    if (deepest != 2) {
      fail(ErrorCode::kInvalidArgument, "spec: strict-pooling networks must pool down exactly two levels (found " +
                                            std::to_string(deepest) + ")");
    }
  }
  return info;
}

std::size_t parameter_count(const NetworkSpec& spec) {
  if (spec.layers.empty()) return 0;
  std::unordered_map<std::string, int> channels;
  channels[std::string(kInputId)] = spec.input_channels;
  std::size_t total = 0;
  for (const LayerSpec& l : spec.layers) {
    int c = 0;
    for (const auto& in : l.inputs) {
      auto it = channels.find(in);
      if (it == channels.end()) fail(ErrorCode::kInvalidArgument, "spec: unknown input '" + in + "'");
      c += it->second;
    }
    if (l.kind == LayerKind::kConv) {
      total += static_cast<std::size_t>(l.kernel_h) * l.kernel_w * c * l.filters + l.filters;
      c = l.filters;
    } else if (l.kind != LayerKind::kConcat && !l.inputs.empty()) {
      c = channels[l.inputs[0]];
    }
    channels[l.id] = c;
  }
  return total;
}

int size_multiple(const NetworkSpec& spec) {
  int depth = 0;
  for (const LayerInfo& li : validate(spec)) depth = std::max(depth, li.depth);
  return 1 << depth;
}

int receptive_radius(const NetworkSpec& spec) {
  const auto info = validate(spec);
  std::vector<int> radius(spec.layers.size(), 0);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    int r = 0;
    for (int j : info[i].input_index) r = std::max(r, j < 0 ? 0 : radius[j]);
    const int in_depth = info[i].input_index[0] < 0 ? 0 : info[info[i].input_index[0]].depth;
    const int scale = 1 << in_depth;
    switch (l.kind) {
      case LayerKind::kConv: r += std::max(l.kernel_h, l.kernel_w) / 2 * scale; break;
      case LayerKind::kUpsample2: r += scale / 2; break;
      default: break;
    }
    radius[i] = r;
  }
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (spec.layers[i].id == spec.output) return radius[i];
  }
  return 0;
}

template <typename T>
std::size_t ParameterSet<T>::count() const {
  std::size_t n = 0;
  for (const auto& [id, lp] : layers) n += lp.count();
  return n;
}

ParameterSet<float> init_params(const NetworkSpec& spec, std::uint64_t seed) {
  const auto info = validate(spec);
  ParameterSet<float> p;
  p.seed = seed;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (l.kind != LayerKind::kConv) continue;
    const int j = info[i].input_index[0];
    const int cin = j < 0 ? spec.input_channels : info[j].channels;
    LayerParams<float> lp(l.filters, cin, l.kernel_h, l.kernel_w);
    const double bound = std::sqrt(6.0 / (static_cast<double>(cin) * l.kernel_h * l.kernel_w));
    for (float& w : lp.kernels) {
      const double u = static_cast<double>(rng() >> 11) * 0x1p-53;
      w = static_cast<float>((2.0 * u - 1.0) * bound);
    }
    p.layers.emplace(l.id, std::move(lp));
  }
  return p;
}

template <typename T>
void check_params(const NetworkSpec& spec, const ParameterSet<T>& params) {
  const auto info = validate(spec);
  std::size_t convs = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (l.kind != LayerKind::kConv) continue;
    ++convs;
    auto it = params.layers.find(l.id);
    if (it == params.layers.end()) fail(ErrorCode::kState, "parameters missing for conv layer '" + l.id + "'");
    const int j = info[i].input_index[0];
    const int cin = j < 0 ? spec.input_channels : info[j].channels;
    const LayerParams<T>& lp = it->second;
    if (lp.out_channels != l.filters || lp.in_channels != cin || lp.kernel_h != l.kernel_h ||
        lp.kernel_w != l.kernel_w) {
      fail(ErrorCode::kShape, "parameters for '" + l.id + "' do not match the layer declaration");
    }
    lp.validate();
  }
  if (convs != params.layers.size()) {
    fail(ErrorCode::kState, "parameter set has layers that are not conv layers of the spec");
  }
}

template <typename T>
ForwardResult<T> forward(const NetworkSpec& spec, const ParameterSet<T>& params, const BasicTensor<T>& input,
                         bool record) {
  auto info = validate(spec);
  check_params(spec, params);
  if (input.c() != spec.input_channels) {
    fail(ErrorCode::kShape, "forward: input has " + std::to_string(input.c()) + " channels, network expects " +
                                std::to_string(spec.input_channels));
  }
  int multiple = 1;
  for (const LayerInfo& li : info) multiple = std::max(multiple, 1 << li.depth);
  if (spec.strict_pooling) multiple = std::max(multiple, 4);
  if (input.h() % multiple != 0 || input.w() % multiple != 0) {
    fail(ErrorCode::kShape, "forward: input " + std::to_string(input.h()) + "x" + std::to_string(input.w()) +
                                " is not a multiple of " + std::to_string(multiple) + "; resize it first");
  }

  const std::size_t L = spec.layers.size();
  std::size_t out_index = 0;
  std::vector<std::size_t> last_use(L, 0);
  for (std::size_t i = 0; i < L; ++i) {
    if (spec.layers[i].id == spec.output) out_index = i;
    for (int j : info[i].input_index) {
      if (j >= 0) last_use[j] = i;
    }
  }

  std::vector<BasicTensor<T>> acts(L);
  std::map<std::size_t, std::vector<std::uint32_t>> argmax;
  for (std::size_t i = 0; i < L; ++i) {
    const LayerSpec& l = spec.layers[i];
    auto arg = [&](int k) -> const BasicTensor<T>& {
      const int j = info[i].input_index[k];
      return j < 0 ? input : acts[j];
    };
    switch (l.kind) {
      case LayerKind::kConv: acts[i] = conv2d_forward(arg(0), params.layers.at(l.id)); break;
      case LayerKind::kRelu: acts[i] = relu(arg(0)); break;
      case LayerKind::kSigmoid: acts[i] = sigmoid(arg(0)); break;
      case LayerKind::kMaxPool2: {
        auto r = maxpool2(arg(0));
        acts[i] = std::move(r.output);
        if (record) argmax.emplace(i, std::move(r.argmax));
        break;
      }
      case LayerKind::kUpsample2: acts[i] = upsample2(arg(0)); break;
      case LayerKind::kConcat: acts[i] = concat_channels(arg(0), arg(1)); break;
    }
    if (!record) {
      for (int j : info[i].input_index) {
        if (j >= 0 && last_use[j] == i && static_cast<std::size_t>(j) != out_index) acts[j] = BasicTensor<T>();
      }
    }
  }

  ForwardResult<T> result;
  if (record) {
    result.output = acts[out_index];
    result.tape = Tape<T>{&spec, &params, std::move(info), input, std::move(acts), std::move(argmax)};
  } else {
    result.output = std::move(acts[out_index]);
  }
  return result;
}

template <typename T>
Gradients<T> backward(const std::optional<Tape<T>>& tape_opt, const BasicTensor<T>& grad_out) {
  if (!tape_opt) fail(ErrorCode::kState, "backward: forward was run without recording a tape");
  const Tape<T>& tape = *tape_opt;
  const NetworkSpec& spec = *tape.spec;
  const std::size_t L = spec.layers.size();

  Gradients<T> g;
  g.params.seed = tape.params->seed;
  for (const auto& [id, lp] : tape.params->layers) {
    g.params.layers.emplace(id, LayerParams<T>(lp.out_channels, lp.in_channels, lp.kernel_h, lp.kernel_w));
  }
  g.input = BasicTensor<T>(tape.input.shape());

  std::vector<BasicTensor<T>> grads(L);
  std::vector<char> has(L, 0);
  auto accumulate = [&](int j, BasicTensor<T>&& t) {
    BasicTensor<T>& dst = j < 0 ? g.input : grads[j];
    if (j >= 0 && !has[j]) {
      dst = std::move(t);
      has[j] = 1;
      return;
    }
    T* d = dst.data();
    const T* s = t.data();
    for (std::size_t k = 0; k < dst.size(); ++k) d[k] += s[k];
  };

  std::size_t out_index = 0;
  for (std::size_t i = 0; i < L; ++i) {
    if (spec.layers[i].id == spec.output) out_index = i;
  }
  if (grad_out.shape() != tape.activations[out_index].shape()) {
    fail(ErrorCode::kShape, "backward: grad_out " + to_string(grad_out.shape()) + " does not match output " +
                                to_string(tape.activations[out_index].shape()));
  }
  grads[out_index] = grad_out;
  has[out_index] = 1;

  for (std::size_t ii = L; ii-- > 0;) {
    if (!has[ii]) continue;
    const LayerSpec& l = spec.layers[ii];
    const auto& in_idx = tape.info[ii].input_index;
    auto act = [&](int k) -> const BasicTensor<T>& {
      const int j = in_idx[k];
      return j < 0 ? tape.input : tape.activations[j];
    };
    const BasicTensor<T>& go = grads[ii];
    switch (l.kind) {
      case LayerKind::kConv: {
        auto cg = conv2d_backward(act(0), tape.params->layers.at(l.id), go);
        g.params.layers[l.id] = std::move(cg.params);
        accumulate(in_idx[0], std::move(cg.input));
        break;
      }
      case LayerKind::kRelu: accumulate(in_idx[0], relu_backward(act(0), go)); break;
      case LayerKind::kSigmoid: accumulate(in_idx[0], sigmoid_backward(tape.activations[ii], go)); break;
      case LayerKind::kMaxPool2:
        accumulate(in_idx[0], maxpool2_backward(act(0).shape(), tape.pool_argmax.at(ii), go));
        break;
      case LayerKind::kUpsample2: accumulate(in_idx[0], upsample2_backward(go)); break;
      case LayerKind::kConcat: {
        auto [ga, gb] = concat_backward(go, act(0).c());
        accumulate(in_idx[0], std::move(ga));
        accumulate(in_idx[1], std::move(gb));
        break;
      }
    }
    grads[ii] = BasicTensor<T>();
  }
  return g;
}

SpecBuilder::SpecBuilder(std::string name, int input_channels) {
  spec_.name = std::move(name);
  spec_.input_channels = input_channels;
}

std::string SpecBuilder::add(LayerKind kind, std::vector<std::string> inputs, int filters, int kernel) {
  static const std::map<LayerKind, std::string> prefix = {
      {LayerKind::kConv, "conv"},   {LayerKind::kRelu, "relu"},     {LayerKind::kSigmoid, "sigmoid"},
      {LayerKind::kMaxPool2, "pool"}, {LayerKind::kUpsample2, "up"}, {LayerKind::kConcat, "cat"}};
  LayerSpec l;
  l.id = prefix.at(kind) + std::to_string(++counters_[kind]);
  l.kind = kind;
  l.inputs = std::move(inputs);
  l.filters = filters;
  l.kernel_h = l.kernel_w = kernel;
  spec_.layers.push_back(l);
  return l.id;
}

std::string SpecBuilder::conv(const std::string& in, int filters, int kernel) {
  return add(LayerKind::kConv, {in}, filters, kernel);
}
std::string SpecBuilder::relu(const std::string& in) { return add(LayerKind::kRelu, {in}); }
std::string SpecBuilder::sigmoid(const std::string& in) { return add(LayerKind::kSigmoid, {in}); }
std::string SpecBuilder::maxpool(const std::string& in) { return add(LayerKind::kMaxPool2, {in}); }
std::string SpecBuilder::upsample(const std::string& in) { return add(LayerKind::kUpsample2, {in}); }
std::string SpecBuilder::concat(const std::string& a, const std::string& b) {
  return add(LayerKind::kConcat, {a, b});
}

NetworkSpec SpecBuilder::finish(const std::string& output, bool strict_pooling) {
  spec_.output = output;
  spec_.strict_pooling = strict_pooling;
  validate(spec_);
  return spec_;
}

template struct ParameterSet<float>;
template struct ParameterSet<double>;
template void check_params(const NetworkSpec&, const ParameterSet<float>&);
template void check_params(const NetworkSpec&, const ParameterSet<double>&);
template ForwardResult<float> forward(const NetworkSpec&, const ParameterSet<float>&, const Tensor&, bool);
template ForwardResult<double> forward(const NetworkSpec&, const ParameterSet<double>&, const TensorD&, bool);
template Gradients<float> backward(const std::optional<Tape<float>>&, const Tensor&);
template Gradients<double> backward(const std::optional<Tape<double>>&, const TensorD&);

}  // namespace p2i
