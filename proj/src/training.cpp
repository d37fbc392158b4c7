#include "p2i/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "p2i/checkpoint.hpp"
#include "p2i/file_util.hpp"
#include "p2i/spec_io.hpp"

namespace p2i {

using nlohmann::json;
namespace fs = std::filesystem;

std::string_view train_mode_name(TrainMode m) { return m == TrainMode::kPatch ? "patch" : "image"; }

TrainMode parse_train_mode(std::string_view name) {
  if (name == "patch") return TrainMode::kPatch;
  if (name == "image") return TrainMode::kImage;
  fail(ErrorCode::kInvalidArgument, "unknown training mode '" + std::string(name) + "' (expected patch or image)");
}

TrainConfig TrainConfig::patch_defaults() { return TrainConfig{}; }

TrainConfig TrainConfig::image_defaults() {
  TrainConfig c;
  c.mode = TrainMode::kImage;
  c.batch_size = 1;
  c.early_stop_patience = 0;
  c.max_epochs = 300;
  return c;
}

void TrainConfig::validate() const {
  auto bad = [](const std::string& what) { fail(ErrorCode::kInvalidArgument, "train config: " + what); };
  if (batch_size <= 0) bad("batch_size must be positive");
  if (!(lr0 > 0.0)) bad("lr0 must be positive");
  if (!(decay_factor > 0.0 && decay_factor <= 1.0)) bad("decay_factor must lie in (0,1]");
  if (plateau_patience <= 0) bad("plateau_patience must be positive");
  if (!(lr_floor >= 0.0)) bad("lr_floor must be non-negative");
  if (early_stop_patience < 0) bad("early_stop_patience must be non-negative");
  if (max_epochs < 0) bad("max_epochs must be non-negative");
  if (early_stop_patience == 0 && max_epochs == 0) bad("either early stopping or an epoch cap is required");
  if (!(min_improvement >= 0.0)) bad("min_improvement must be non-negative");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) bad("val_fraction must lie in (0,1)");
  if (!(rho > 0.0 && rho < 1.0)) bad("rho must lie in (0,1)");
  if (!(eps > 0.0)) bad("eps must be positive");
  if (!(max_shift >= 0.0 && max_shift < 0.5)) bad("max_shift must lie in [0,0.5)");
}

json train_config_to_json(const TrainConfig& c) {
  return json{{"mode", train_mode_name(c.mode)},
              {"batch_size", c.batch_size},
              {"lr0", c.lr0},
              {"decay_factor", c.decay_factor},
              {"plateau_patience", c.plateau_patience},
              {"lr_floor", c.lr_floor},
              {"early_stop_patience", c.early_stop_patience},
              {"max_epochs", c.max_epochs},
              {"min_improvement", c.min_improvement},
              {"val_fraction", c.val_fraction},
              {"rho", c.rho},
              {"eps", c.eps},
              {"augment", c.augment},
              {"max_shift", c.max_shift},
              {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j) {
  try {
    TrainConfig c = parse_train_mode(j.at("mode").get<std::string>()) == TrainMode::kPatch
                        ? TrainConfig::patch_defaults()
                        : TrainConfig::image_defaults();
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr0 = j.value("lr0", c.lr0);
    c.decay_factor = j.value("decay_factor", c.decay_factor);
    c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
    c.lr_floor = j.value("lr_floor", c.lr_floor);
    c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.min_improvement = j.value("min_improvement", c.min_improvement);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.rho = j.value("rho", c.rho);
    c.eps = j.value("eps", c.eps);
    c.augment = j.value("augment", c.augment);
    c.max_shift = j.value("max_shift", c.max_shift);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, std::string("train config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

template <typename T>
LossResult<T> combined_loss(const BasicTensor<T>& y, const BasicTensor<T>& p, bool want_grad) {
  if (y.shape() != p.shape()) {
    fail(ErrorCode::kShape, "combined_loss: target " + to_string(y.shape()) + " vs prediction " + to_string(p.shape()));
  }
  if (p.n() == 0 || p.shape().numel() == 0) fail(ErrorCode::kShape, "combined_loss: empty batch");
  constexpr double kLogFloor = 1e-7, kDenFloor = 1e-7;
  const int batch = p.n();
  const std::size_t per = p.size() / static_cast<std::size_t>(batch);
  LossResult<T> r;
  r.per_sample.resize(static_cast<std::size_t>(batch));
  if (want_grad) r.grad = BasicTensor<T>(p.shape());

  for (int n = 0; n < batch; ++n) {
    const T* yp = y.data() + static_cast<std::size_t>(n) * per;
    const T* pp = p.data() + static_cast<std::size_t>(n) * per;
    double ce = 0.0, yp_dot = 0.0, y_sum = 0.0, p_sum = 0.0;
    for (std::size_t i = 0; i < per; ++i) {
      const double yi = yp[i], pi = pp[i];
      ce -= yi * std::log(std::max(pi, kLogFloor)) + (1.0 - yi) * std::log(std::max(1.0 - pi, kLogFloor));
      yp_dot += yi * pi;
      y_sum += yi;
      p_sum += pi;
    }
    const double raw_den = y_sum + p_sum;
    const bool den_clamped = raw_den < kDenFloor;
    const double den = den_clamped ? kDenFloor : raw_den;
    r.per_sample[static_cast<std::size_t>(n)] = ce - 2.0 * yp_dot / den;

    if (!want_grad) continue;
    T* g = r.grad.data() + static_cast<std::size_t>(n) * per;
    const double scale = 1.0 / batch;
    for (std::size_t i = 0; i < per; ++i) {
      const double yi = yp[i], pi = pp[i];
      double d = 0.0;
      if (pi > kLogFloor) d -= yi / pi;
      if (1.0 - pi > kLogFloor) d += (1.0 - yi) / (1.0 - pi);
      // Quotient rule on 2<y,p>/den; den depends on p only when unclamped.
      d -= den_clamped ? 2.0 * yi / den : 2.0 * (yi * den - yp_dot) / (den * den);
      g[i] = static_cast<T>(d * scale);
    }
  }
  r.loss = std::accumulate(r.per_sample.begin(), r.per_sample.end(), 0.0) / batch;
  return r;
}

template LossResult<float> combined_loss(const Tensor&, const Tensor&, bool);
template LossResult<double> combined_loss(const TensorD&, const TensorD&, bool);

template <typename T>
AdaDeltaState<T> make_adadelta(const ParameterSet<T>& like, double rho, double eps) {
  AdaDeltaState<T> s;
  s.rho = rho;
  s.eps = eps;
  s.sq_grad = like;
  for (auto& [id, lp] : s.sq_grad.layers) {
    std::fill(lp.kernels.begin(), lp.kernels.end(), T(0));
    std::fill(lp.biases.begin(), lp.biases.end(), T(0));
  }
  s.sq_update = s.sq_grad;
  return s;
}

namespace {

template <typename T>
void adadelta_span(std::vector<T>& x, const std::vector<T>& g, std::vector<T>& eg, std::vector<T>& ed, double rho,
                   double eps, double lr) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double gi = g[i];
    const double eg2 = rho * eg[i] + (1.0 - rho) * gi * gi;
    const double u = std::sqrt(ed[i] + eps) / std::sqrt(eg2 + eps) * gi;
    eg[i] = static_cast<T>(eg2);
    ed[i] = static_cast<T>(rho * ed[i] + (1.0 - rho) * u * u);
    x[i] = static_cast<T>(x[i] - lr * u);
  }
}

}  // namespace

template <typename T>
void adadelta_step(ParameterSet<T>& params, const ParameterSet<T>& grads, AdaDeltaState<T>& state, double lr) {
  auto same_layout = [](const ParameterSet<T>& a, const ParameterSet<T>& b) {
    if (a.layers.size() != b.layers.size()) return false;
    for (auto ia = a.layers.begin(), ib = b.layers.begin(); ia != a.layers.end(); ++ia, ++ib) {
      if (ia->first != ib->first || ia->second.kernels.size() != ib->second.kernels.size() ||
          ia->second.biases.size() != ib->second.biases.size()) {
        return false;
      }
    }
    return true;
  };
  if (!same_layout(params, grads) || !same_layout(params, state.sq_grad) || !same_layout(params, state.sq_update)) {
    fail(ErrorCode::kShape, "adadelta: parameters, gradients and accumulators differ in layout");
  }
  for (auto& [id, lp] : params.layers) {
    const LayerParams<T>& g = grads.layers.at(id);
    LayerParams<T>& eg = state.sq_grad.layers.at(id);
    LayerParams<T>& ed = state.sq_update.layers.at(id);
    adadelta_span(lp.kernels, g.kernels, eg.kernels, ed.kernels, state.rho, state.eps, lr);
    adadelta_span(lp.biases, g.biases, eg.biases, ed.biases, state.rho, state.eps, lr);
  }
}

template AdaDeltaState<float> make_adadelta(const ParameterSet<float>&, double, double);
template AdaDeltaState<double> make_adadelta(const ParameterSet<double>&, double, double);
template void adadelta_step(ParameterSet<float>&, const ParameterSet<float>&, AdaDeltaState<float>&, double);
template void adadelta_step(ParameterSet<double>&, const ParameterSet<double>&, AdaDeltaState<double>&, double);

PlateauScheduler::PlateauScheduler(double factor, int patience, double floor, double min_improvement)
    : factor_(factor), floor_(floor), min_improvement_(min_improvement), patience_(patience) {}

double PlateauScheduler::step(double val_loss, double lr) {
  if (val_loss < best_ - min_improvement_) {
    best_ = val_loss;
    wait_ = 0;
    return lr;
  }
  if (++wait_ < patience_) return lr;
  wait_ = 0;
  return std::max(lr * factor_, floor_);
}

EarlyStopper::EarlyStopper(int patience, int max_epochs, double min_improvement)
    : patience_(patience), max_epochs_(max_epochs), min_improvement_(min_improvement) {}

bool EarlyStopper::update(int epoch, double val_loss) {
  if (val_loss < best_ - min_improvement_) {
    best_ = val_loss;
    best_epoch_ = epoch;
  }
  if (max_epochs_ > 0 && epoch >= max_epochs_) {
    reason_ = "epoch cap " + std::to_string(max_epochs_) + " reached";
    return true;
  }
  if (patience_ > 0 && epoch - best_epoch_ >= patience_) {
    reason_ = "no improvement for " + std::to_string(patience_) + " epochs (best at epoch " +
              std::to_string(best_epoch_) + ")";
    return true;
  }
  return false;
}

// ---------------------------------------------------------------------------

TrainSet train_set_from_patches(const PatchDb& db) {
  TrainSet s;
  s.inputs.reserve(db.size());
  s.targets.reserve(db.size());
  for (int i = 0; i < static_cast<int>(db.size()); ++i) {
    s.inputs.push_back(batch_item(db.images, i));
    s.targets.push_back(batch_item(db.masks, i));
  }
  return s;
}

TrainSet train_set_from_samples(const std::vector<const ImageSample*>& samples) {
  TrainSet s;
  for (const ImageSample* x : samples) {
    s.inputs.push_back(x->image);
    s.targets.push_back(x->mask);
  }
  return s;
}

HeldOut hold_out(const std::vector<const ImageSample*>& samples, double fraction, std::uint64_t seed) {
  if (samples.size() < 2) {
    fail(ErrorCode::kInvalidArgument, "validation hold-out needs at least two training images, got " +
                                          std::to_string(samples.size()));
  }
  if (!(fraction > 0.0 && fraction < 1.0)) fail(ErrorCode::kInvalidArgument, "validation fraction must lie in (0,1)");
  const std::size_t n = samples.size();
  const std::size_t n_val =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))), 1, n - 1);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> is_val(n, false);
  for (std::size_t i = 0; i < n_val; ++i) is_val[order[i]] = true;
  HeldOut h;
  for (std::size_t i = 0; i < n; ++i) (is_val[i] ? h.val : h.train).push_back(samples[i]);
  return h;
}

json history_to_json(const std::vector<EpochRecord>& h) {
  json a = json::array();
  for (const EpochRecord& r : h) {
    a.push_back({{"epoch", r.epoch}, {"lr", r.lr}, {"train_loss", r.train_loss}, {"val_loss", r.val_loss},
                 {"seconds", r.seconds}});
  }
  return a;
}

std::vector<EpochRecord> history_from_json(const json& j) {
  std::vector<EpochRecord> h;
  for (const json& r : j) {
    h.push_back({r.at("epoch").get<int>(), r.at("lr").get<double>(), r.at("train_loss").get<double>(),
                 r.at("val_loss").get<double>(), r.value("seconds", 0.0)});
  }
  return h;
}

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) { return mix(a ^ mix(b)); }

Tensor stack(const std::vector<Tensor>& items, const std::vector<std::size_t>& idx, std::size_t b, std::size_t e) {
  std::vector<Tensor> part;
  part.reserve(e - b);
  for (std::size_t i = b; i < e; ++i) part.push_back(items[idx[i]]);
  return stack_batch<float>(part);
}

struct LoopState {
  int epoch = 0;
  double lr = 0.0;
  std::size_t steps = 0;
  bool finished = false;
  std::string stop_reason;
  double sched_best = 0.0;
  int sched_wait = 0;
  int stop_best_epoch = 0;
  double stop_best = 0.0;
  std::vector<EpochRecord> history;
};

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double from_json_or_inf(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

std::string state_key(const NetworkSpec& spec, const ParameterSet<float>& init, const TrainConfig& c,
                      const TrainSet& train, const TrainSet& val) {
  json k{{"spec", to_hex(spec_hash(spec))},
         {"init", to_hex(checkpoint_hash(spec, init))},
         {"config", train_config_to_json(c)},
         {"train", train.size()},
         {"val", val.size()}};
  return to_hex(sha256(k.dump()));
}

void save_state(const fs::path& dir, const std::string& key, const NetworkSpec& spec, const LoopState& s,
                const ParameterSet<float>& params, const ParameterSet<float>& best, const AdaDeltaState<float>& opt) {
  save_checkpoint(dir / "last.ckpt", spec, params);
  save_checkpoint(dir / "best.ckpt", spec, best);
  save_checkpoint(dir / "adadelta_sq_grad.ckpt", spec, opt.sq_grad);
  save_checkpoint(dir / "adadelta_sq_update.ckpt", spec, opt.sq_update);
  json j{{"key", key},
         {"epoch", s.epoch},
         {"lr", s.lr},
         {"steps", s.steps},
         {"finished", s.finished},
         {"stop_reason", s.stop_reason},
         {"scheduler", {{"best", finite_or_null(s.sched_best)}, {"wait", s.sched_wait}}},
         {"stopper", {{"best_epoch", s.stop_best_epoch}, {"best", finite_or_null(s.stop_best)}}},
         {"history", history_to_json(s.history)}};
  write_text_atomic(dir / "state.json", j.dump(2));
}

bool load_state(const fs::path& dir, const std::string& key, const NetworkSpec& spec, LoopState& s,
                ParameterSet<float>& params, ParameterSet<float>& best, AdaDeltaState<float>& opt) {
  if (!fs::exists(dir / "state.json")) return false;
  json j;
  try {
    j = json::parse(read_text(dir / "state.json"));
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, "training state " + (dir / "state.json").string() + ": " + e.what());
  }
  if (j.value("key", "") != key) {
    fail(ErrorCode::kState, "training state in " + dir.string() +
                                " belongs to a different run (spec, initial parameters, config or data differ); remove it to start over");
  }
  s.epoch = j.at("epoch").get<int>();
  s.lr = j.at("lr").get<double>();
  s.steps = j.at("steps").get<std::size_t>();
  s.finished = j.at("finished").get<bool>();
  s.stop_reason = j.at("stop_reason").get<std::string>();
  s.sched_best = from_json_or_inf(j.at("scheduler").at("best"));
  s.sched_wait = j.at("scheduler").at("wait").get<int>();
  s.stop_best_epoch = j.at("stopper").at("best_epoch").get<int>();
  s.stop_best = from_json_or_inf(j.at("stopper").at("best"));
  s.history = history_from_json(j.at("history"));
  params = load_checkpoint_for(dir / "last.ckpt", spec);
  best = load_checkpoint_for(dir / "best.ckpt", spec);
  opt.sq_grad = load_checkpoint_for(dir / "adadelta_sq_grad.ckpt", spec);
  opt.sq_update = load_checkpoint_for(dir / "adadelta_sq_update.ckpt", spec);
  return true;
}

}  // namespace

double evaluate_loss(const NetworkSpec& spec, const ParameterSet<float>& params, const TrainSet& set,
                     int batch_size) {
  if (set.size() == 0) fail(ErrorCode::kInvalidArgument, "evaluate_loss: empty set");
  std::vector<std::size_t> idx(set.size());
  std::iota(idx.begin(), idx.end(), 0);
  double total = 0.0;
  for (std::size_t b = 0; b < set.size(); b += static_cast<std::size_t>(batch_size)) {
    const std::size_t e = std::min(set.size(), b + static_cast<std::size_t>(batch_size));
    const Tensor out = forward(spec, params, stack(set.inputs, idx, b, e), false).output;
    const LossResult<float> l = combined_loss(stack(set.targets, idx, b, e), out, false);
    for (double v : l.per_sample) total += v;
  }
  return total / static_cast<double>(set.size());
}

TrainResult train_epochs(const NetworkSpec& spec, const ParameterSet<float>& init, const TrainSet& train,
                         const TrainSet& val, const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  check_params(spec, init);
  if (train.size() == 0) fail(ErrorCode::kInvalidArgument, "train_epochs: empty training split");
  if (val.size() == 0) fail(ErrorCode::kInvalidArgument, "train_epochs: empty validation split");
  if (train.inputs.size() != train.targets.size() || val.inputs.size() != val.targets.size()) {
    fail(ErrorCode::kInvalidArgument, "train_epochs: inputs and targets differ in count");
  }
  using clock = std::chrono::steady_clock;
  const std::size_t batch = static_cast<std::size_t>(config.batch_size);
  // Evaluation never updates, so it may batch freely when sizes agree.
  const int eval_batch = config.mode == TrainMode::kImage ? 1 : config.batch_size;

  ParameterSet<float> params = init;
  ParameterSet<float> best = init;
  AdaDeltaState<float> opt = make_adadelta(init, config.rho, config.eps);
  PlateauScheduler sched(config.decay_factor, config.plateau_patience, config.lr_floor, config.min_improvement);
  EarlyStopper stopper(config.early_stop_patience, config.max_epochs, config.min_improvement);
  LoopState s;
  s.lr = config.lr0;

  std::string key;
  if (hooks.state_dir) {
    key = state_key(spec, init, config, train, val);
    if (load_state(*hooks.state_dir, key, spec, s, params, best, opt)) {
      params.seed = best.seed = init.seed;
      sched.restore(s.sched_best, s.sched_wait);
      stopper.restore(s.stop_best_epoch, s.stop_best);
    }
  }
  auto record = [&](const EpochRecord& r) {
    s.history.push_back(r);
    s.sched_best = sched.best();
    s.sched_wait = sched.wait();
    s.stop_best_epoch = stopper.best_epoch();
    s.stop_best = stopper.best();
    if (hooks.state_dir) save_state(*hooks.state_dir, key, spec, s, params, best, opt);
    if (hooks.on_epoch) hooks.on_epoch(r);
  };

  if (s.history.empty()) {
    const auto t0 = clock::now();
    EpochRecord r;
    r.lr = s.lr;
    r.train_loss = evaluate_loss(spec, params, train, eval_batch);
    r.val_loss = evaluate_loss(spec, params, val, eval_batch);
    r.seconds = std::chrono::duration<double>(clock::now() - t0).count();
    sched.step(r.val_loss, s.lr);
    stopper.update(0, r.val_loss);
    record(r);
  }

  std::vector<std::size_t> order(train.size());
  while (!s.finished) {
    const int epoch = s.epoch + 1;
    const auto t0 = clock::now();
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix(config.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += batch) {
      const std::size_t e = std::min(order.size(), b + batch);
      std::vector<Tensor> xs, ys;
      for (std::size_t i = b; i < e; ++i) {
        const Tensor& x = train.inputs[order[i]];
        const Tensor& y = train.targets[order[i]];
        if (config.augment) {
          const AugmentParams a =
              sample_augment({x.h(), x.w()}, mix(mix(config.seed, static_cast<std::uint64_t>(epoch)), order[i]),
                             config.max_shift);
          xs.push_back(apply_augment(x, a));
          ys.push_back(apply_augment(y, a));
        } else {
          xs.push_back(x);
          ys.push_back(y);
        }
      }
      const ForwardResult<float> fr = forward(spec, params, stack_batch<float>(xs), true);
      const LossResult<float> l = combined_loss(stack_batch<float>(ys), fr.output, true);
      const Gradients<float> g = backward(fr.tape, l.grad);
      adadelta_step(params, g.params, opt, s.lr);
      for (double v : l.per_sample) loss_sum += v;
      ++s.steps;
    }

    EpochRecord r;
    r.epoch = epoch;
    r.lr = s.lr;
    r.train_loss = loss_sum / static_cast<double>(train.size());
    r.val_loss = evaluate_loss(spec, params, val, eval_batch);
    r.seconds = std::chrono::duration<double>(clock::now() - t0).count();
    if (r.val_loss < stopper.best() - config.min_improvement) best = params;
    s.epoch = epoch;
    s.lr = sched.step(r.val_loss, s.lr);
    if (stopper.update(epoch, r.val_loss)) {
      s.finished = true;
      s.stop_reason = stopper.reason();
    }
    record(r);
  }

  TrainResult out;
  out.best = std::move(best);
  out.last = std::move(params);
  out.history = s.history;
  out.best_epoch = stopper.best_epoch();
  out.best_val = stopper.best();
  out.steps = s.steps;
  out.stop_reason = s.stop_reason;
  return out;
}

}  // namespace p2i
