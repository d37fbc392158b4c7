#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "p2i/dataset.hpp"
#include "p2i/graph.hpp"
#include "p2i/patching.hpp"

namespace p2i {

enum class TrainMode { kPatch, kImage };

std::string_view train_mode_name(TrainMode m);
TrainMode parse_train_mode(std::string_view name);

/// Hyper-parameters of one training run. `patch_defaults` and
/// `image_defaults` give the two published configurations.
struct TrainConfig {
  TrainMode mode = TrainMode::kPatch;
  int batch_size = 32;
  double lr0 = 1.0;
  double decay_factor = 0.2;
  int plateau_patience = 5;
  double lr_floor = 1e-5;
  /// Epochs without a new best validation loss before stopping; 0 disables.
  int early_stop_patience = 30;
  /// Hard epoch cap; 0 means none.
  int max_epochs = 0;
  /// A validation loss counts as an improvement when it beats the best by more than this.
  double min_improvement = 1e-6;
  double val_fraction = 0.2;
  double rho = 0.95;
  double eps = 1e-6;
  bool augment = true;
  double max_shift = 0.1;
  std::uint64_t seed = 1;

  static TrainConfig patch_defaults();
  static TrainConfig image_defaults();

  /// Throws unless every field is in range.
  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Loss

template <typename T>
struct LossResult {
  double loss = 0.0;                // mean of per_sample
  std::vector<double> per_sample;   // one value per batch item
  BasicTensor<T> grad;              // d loss / d p, empty unless requested
};

/// Cross-entropy (summed over pixels) minus the soft Dice term
/// 2<y,p> / (<y,1> + <p,1>), per batch item, averaged over the batch.
/// Logarithm arguments are clamped below at 1e-7 and the Dice denominator
/// below at 1e-7; the gradient is exact for this clamped function.
template <typename T>
LossResult<T> combined_loss(const BasicTensor<T>& y, const BasicTensor<T>& p, bool want_grad = true);

// ---------------------------------------------------------------------------
// Optimiser and schedules

/// Running averages E[g^2] and E[dx^2], stored with the layout of the parameters.
template <typename T>
struct AdaDeltaState {
  double rho = 0.95;
  double eps = 1e-6;
  ParameterSet<T> sq_grad;
  ParameterSet<T> sq_update;
};

template <typename T>
AdaDeltaState<T> make_adadelta(const ParameterSet<T>& like, double rho = 0.95, double eps = 1e-6);

/// One AdaDelta update per element:
///   E[g^2]  <- rho E[g^2] + (1-rho) g^2
///   u       =  sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
///   E[dx^2] <- rho E[dx^2] + (1-rho) u^2
///   x       <- x - lr * u
/// Arithmetic is carried out in double and rounded once on store.
template <typename T>
void adadelta_step(ParameterSet<T>& params, const ParameterSet<T>& grads, AdaDeltaState<T>& state, double lr);

/// Multiplies the learning rate by `factor` (never below `floor`) once
/// `patience` consecutive epochs fail to improve on the best validation loss.
class PlateauScheduler {
 public:
  PlateauScheduler(double factor = 0.2, int patience = 5, double floor = 1e-5, double min_improvement = 1e-6);

  /// Feeds one epoch's validation loss and returns the learning rate for the next epoch.
  double step(double val_loss, double lr);

  double best() const { return best_; }
  int wait() const { return wait_; }
  void restore(double best, int wait) {
    best_ = best;
    wait_ = wait;
  }

 private:
  double factor_, floor_, min_improvement_;
  int patience_;
  double best_ = std::numeric_limits<double>::infinity();
  int wait_ = 0;
};

/// Stops after `patience` epochs without a new best (patience 0 disables
/// this rule) or once `max_epochs` epochs have run (0 disables the cap).
class EarlyStopper {
 public:
  EarlyStopper(int patience = 30, int max_epochs = 0, double min_improvement = 1e-6);

  /// Feeds the validation loss of 1-based `epoch`; true means stop now.
  bool update(int epoch, double val_loss);

  int best_epoch() const { return best_epoch_; }
  double best() const { return best_; }
  const std::string& reason() const { return reason_; }
  void restore(int best_epoch, double best) {
    best_epoch_ = best_epoch;
    best_ = best;
  }

 private:
  int patience_, max_epochs_;
  double min_improvement_;
  int best_epoch_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
  std::string reason_;
};

// ---------------------------------------------------------------------------
// Epoch loop

/// Aligned (input, target) pairs, each a (1,C,H,W) tensor.
struct TrainSet {
  std::vector<Tensor> inputs;
  std::vector<Tensor> targets;

  std::size_t size() const { return inputs.size(); }
};

TrainSet train_set_from_patches(const PatchDb& db);
TrainSet train_set_from_samples(const std::vector<const ImageSample*>& samples);

struct HeldOut {
  std::vector<const ImageSample*> train;
  std::vector<const ImageSample*> val;
};

/// Seeded image-level split; round(fraction * n) images (at least one) go to validation.
HeldOut hold_out(const std::vector<const ImageSample*>& samples, double fraction, std::uint64_t seed);

struct EpochRecord {
  int epoch = 0;  // 0 is the evaluation of the initial parameters
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double seconds = 0.0;
};

nlohmann::json history_to_json(const std::vector<EpochRecord>& h);
std::vector<EpochRecord> history_from_json(const nlohmann::json& j);

struct TrainResult {
  ParameterSet<float> best;
  ParameterSet<float> last;
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_val = 0.0;
  std::size_t steps = 0;
  std::string stop_reason;
};

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  /// When set, the complete loop state is written here after every epoch and
  /// an existing state with the same configuration is resumed.
  std::optional<std::filesystem::path> state_dir;
};

/// Mean combined loss over a set, evaluated in batches without updates.
double evaluate_loss(const NetworkSpec& spec, const ParameterSet<float>& params, const TrainSet& set,
                     int batch_size);

/// Mini-batch training with a seeded shuffle per epoch, optional paired
/// augmentation, plateau decay and early stopping. Epoch 0 evaluates the
/// initial parameters; the parameters with the lowest validation loss are
/// returned in `best`. Each epoch takes ceil(n / batch_size) optimiser steps.
TrainResult train_epochs(const NetworkSpec& spec, const ParameterSet<float>& init, const TrainSet& train,
                         const TrainSet& val, const TrainConfig& config, const TrainHooks& hooks = {});

}  // namespace p2i
