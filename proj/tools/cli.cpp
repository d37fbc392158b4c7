#include "cli.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "p2i/checkpoint.hpp"
#include "p2i/dataset.hpp"
#include "p2i/error.hpp"
#include "p2i/file_util.hpp"
#include "p2i/image_io.hpp"
#include "p2i/metrics.hpp"
#include "p2i/parallel.hpp"
#include "p2i/reference_nets.hpp"
#include "p2i/spec_io.hpp"
#include "p2i/synthetic.hpp"
#include "p2i/training.hpp"
#include "p2i/transfer.hpp"

namespace p2i::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Context {
  std::ostream& out;
  std::ostream& err;
  json argv = json::array();
};

Size2 parse_size(const std::string& text) {
  int h = 0, w = 0;
  char tail = 0;
  if (std::sscanf(text.c_str(), "%dx%d%c", &h, &w, &tail) == 2 && h > 0 && w > 0) return {h, w};
  if (std::sscanf(text.c_str(), "%d%c", &h, &tail) == 1 && h > 0) return {h, h};
  fail(ErrorCode::kInvalidArgument, "cannot parse size '" + text + "' (expected HxW or N)");
}

json invocation(const Context& ctx) { return {{"argv", ctx.argv}, {"threads", thread_count()}}; }

json file_input(const fs::path& path) { return {{"path", path.generic_string()}, {"sha256", to_hex(sha256_file(path))}}; }

std::string relative_to(const fs::path& target, const fs::path& from_dir) {
  return fs::relative(fs::absolute(target), fs::absolute(from_dir.empty() ? fs::path(".") : from_dir)).generic_string();
}

// ---------------------------------------------------------------------------
// Flag groups

struct TrainFlags {
  std::optional<int> batch_size, plateau_patience, early_stop_patience, max_epochs;
  std::optional<double> lr0, decay_factor, lr_floor, min_improvement, val_fraction, rho, eps, max_shift;
  std::optional<std::uint64_t> seed;
  bool no_augment = false;

  void add(CLI::App* cmd, const std::string& prefix = "") {
    const std::string p = "--" + prefix;
    cmd->add_option(p + "batch-size", batch_size, "Mini-batch size (32 patch-level, 1 image-level)");
    cmd->add_option(p + "lr0", lr0, "Initial learning rate (1.0)");
    cmd->add_option(p + "decay-factor", decay_factor, "Plateau decay factor (0.2)");
    cmd->add_option(p + "plateau-patience", plateau_patience, "Epochs without improvement before decay (5)");
    cmd->add_option(p + "lr-floor", lr_floor, "Learning-rate floor (1e-5)");
    cmd->add_option(p + "early-stop-patience", early_stop_patience,
                    "Epochs without improvement before stopping; 0 disables (30 patch-level, 0 image-level)");
    cmd->add_option(p + "max-epochs", max_epochs, "Epoch cap; 0 means none (0 patch-level, 300 image-level)");
    cmd->add_option(p + "min-improvement", min_improvement, "Smallest validation-loss decrease that counts (1e-6)");
    cmd->add_option(p + "val-fraction", val_fraction, "Share of training images held out for validation (0.2)");
    cmd->add_option(p + "rho", rho, "AdaDelta decay rate (0.95)");
    cmd->add_option(p + "eps", eps, "AdaDelta epsilon (1e-6)");
    cmd->add_option(p + "max-shift", max_shift, "Largest augmentation translation as a fraction of the side (0.1)");
    cmd->add_option(p + "seed", seed, "Seed for initialisation, shuffling and augmentation (1)");
    cmd->add_flag(p + "no-augment", no_augment, "Disable flips and translations");
  }

  TrainConfig apply(TrainConfig c) const {
    if (batch_size) c.batch_size = *batch_size;
    if (lr0) c.lr0 = *lr0;
    if (decay_factor) c.decay_factor = *decay_factor;
    if (plateau_patience) c.plateau_patience = *plateau_patience;
    if (lr_floor) c.lr_floor = *lr_floor;
    if (early_stop_patience) c.early_stop_patience = *early_stop_patience;
    if (max_epochs) c.max_epochs = *max_epochs;
    if (min_improvement) c.min_improvement = *min_improvement;
    if (val_fraction) c.val_fraction = *val_fraction;
    if (rho) c.rho = *rho;
    if (eps) c.eps = *eps;
    if (max_shift) c.max_shift = *max_shift;
    if (seed) c.seed = *seed;
    if (no_augment) c.augment = false;
    c.validate();
    return c;
  }
};

struct StrategyFlags {
  std::string kind = "grid";
  PatchStrategy s;

  void add(CLI::App* cmd) {
    cmd->add_option("--strategy", kind, "Patch strategy: grid (vessels) or balanced (optic disc)")
        ->capture_default_str();
    cmd->add_option("--patch-size", s.patch_size, "Patch side in pixels")->capture_default_str();
    cmd->add_option("--stride", s.stride, "Grid stride")->capture_default_str();
    cmd->add_flag("--clamp-last", s.clamp_last, "Add a final grid window flush with the border");
    cmd->add_option("--n-pos", s.n_pos, "Balanced strategy: positive-centred patches per image")->capture_default_str();
    cmd->add_option("--n-neg", s.n_neg, "Balanced strategy: negative-centred patches per image")->capture_default_str();
    cmd->add_option("--sample-seed", s.seed, "Balanced strategy: sampling seed")->capture_default_str();
  }

  PatchStrategy get() const { return parse_strategy_kind(kind, s); }
};

struct PreprocessFlags {
  std::optional<double> gamma;
  bool no_gamma = false, gamma_darken = false, no_clahe = false, no_grayscale = false;
  std::optional<int> clahe_tiles, clahe_bins;
  std::optional<double> clahe_clip;
  std::optional<std::string> target;

  void add(CLI::App* cmd) {
    cmd->add_option("--target", target, "Resize target HxW, both multiples of 4 (default: round up to 4)");
    cmd->add_option("--gamma", gamma, "Gamma exponent (1.7)");
    cmd->add_flag("--no-gamma", no_gamma, "Skip gamma correction");
    cmd->add_flag("--gamma-darken", gamma_darken, "Apply v^gamma instead of the brightening v^(1/gamma)");
    cmd->add_flag("--no-clahe", no_clahe, "Skip CLAHE");
    cmd->add_option("--clahe-tiles", clahe_tiles, "CLAHE tiles per side (8)");
    cmd->add_option("--clahe-clip", clahe_clip, "CLAHE clip limit (2.0)");
    cmd->add_option("--clahe-bins", clahe_bins, "CLAHE histogram bins (256)");
    cmd->add_flag("--no-grayscale", no_grayscale, "Keep colour channels");
  }

  void apply(DatasetManifest& m) const {
    PreprocessConfig& c = m.preprocess;
    if (gamma) c.gamma = *gamma;
    if (no_gamma) c.apply_gamma = false;
    if (gamma_darken) c.gamma_brighten = false;
    if (no_clahe) c.apply_clahe = false;
    if (clahe_tiles) c.clahe.tiles_y = c.clahe.tiles_x = *clahe_tiles;
    if (clahe_clip) c.clahe.clip = *clahe_clip;
    if (clahe_bins) c.clahe.bins = *clahe_bins;
    if (no_grayscale) c.grayscale = false;
    if (target) {
      const Size2 t = parse_size(*target);
      if (t.h % 4 != 0 || t.w % 4 != 0) {
        fail(ErrorCode::kInvalidArgument, "resize target " + *target + " must be multiples of 4");
      }
      m.target = t;
    }
  }
};

void print_epoch(std::ostream& out, std::string_view label, const EpochRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "[%s] epoch %4d  lr %.3g  train %.6f  val %.6f  (%.1fs)\n", std::string(label).c_str(),
                r.epoch, r.lr, r.train_loss, r.val_loss, r.seconds);
  out << buf << std::flush;
}

json train_summary(const TrainResult& r) {
  return {{"best_epoch", r.best_epoch},
          {"best_val_loss", r.best_val},
          {"epochs", r.history.empty() ? 0 : r.history.back().epoch},
          {"steps", r.steps},
          {"stop_reason", r.stop_reason}};
}

// ---------------------------------------------------------------------------
// Subcommands

struct PrepareArgs {
  fs::path manifest, out;
  bool force = false;
  PreprocessFlags pre;
};

void cmd_prepare(const Context& ctx, const PrepareArgs& a) {
  DatasetManifest m = load_manifest(a.manifest);
  a.pre.apply(m);
  const PrepareResult r = prepare_dataset(m, a.out, a.force);
  ctx.out << (r.cache_hit ? "cache hit: " : "prepared: ") << m.entries.size() << " images in " << r.dir.string()
          << "\n";
}

struct SynthArgs {
  fs::path out;
  int count = 30;
  std::string size = "256x256";
  int train = 20;
  std::uint64_t seed = 2024;
};

void cmd_synth(const Context& ctx, const SynthArgs& a) {
  SyntheticConfig c;
  c.count = a.count;
  c.size = parse_size(a.size);
  c.train = a.train;
  c.seed = a.seed;
  write_synthetic_dataset(c, a.out);
  ctx.out << "wrote " << a.count << " synthetic images (" << a.train << " train) to " << (a.out / "manifest.json").string()
          << "\n";
}

struct ExtractArgs {
  fs::path data, out;
  StrategyFlags strategy;
  double val_fraction = 0.2;
  std::uint64_t seed = 1;
};

void cmd_extract(const Context& ctx, const ExtractArgs& a) {
  const Dataset ds = load_dataset(a.data);
  const PatchStrategy s = a.strategy.get();
  const HeldOut held = training_split(ds, a.val_fraction, a.seed);
  const PatchDb train = phase1_build_patch_db(held.train, s);
  const PatchDb val = phase1_build_patch_db(held.val, s);
  save_patch_db(train, a.out / "train");
  save_patch_db(val, a.out / "val");

  json val_ids = json::array();
  for (const ImageSample* v : held.val) val_ids.push_back(v->id);
  RunManifest m;
  m.phase = 1;
  m.regime = Regime::kPatch;
  m.dataset_id = dataset_id(ds);
  m.seed = s.seed;
  m.config = {{"strategy", strategy_to_json(s)},
              {"holdout", {{"val_fraction", a.val_fraction}, {"seed", a.seed}, {"val_ids", val_ids}}},
              {"invocation", invocation(ctx)}};
  m.results = {{"train", train.summary()}, {"val", val.summary()}};
  save_run_manifest(m, a.out / "run.json");
  ctx.out << "patch database: " << train.size() << " train patches from " << held.train.size() << " images, "
          << val.size() << " val patches from " << held.val.size() << " images -> " << a.out.string() << "\n";
}

struct TrainArgs {
  std::string mode = "patch";
  std::string spec = "light";
  std::optional<fs::path> data, patch_db, init, state_dir;
  fs::path out;
  bool fresh = false;
  TrainFlags flags;
};

void cmd_train(const Context& ctx, const TrainArgs& a) {
  const TrainMode mode = parse_train_mode(a.mode);
  const NetworkSpec spec = resolve_spec(a.spec);
  TrainConfig cfg = a.flags.apply(mode == TrainMode::kPatch ? TrainConfig::patch_defaults() : TrainConfig::image_defaults());

  RunManifest m;
  m.spec_name = spec.name;
  m.spec_hash = to_hex(spec_hash(spec));
  m.seed = cfg.seed;
  const fs::path out_dir = a.out.parent_path();

  TrainSet train, val;
  ParameterSet<float> init;
  json inputs = json::object();
  if (mode == TrainMode::kPatch) {
    if (!a.patch_db) fail(ErrorCode::kInvalidArgument, "patch-level training needs --patch-db (see extract-patches)");
    if (a.init) fail(ErrorCode::kInvalidArgument, "patch-level training starts from scratch; drop --init");
    const fs::path db_manifest = *a.patch_db / "run.json";
    const RunManifest parent = load_run_manifest(db_manifest);
    train = train_set_from_patches(load_patch_db(*a.patch_db / "train"));
    val = train_set_from_patches(load_patch_db(*a.patch_db / "val"));
    init = init_params(spec, cfg.seed);
    m.phase = 2;
    m.regime = Regime::kPatch;
    m.dataset_id = parent.dataset_id;
    m.parent_manifest = relative_to(db_manifest, out_dir);
    inputs["patch_db"] = a.patch_db->generic_string();
  } else {
    if (!a.data) fail(ErrorCode::kInvalidArgument, "image-level training needs --data");
    const Dataset ds = load_dataset(*a.data);
    const HeldOut held = training_split(ds, cfg.val_fraction, cfg.seed);
    train = train_set_from_samples(held.train);
    val = train_set_from_samples(held.val);
    m.dataset_id = dataset_id(ds);
    inputs["data"] = a.data->generic_string();
    if (a.init) {
      const fs::path parent_path = manifest_path_for(*a.init);
      if (!fs::exists(parent_path)) {
        fail(ErrorCode::kState, "initial checkpoint '" + a.init->string() + "' has no run manifest '" +
                                    parent_path.string() + "'; its lineage cannot be recorded");
      }
      init = load_checkpoint_for(*a.init, spec);
      m.phase = 4;
      m.regime = Regime::kImageFinetuned;
      m.parent_checkpoint_hash = to_hex(checkpoint_hash(spec, init));
      m.parent_manifest = relative_to(parent_path, out_dir);
      inputs["init"] = file_input(*a.init);
    } else {
      init = init_params(spec, cfg.seed);
      m.phase = 2;
      m.regime = Regime::kImageScratch;
    }
  }

  TrainHooks hooks;
  const std::string label(regime_name(m.regime));
  hooks.on_epoch = [&](const EpochRecord& r) { print_epoch(ctx.out, label, r); };
  hooks.state_dir = a.state_dir.value_or(fs::path(a.out.string() + ".state"));
  if (a.fresh && fs::exists(*hooks.state_dir)) fs::remove_all(*hooks.state_dir);
  ctx.out << "training " << spec.name << " (" << label << "): " << train.size() << " train / " << val.size()
          << " val samples, batch " << cfg.batch_size << ", lr0 " << cfg.lr0 << "\n";

  const TrainResult r = train_epochs(spec, init, train, val, cfg, hooks);
  save_checkpoint(a.out, spec, r.best);
  write_text_atomic(a.out.string() + ".history.json", history_to_json(r.history).dump(1) + "\n");
  m.checkpoint_hash = to_hex(checkpoint_hash(spec, r.best));
  m.config = {{"train", train_config_to_json(cfg)}, {"inputs", inputs}, {"invocation", invocation(ctx)}};
  m.results = train_summary(r);
  save_run_manifest(m, manifest_path_for(a.out));
  ctx.out << "best epoch " << r.best_epoch << " (val " << r.best_val << "), stopped: " << r.stop_reason << "\n"
          << "checkpoint " << a.out.string() << " " << m.checkpoint_hash << "\n";
}

struct TransferArgs {
  fs::path from, out;
  std::string spec = "light";
};

void cmd_transfer(const Context& ctx, const TransferArgs& a) {
  const NetworkSpec spec = resolve_spec(a.spec);
  const fs::path parent_path = manifest_path_for(a.from);
  const RunManifest parent = load_run_manifest(parent_path);
  if (parent.phase != 2 || parent.regime != Regime::kPatch) {
    fail(ErrorCode::kState, "transfer copies a phase-2 patch checkpoint; '" + a.from.string() + "' is a phase-" +
                                std::to_string(parent.phase) + " " + std::string(regime_name(parent.regime)) + " run");
  }
  const ParameterSet<float> fi = phase3_transfer(load_checkpoint(a.from), spec);
  save_checkpoint(a.out, spec, fi);
  RunManifest m;
  m.phase = 3;
  m.regime = Regime::kImageFrozen;
  m.dataset_id = parent.dataset_id;
  m.spec_name = spec.name;
  m.spec_hash = to_hex(spec_hash(spec));
  m.seed = parent.seed;
  m.checkpoint_hash = to_hex(checkpoint_hash(spec, fi));
  m.parent_checkpoint_hash = parent.checkpoint_hash;
  m.parent_manifest = relative_to(parent_path, a.out.parent_path());
  m.config = {{"invocation", invocation(ctx)}};
  save_run_manifest(m, manifest_path_for(a.out));
  verify_lineage(manifest_path_for(a.out));
  ctx.out << "transferred " << a.from.string() << " -> " << a.out.string() << " " << m.checkpoint_hash << "\n";
}

struct EvalArgs {
  fs::path checkpoint, data, out;
  std::string spec = "light";
  std::string split = "test";
  std::optional<std::string> regime, method;
  bool fov = false, no_images = false;
  float threshold = 0.5f;
  int patch_size = 64, stride = 16, patch_batch = 32;
};

void cmd_eval(const Context& ctx, const EvalArgs& a) {
  const NetworkSpec spec = resolve_spec(a.spec);
  const ParameterSet<float> params = load_checkpoint_for(a.checkpoint, spec);
  const Dataset ds = load_dataset(a.data);
  const std::vector<const ImageSample*> samples = ds.split(parse_split(a.split));
  if (samples.empty()) fail(ErrorCode::kInvalidArgument, "split '" + a.split + "' of '" + ds.name + "' is empty");

  std::optional<RunManifest> run;
  if (fs::exists(manifest_path_for(a.checkpoint))) run = verify_lineage(manifest_path_for(a.checkpoint)).front();
  const Regime regime = a.regime ? parse_regime(*a.regime) : run ? run->regime : Regime::kImageFrozen;

  EvalOptions o;
  o.method = regime == Regime::kPatch ? SegmentMethod::kPatches : SegmentMethod::kWholeImage;
  if (a.method) {
    if (*a.method == "whole") o.method = SegmentMethod::kWholeImage;
    else if (*a.method == "patches") o.method = SegmentMethod::kPatches;
    else fail(ErrorCode::kInvalidArgument, "unknown method '" + *a.method + "' (expected whole or patches)");
  }
  o.patch_size = a.patch_size;
  o.stride = a.stride;
  o.patch_batch = a.patch_batch;
  o.fov = a.fov;
  o.threshold = a.threshold;
  if (!a.no_images) {
    o.on_image = [&](const ImageSample& s, const Tensor& prob) {
      write_image(a.out / (s.id + "_prob.png"), prob);
      write_image(a.out / (s.id + "_seg.png"), binarize(prob, a.threshold));
    };
  }
  const Evaluation ev = evaluate_samples(spec, params, samples, o);

  json report = metrics_to_json(ev.report);
  report["regime"] = regime_name(regime);
  report["method"] = o.method == SegmentMethod::kWholeImage ? "whole" : "patches";
  report["seconds_per_image"] = ev.seconds_per_image;
  report["forward_passes"] = ev.forward_passes;
  report["run"] = {{"checkpoint", file_input(a.checkpoint)},
                   {"checkpoint_hash", to_hex(checkpoint_hash(spec, params))},
                   {"dataset", dataset_id(ds)},
                   {"split", a.split},
                   {"spec", {{"name", spec.name}, {"hash", to_hex(spec_hash(spec))}}},
                   {"invocation", invocation(ctx)}};
  write_text_atomic(a.out / "metrics.json", report.dump(2) + "\n");

  const OverlapMetrics& m = ev.report.overlap;
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "%s on %zu %s images%s: Sens %.4f Spec %.4f Acc %.4f Dice %.4f Jaccard %.4f AUC %.4f AUPRC %.4f "
                "(%.3f s/image)\n",
                std::string(regime_label(regime)).c_str(), samples.size(), a.split.c_str(), a.fov ? " (FOV)" : "",
                m.sens, m.spec, m.acc, m.dice, m.jaccard, ev.report.auc, ev.report.auprc, ev.seconds_per_image);
  ctx.out << buf << "report: " << (a.out / "metrics.json").string() << "\n";
}

struct BenchArgs {
  std::vector<std::string> specs;
  std::optional<fs::path> checkpoint, data, out;
  std::string size = "256x256";
  int images = 1, reps = 3, patch_size = 64, stride = 16, patch_batch = 32;
  std::uint64_t seed = 1;
};

std::string hardware_note() {
  std::string model = "unknown CPU";
  std::ifstream cpu("/proc/cpuinfo");
  for (std::string line; std::getline(cpu, line);) {
    if (line.rfind("model name", 0) == 0) {
      model = line.substr(line.find(':') + 2);
      break;
    }
  }
  return model + ", " + std::to_string(std::thread::hardware_concurrency()) + " hardware threads, " +
         std::to_string(thread_count()) + " used";
}

void cmd_bench(const Context& ctx, const BenchArgs& a) {
  std::vector<std::string> names = a.specs;
  if (names.empty()) names = {"light", "mini-unet", "dense"};
  if (a.checkpoint && names.size() != 1) fail(ErrorCode::kInvalidArgument, "--checkpoint needs exactly one --spec");

  std::vector<Tensor> inputs;
  std::string source;
  if (a.data) {
    const Dataset ds = load_dataset(*a.data);
    std::vector<const ImageSample*> pick = ds.split(Split::kTest);
    if (pick.empty()) pick = ds.split(Split::kTrain);
    for (std::size_t i = 0; i < pick.size() && static_cast<int>(i) < a.images; ++i) inputs.push_back(pick[i]->image);
    source = dataset_id(ds);
  } else {
    const Size2 size = parse_size(a.size);
    for (int i = 0; i < a.images; ++i) {
      inputs.push_back(preprocess(synth_vessel_image(size, a.seed + static_cast<std::uint64_t>(i)).rgb, {}));
    }
    source = "synthetic " + a.size;
  }
  if (inputs.empty()) fail(ErrorCode::kInvalidArgument, "no images to time");

  json rows = json::array();
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-12s %9s %8s %12s %12s %9s\n", "network", "size", "patches", "whole s/img",
                "patch s/img", "speedup");
  ctx.out << "segmentation time, " << source << ", patch " << a.patch_size << " stride " << a.stride << ", min of "
          << a.reps << " interleaved runs\n"
          << buf;
  for (const std::string& name : names) {
    const NetworkSpec spec = resolve_spec(name);
    const ParameterSet<float> params = a.checkpoint ? load_checkpoint_for(*a.checkpoint, spec) : init_params(spec, a.seed);
    double whole = 0, patch = 0;
    std::size_t patches = 0;
    for (const Tensor& img : inputs) {
      const SegmentTiming t = time_segmentation(spec, params, img, a.patch_size, a.stride, a.patch_batch, a.reps);
      whole += t.whole_seconds;
      patch += t.patch_seconds;
      patches = t.patches;
    }
    whole /= static_cast<double>(inputs.size());
    patch /= static_cast<double>(inputs.size());
    const std::string size = std::to_string(inputs[0].h()) + "x" + std::to_string(inputs[0].w());
    std::snprintf(buf, sizeof buf, "%-12s %9s %8zu %12.4f %12.4f %8.1fx\n", spec.name.c_str(), size.c_str(), patches,
                  whole, patch, patch / whole);
    ctx.out << buf << std::flush;
    rows.push_back({{"spec", spec.name},
                    {"size", size},
                    {"patches", patches},
                    {"whole_seconds", whole},
                    {"patch_seconds", patch},
                    {"speedup", patch / whole}});
  }
  const std::string note = hardware_note();
  ctx.out << "hardware: " << note << "\n";
  if (a.out) {
    write_text_atomic(*a.out, json{{"source", source},
                                   {"images", inputs.size()},
                                   {"repetitions", a.reps},
                                   {"patch_size", a.patch_size},
                                   {"stride", a.stride},
                                   {"patch_batch", a.patch_batch},
                                   {"hardware", note},
                                   {"rows", rows},
                                   {"invocation", invocation(ctx)}}
                                  .dump(2) +
                                  "\n");
  }
}

struct RegimesArgs {
  fs::path data, out;
  std::string spec = "light";
  StrategyFlags strategy;
  TrainFlags patch, image;
  int eval_stride = 16;
  bool fov = false;
};

void cmd_regimes(const Context& ctx, const RegimesArgs& a) {
  const Dataset ds = load_dataset(a.data);
  const NetworkSpec spec = resolve_spec(a.spec);
  RegimeOptions o;
  o.strategy = a.strategy.get();
  o.patch_config = a.patch.apply(TrainConfig::patch_defaults());
  o.image_config = a.image.apply(TrainConfig::image_defaults());
  o.eval_stride = a.eval_stride;
  o.fov = a.fov;
  o.out_dir = a.out;
  o.on_epoch = [&](std::string_view label, const EpochRecord& r) { print_epoch(ctx.out, label, r); };
  const RegimeComparison cmp = run_regimes(ds, spec, o);
  write_text_atomic(a.out / "invocation.json", invocation(ctx).dump(2) + "\n");
  ctx.out << cmp.table();
}

struct InfoArgs {
  std::optional<std::string> spec;
  std::optional<fs::path> checkpoint, data, run;
};

void cmd_info(const Context& ctx, const InfoArgs& a) {
  if (!a.spec && !a.checkpoint && !a.data && !a.run) {
    fail(ErrorCode::kInvalidArgument, "info needs at least one of --spec, --checkpoint, --data, --run");
  }
  if (a.spec) {
    const NetworkSpec spec = resolve_spec(*a.spec);
    validate(spec);
    ctx.out << "spec " << spec.name << ": " << spec.layers.size() << " layers, " << parameter_count(spec)
            << " parameters, receptive radius " << receptive_radius(spec) << " px, hash " << to_hex(spec_hash(spec))
            << "\n";
  }
  if (a.checkpoint) {
    const Checkpoint c = load_checkpoint(*a.checkpoint);
    ctx.out << "checkpoint " << a.checkpoint->string() << ": spec hash " << to_hex(c.spec_hash) << ", "
            << c.params.count() << " parameters\n";
  }
  const std::optional<fs::path> run = a.run ? a.run
                                      : a.checkpoint && fs::exists(manifest_path_for(*a.checkpoint))
                                          ? std::optional(manifest_path_for(*a.checkpoint))
                                          : std::nullopt;
  if (run) {
    for (const RunManifest& m : verify_lineage(*run)) {
      ctx.out << "  phase " << m.phase << " " << regime_name(m.regime) << "  dataset " << m.dataset_id << "  "
              << (m.checkpoint_hash.empty() ? std::string("(no checkpoint)") : m.checkpoint_hash.substr(0, 16)) << "\n";
    }
    ctx.out << "lineage verified\n";
  }
  if (a.data) {
    const Dataset ds = load_dataset(*a.data);
    ctx.out << "dataset " << dataset_id(ds) << ": " << ds.split(Split::kTrain).size() << " train, "
            << ds.split(Split::kVal).size() << " val, " << ds.split(Split::kTest).size() << " test images\n";
  }
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Context ctx{out, err};
  for (int i = 0; i < argc; ++i) ctx.argv.push_back(argv[i]);

  CLI::App app{"Patch-to-image training of fully convolutional segmentation networks", "p2i"};
  app.require_subcommand(1);
  app.fallthrough();
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads; 1 gives bit-reproducible runs (default: P2I_THREADS or all)")
      ->check(CLI::NonNegativeNumber);

  std::vector<std::pair<CLI::App*, std::function<void()>>> commands;

  PrepareArgs prep;
  auto* c = app.add_subcommand("prepare", "Resize and pre-process a dataset manifest into a cache directory");
  c->add_option("--manifest", prep.manifest, "Dataset manifest (JSON)")->required();
  c->add_option("--out", prep.out, "Cache directory")->required();
  c->add_flag("--force", prep.force, "Recompute even when the cache is current");
  prep.pre.add(c);
  commands.push_back({c, [&] { cmd_prepare(ctx, prep); }});

  SynthArgs syn;
  c = app.add_subcommand("synth", "Write a seeded synthetic vessel dataset");
  c->add_option("--out", syn.out, "Output directory")->required();
  c->add_option("--count", syn.count, "Number of images")->capture_default_str();
  c->add_option("--size", syn.size, "Image size HxW")->capture_default_str();
  c->add_option("--train", syn.train, "Leading images assigned to the training split")->capture_default_str();
  c->add_option("--seed", syn.seed, "Generator seed")->capture_default_str();
  commands.push_back({c, [&] { cmd_synth(ctx, syn); }});

  ExtractArgs ext;
  c = app.add_subcommand("extract-patches", "Phase 1: build train/val patch databases from the training images");
  c->add_option("--data", ext.data, "Prepared dataset directory or manifest")->required();
  c->add_option("--out", ext.out, "Output directory")->required();
  c->add_option("--val-fraction", ext.val_fraction, "Share of training images held out")->capture_default_str();
  c->add_option("--seed", ext.seed, "Hold-out seed")->capture_default_str();
  ext.strategy.add(c);
  commands.push_back({c, [&] { cmd_extract(ctx, ext); }});

  TrainArgs tr;
  c = app.add_subcommand("train", "Phase 2 (patch), image-level from scratch, or phase 4 (image with --init)");
  c->add_option("--mode", tr.mode, "patch or image")->capture_default_str();
  c->add_option("--spec", tr.spec, "Reference family (light, mini-unet, dense) or spec file")->capture_default_str();
  c->add_option("--patch-db", tr.patch_db, "Patch database directory from extract-patches (patch mode)");
  c->add_option("--data", tr.data, "Prepared dataset (image mode)");
  c->add_option("--init", tr.init, "Transferred checkpoint to fine-tune (image mode)");
  c->add_option("--out", tr.out, "Output checkpoint")->required();
  c->add_option("--state-dir", tr.state_dir, "Resumable state directory (default: <out>.state)");
  c->add_flag("--fresh", tr.fresh, "Discard saved state instead of resuming");
  tr.flags.add(c);
  commands.push_back({c, [&] { cmd_train(ctx, tr); }});

  TransferArgs tf;
  c = app.add_subcommand("transfer", "Phase 3: copy patch-trained weights into the image network");
  c->add_option("--from", tf.from, "Phase-2 patch checkpoint")->required();
  c->add_option("--out", tf.out, "Output checkpoint")->required();
  c->add_option("--spec", tf.spec, "Image network spec")->capture_default_str();
  commands.push_back({c, [&] { cmd_transfer(ctx, tf); }});

  EvalArgs ev;
  c = app.add_subcommand("eval", "Segment a split and write metrics and probability maps");
  c->add_option("--checkpoint", ev.checkpoint, "Checkpoint")->required();
  c->add_option("--data", ev.data, "Prepared dataset")->required();
  c->add_option("--out", ev.out, "Output directory")->required();
  c->add_option("--spec", ev.spec, "Network spec")->capture_default_str();
  c->add_option("--split", ev.split, "train, val or test")->capture_default_str();
  c->add_option("--regime", ev.regime, "Regime label for the report (default: from the run manifest)");
  c->add_option("--method", ev.method, "whole or patches (default: patches for the patch regime)");
  c->add_flag("--fov", ev.fov, "Restrict metrics to field-of-view pixels");
  c->add_option("--threshold", ev.threshold, "Probability threshold")->capture_default_str();
  c->add_option("--patch-size", ev.patch_size, "Patch side for patch segmentation")->capture_default_str();
  c->add_option("--stride", ev.stride, "Stride for patch segmentation")->capture_default_str();
  c->add_option("--patch-batch", ev.patch_batch, "Patches per forward pass")->capture_default_str();
  c->add_flag("--no-images", ev.no_images, "Skip the PNG outputs");
  commands.push_back({c, [&] { cmd_eval(ctx, ev); }});

  BenchArgs bn;
  c = app.add_subcommand("bench", "Time whole-image against patch-based segmentation");
  c->add_option("--spec", bn.specs, "Networks to time (repeatable; default: all reference families)");
  c->add_option("--checkpoint", bn.checkpoint, "Weights for a single --spec (default: random initialisation)");
  c->add_option("--data", bn.data, "Dataset whose test images are timed (default: synthetic images)");
  c->add_option("--size", bn.size, "Synthetic image size")->capture_default_str();
  c->add_option("--images", bn.images, "Images to time")->capture_default_str();
  c->add_option("--reps", bn.reps, "Interleaved repetitions per image")->capture_default_str();
  c->add_option("--patch-size", bn.patch_size, "Patch side")->capture_default_str();
  c->add_option("--stride", bn.stride, "Patch stride")->capture_default_str();
  c->add_option("--patch-batch", bn.patch_batch, "Patches per forward pass")->capture_default_str();
  c->add_option("--seed", bn.seed, "Seed for synthetic images and random weights")->capture_default_str();
  c->add_option("--out", bn.out, "Also write the table as JSON");
  commands.push_back({c, [&] { cmd_bench(ctx, bn); }});

  RegimesArgs rg;
  c = app.add_subcommand("regimes", "Run phases 1-4 and the scratch baseline, then compare all four regimes");
  c->add_option("--data", rg.data, "Prepared dataset with train and test splits")->required();
  c->add_option("--out", rg.out, "Output directory")->required();
  c->add_option("--spec", rg.spec, "Network spec")->capture_default_str();
  c->add_option("--eval-stride", rg.eval_stride, "Stride of the patch regime's evaluation")->capture_default_str();
  c->add_flag("--fov", rg.fov, "Restrict metrics to field-of-view pixels");
  rg.strategy.add(c);
  rg.patch.add(c, "patch-");
  rg.image.add(c, "image-");
  commands.push_back({c, [&] { cmd_regimes(ctx, rg); }});

  InfoArgs in;
  c = app.add_subcommand("info", "Describe a spec, checkpoint, run lineage or dataset");
  c->add_option("--spec", in.spec, "Reference family or spec file");
  c->add_option("--checkpoint", in.checkpoint, "Checkpoint (its run manifest is verified when present)");
  c->add_option("--run", in.run, "Run manifest whose lineage is verified");
  c->add_option("--data", in.data, "Prepared dataset or manifest");
  commands.push_back({c, [&] { cmd_info(ctx, in); }});

  try {
    app.parse(argc, argv);
    if (threads > 0) set_thread_count(static_cast<std::size_t>(threads));
    for (const auto& [sub, command] : commands)
      if (sub->parsed()) command();
    return 0;
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "p2i: error[usage]: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    err << "p2i: error[" << error_code_name(e.code()) << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "p2i: error[internal]: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace p2i::cli
