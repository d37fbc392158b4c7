#include "p2i/transfer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>

#include "p2i/file_util.hpp"
#include "p2i/spec_io.hpp"

namespace p2i {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct RegimeNames {
  Regime regime;
  std::string_view name;
  std::string_view label;
};

constexpr RegimeNames kRegimes[] = {
    {Regime::kPatch, "patch", "Patch"},
    {Regime::kImageScratch, "image-scratch", "Image/Scratch"},
    {Regime::kImageFrozen, "image-frozen", "Image/Frozen"},
    {Regime::kImageFinetuned, "image-finetuned", "Image/Fine-tuned"},
};

}  // namespace

std::string_view regime_name(Regime r) {
  for (const auto& e : kRegimes)
    if (e.regime == r) return e.name;
  return "?";
}

std::string_view regime_label(Regime r) {
  for (const auto& e : kRegimes)
    if (e.regime == r) return e.label;
  return "?";
}

Regime parse_regime(std::string_view name) {
  for (const auto& e : kRegimes)
    if (e.name == name) return e.regime;
  fail(ErrorCode::kInvalidArgument, "unknown regime '" + std::string(name) +
                                        "' (expected patch, image-scratch, image-frozen or image-finetuned)");
}

void RunManifest::validate() const {
  auto bad = [this](const std::string& what) {
    fail(ErrorCode::kState, "run manifest (phase " + std::to_string(phase) + ", " + std::string(regime_name(regime)) +
                                "): " + what);
  };
  switch (phase) {
    case 1:
      if (regime != Regime::kPatch) bad("phase 1 builds the patch database and has regime 'patch'");
      if (!checkpoint_hash.empty()) bad("phase 1 produces no checkpoint");
      break;
    case 2:
      if (regime != Regime::kPatch && regime != Regime::kImageScratch) {
        bad("phase 2 trains from scratch, on patches or (baseline) on images");
      }
      if (checkpoint_hash.empty()) bad("missing checkpoint hash");
      if (!parent_checkpoint_hash.empty()) bad("training from scratch has no parent checkpoint");
      break;
    case 3:
      if (regime != Regime::kImageFrozen) bad("phase 3 yields the frozen image network");
      if (parent_checkpoint_hash.empty()) bad("phase 3 must reference the phase-2 checkpoint");
      if (checkpoint_hash != parent_checkpoint_hash) bad("transfer must copy the parent weights unchanged");
      break;
    case 4:
      if (regime != Regime::kImageFinetuned) bad("phase 4 yields the fine-tuned image network");
      if (parent_checkpoint_hash.empty()) bad("phase 4 must reference a phase-2 checkpoint");
      if (checkpoint_hash.empty()) bad("missing checkpoint hash");
      break;
    default:
      bad("phase must be 1, 2, 3 or 4");
  }
}

json run_manifest_to_json(const RunManifest& m) {
  return json{{"phase", m.phase},
              {"regime", regime_name(m.regime)},
              {"dataset", m.dataset_id},
              {"spec", {{"name", m.spec_name}, {"hash", m.spec_hash}}},
              {"checkpoint_hash", m.checkpoint_hash},
              {"parent", {{"checkpoint_hash", m.parent_checkpoint_hash}, {"manifest", m.parent_manifest}}},
              {"seed", m.seed},
              {"config", m.config},
              {"results", m.results}};
}

RunManifest run_manifest_from_json(const json& j) {
  try {
    RunManifest m;
    m.phase = j.at("phase").get<int>();
    m.regime = parse_regime(j.at("regime").get<std::string>());
    m.dataset_id = j.at("dataset").get<std::string>();
    m.spec_name = j.at("spec").at("name").get<std::string>();
    m.spec_hash = j.at("spec").at("hash").get<std::string>();
    m.checkpoint_hash = j.at("checkpoint_hash").get<std::string>();
    m.parent_checkpoint_hash = j.at("parent").at("checkpoint_hash").get<std::string>();
    m.parent_manifest = j.at("parent").at("manifest").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config = j.value("config", json::object());
    m.results = j.value("results", json::object());
    return m;
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, std::string("run manifest: ") + e.what());
  }
}

std::string RunManifest::content_hash() const { return to_hex(sha256(run_manifest_to_json(*this).dump())); }

void save_run_manifest(const RunManifest& m, const fs::path& path) {
  m.validate();
  json j = run_manifest_to_json(m);
  j["manifest_hash"] = m.content_hash();
  write_text_atomic(path, j.dump(2) + "\n");
}

RunManifest load_run_manifest(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, "run manifest '" + path.string() + "': " + e.what());
  }
  RunManifest m = run_manifest_from_json(j);
  if (j.value("manifest_hash", std::string()) != m.content_hash()) {
    fail(ErrorCode::kState, "run manifest '" + path.string() + "' does not match its recorded content hash");
  }
  m.validate();
  return m;
}

std::vector<RunManifest> verify_lineage(const fs::path& path) {
  std::vector<RunManifest> chain;
  std::set<std::string> seen;
  fs::path cur = path;
  while (true) {
    RunManifest m = load_run_manifest(cur);
    if (!seen.insert(m.content_hash()).second) fail(ErrorCode::kState, "run lineage has a cycle at " + cur.string());
    chain.push_back(m);
    if (m.parent_manifest.empty()) break;
    const fs::path parent = cur.parent_path() / m.parent_manifest;
    if (!fs::exists(parent)) {
      fail(ErrorCode::kState, "run manifest '" + cur.string() + "' names a missing parent '" + parent.string() + "'");
    }
    const RunManifest p = load_run_manifest(parent);
    if (!m.parent_checkpoint_hash.empty() && p.checkpoint_hash != m.parent_checkpoint_hash) {
      fail(ErrorCode::kState, "run manifest '" + cur.string() + "' expects parent checkpoint " +
                                  m.parent_checkpoint_hash + " but '" + parent.string() + "' records " +
                                  p.checkpoint_hash);
    }
    cur = parent;
  }
  auto has_phase2_patch = [&](std::size_t from) {
    for (std::size_t i = from; i < chain.size(); ++i)
      if (chain[i].phase == 2 && chain[i].regime == Regime::kPatch) return true;
    return false;
  };
  for (std::size_t i = 0; i < chain.size(); ++i) {
    if ((chain[i].phase == 3 || chain[i].phase == 4) && !has_phase2_patch(i + 1)) {
      fail(ErrorCode::kState, "phase-" + std::to_string(chain[i].phase) +
                                  " run does not descend from a phase-2 patch checkpoint");
    }
  }
  return chain;
}

std::string dataset_id(const Dataset& ds) {
  const std::string key = ds.provenance.value("cache_key", std::string());
  return ds.name + "@" + (key.empty() ? std::string("unhashed") : key.substr(0, 16));
}

// ---------------------------------------------------------------------------

json strategy_to_json(const PatchStrategy& s) {
  json j{{"kind", s.kind == PatchStrategy::Kind::kGrid ? "grid" : "balanced"}, {"patch_size", s.patch_size}};
  if (s.kind == PatchStrategy::Kind::kGrid) {
    j["stride"] = s.stride;
    j["clamp_last"] = s.clamp_last;
  } else {
    j["n_pos"] = s.n_pos;
    j["n_neg"] = s.n_neg;
    j["seed"] = s.seed;
  }
  return j;
}

PatchStrategy parse_strategy_kind(std::string_view name, PatchStrategy base) {
  if (name == "grid" || name == "vessel") {
    base.kind = PatchStrategy::Kind::kGrid;
  } else if (name == "balanced" || name == "disc") {
    base.kind = PatchStrategy::Kind::kBalanced;
  } else {
    fail(ErrorCode::kInvalidArgument, "unknown patch strategy '" + std::string(name) + "' (expected grid or balanced)");
  }
  return base;
}

PatchDb phase1_build_patch_db(const std::vector<const ImageSample*>& train, const PatchStrategy& s) {
  if (train.empty()) fail(ErrorCode::kInvalidArgument, "phase 1: the training set is empty");
  return s.kind == PatchStrategy::Kind::kGrid
             ? build_patch_db_grid(train, s.patch_size, s.stride, s.clamp_last)
             : build_patch_db_balanced(train, s.patch_size, s.n_pos, s.n_neg, s.seed);
}

TrainResult phase2_train_patch(const NetworkSpec& spec, const PatchDb& train, const PatchDb& val,
                               const TrainConfig& config, const TrainHooks& hooks) {
  if (config.mode != TrainMode::kPatch) fail(ErrorCode::kInvalidArgument, "phase 2 needs a patch-mode config");
  return train_epochs(spec, init_params(spec, config.seed), train_set_from_patches(train),
                      train_set_from_patches(val), config, hooks);
}

ParameterSet<float> phase3_transfer(const Checkpoint& patch_checkpoint, const NetworkSpec& image_spec) {
  if (patch_checkpoint.spec_hash != spec_hash(image_spec)) {
    fail(ErrorCode::kState, "transfer: the patch checkpoint belongs to spec " + to_hex(patch_checkpoint.spec_hash) +
                                ", not to the image spec " + to_hex(spec_hash(image_spec)));
  }
  check_params(image_spec, patch_checkpoint.params);
  return patch_checkpoint.params;
}

TrainResult phase4_finetune(const NetworkSpec& spec, const ParameterSet<float>& transferred,
                            const std::vector<const ImageSample*>& train, const std::vector<const ImageSample*>& val,
                            const TrainConfig& config, const TrainHooks& hooks) {
  if (config.mode != TrainMode::kImage) fail(ErrorCode::kInvalidArgument, "phase 4 needs an image-mode config");
  return train_epochs(spec, transferred, train_set_from_samples(train), train_set_from_samples(val), config, hooks);
}

// ---------------------------------------------------------------------------

Evaluation evaluate_samples(const NetworkSpec& spec, const ParameterSet<float>& params,
                            const std::vector<const ImageSample*>& samples, const EvalOptions& o) {
  if (samples.empty()) fail(ErrorCode::kInvalidArgument, "evaluation: the split is empty");
  using clock = std::chrono::steady_clock;
  MetricsAccumulator acc(o.threshold);
  Evaluation ev;
  double seconds = 0.0;
  for (const ImageSample* s : samples) {
    const auto t0 = clock::now();
    Tensor prob;
    if (o.method == SegmentMethod::kWholeImage) {
      prob = forward(spec, params, s->image, false).output;
      ++ev.forward_passes;
    } else {
      const PatchPlan plan = plan_grid({s->image.h(), s->image.w()}, o.patch_size, o.stride);
      prob = segment_by_patches(spec, params, s->image, plan, o.patch_batch);
      ev.forward_passes += (plan.size() + static_cast<std::size_t>(o.patch_batch) - 1) /
                           static_cast<std::size_t>(o.patch_batch);
      ev.patches_per_image = plan.size();
    }
    seconds += std::chrono::duration<double>(clock::now() - t0).count();
    const Tensor back = resize_back(prob, s->original_size);
    if (o.fov && s->fov.empty()) fail(ErrorCode::kInvalidArgument, "FOV metrics requested but '" + s->id + "' has no FOV mask");
    acc.add(s->id, back, s->original_mask, o.fov ? s->fov : Tensor{});
    if (o.on_image) o.on_image(*s, back);
  }
  ev.report = acc.finish();
  ev.seconds_per_image = seconds / static_cast<double>(samples.size());
  return ev;
}

SegmentTiming time_segmentation(const NetworkSpec& spec, const ParameterSet<float>& params, const Tensor& image,
                                int patch_size, int stride, int patch_batch, int repetitions) {
  if (repetitions < 1) fail(ErrorCode::kInvalidArgument, "timing needs at least one repetition");
  using clock = std::chrono::steady_clock;
  const PatchPlan plan = plan_grid({image.h(), image.w()}, patch_size, stride);
  SegmentTiming t;
  t.patches = plan.size();
  t.whole_seconds = t.patch_seconds = std::numeric_limits<double>::infinity();
  for (int r = 0; r < repetitions; ++r) {
    auto t0 = clock::now();
    forward(spec, params, image, false);
    t.whole_seconds = std::min(t.whole_seconds, std::chrono::duration<double>(clock::now() - t0).count());
    t0 = clock::now();
    segment_by_patches(spec, params, image, plan, patch_batch);
    t.patch_seconds = std::min(t.patch_seconds, std::chrono::duration<double>(clock::now() - t0).count());
  }
  return t;
}

// ---------------------------------------------------------------------------

HeldOut training_split(const Dataset& ds, double fraction, std::uint64_t seed) {
  const std::vector<const ImageSample*> train = ds.split(Split::kTrain);
  std::vector<const ImageSample*> val = ds.split(Split::kVal);
  if (!val.empty()) {
    if (train.empty()) fail(ErrorCode::kInvalidArgument, "dataset '" + ds.name + "' has no training images");
    return {train, std::move(val)};
  }
  return hold_out(train, fraction, seed);
}

const RegimeRow& RegimeComparison::row(Regime r) const {
  for (const RegimeRow& x : rows)
    if (x.regime == r) return x;
  fail(ErrorCode::kState, "comparison has no row for regime " + std::string(regime_name(r)));
}

json RegimeComparison::to_json() const {
  json rs = json::array();
  for (const RegimeRow& r : rows) {
    json m = metrics_to_json(r.eval.report);
    rs.push_back({{"regime", regime_name(r.regime)},
                  {"label", regime_label(r.regime)},
                  {"checkpoint_hash", r.checkpoint_hash},
                  {"metrics", m["metrics"]},
                  {"counts", m["counts"]},
                  {"seconds_per_image", r.eval.seconds_per_image},
                  {"forward_passes", r.eval.forward_passes},
                  {"patches_per_image", r.eval.patches_per_image},
                  {"per_image", m["per_image_lists"]}});
  }
  return {{"dataset", dataset},
          {"spec", spec},
          {"patch_db", patch_db},
          {"rows", rs},
          {"history",
           {{"patch", history_to_json(patch_history)},
            {"finetune", history_to_json(finetune_history)},
            {"scratch", history_to_json(scratch_history)}}}};
}

std::string RegimeComparison::table() const {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-18s %7s %7s %7s %7s %7s %7s %7s %10s\n", "Regime", "Sens", "Spec", "Acc", "Dice",
                "Jaccard", "AUC", "AUPRC", "s/image");
  out += buf;
  for (const RegimeRow& r : rows) {
    const MetricsReport& m = r.eval.report;
    std::snprintf(buf, sizeof buf, "%-18s %7.4f %7.4f %7.4f %7.4f %7.4f %7.4f %7.4f %10.4f\n",
                  std::string(regime_label(r.regime)).c_str(), m.overlap.sens, m.overlap.spec, m.overlap.acc,
                  m.overlap.dice, m.overlap.jaccard, m.auc, m.auprc, r.eval.seconds_per_image);
    out += buf;
  }
  return out;
}

namespace {

std::string hash_hex(const NetworkSpec& spec, const ParameterSet<float>& p) { return to_hex(checkpoint_hash(spec, p)); }

json train_summary(const TrainResult& r) {
  return {{"best_epoch", r.best_epoch},
          {"best_val_loss", r.best_val},
          {"epochs", r.history.empty() ? 0 : r.history.back().epoch},
          {"steps", r.steps},
          {"stop_reason", r.stop_reason}};
}

}  // namespace

RegimeComparison run_regimes(const Dataset& ds, const NetworkSpec& spec, const RegimeOptions& o) {
  const std::vector<const ImageSample*> test = ds.split(Split::kTest);
  if (test.empty()) fail(ErrorCode::kInvalidArgument, "run_regimes: the dataset has no test images");
  const HeldOut held = training_split(ds, o.patch_config.val_fraction, o.patch_config.seed);

  RegimeComparison cmp;
  cmp.dataset = dataset_id(ds);
  cmp.spec = spec.name;
  RunManifest base;
  base.dataset_id = cmp.dataset;
  base.spec_name = spec.name;
  base.spec_hash = to_hex(spec_hash(spec));

  auto hooks_for = [&](std::string_view label, const std::string& state) {
    TrainHooks h;
    if (o.on_epoch) h.on_epoch = [&o, label](const EpochRecord& r) { o.on_epoch(label, r); };
    if (o.out_dir) h.state_dir = *o.out_dir / "state" / state;
    return h;
  };
  auto persist = [&](const std::string& file, const ParameterSet<float>* params, RunManifest m) {
    if (!o.out_dir) return;
    if (params) save_checkpoint(*o.out_dir / file, spec, *params);
    save_run_manifest(m, manifest_path_for(*o.out_dir / file));
  };

  // Phase 1
  const PatchDb patch_train = phase1_build_patch_db(held.train, o.strategy);
  const PatchDb patch_val = phase1_build_patch_db(held.val, o.strategy);
  cmp.patch_db = {{"train", patch_train.summary()}, {"val", patch_val.summary()}};
  {
    RunManifest m = base;
    m.phase = 1;
    m.regime = Regime::kPatch;
    m.seed = o.strategy.seed;
    m.config = {{"strategy", strategy_to_json(o.strategy)}};
    m.results = cmp.patch_db;
    persist("phase1_patch_db", nullptr, m);
  }

  // Phase 2
  const TrainResult p2 = phase2_train_patch(spec, patch_train, patch_val, o.patch_config, hooks_for("patch", "phase2"));
  cmp.patch_history = p2.history;
  const std::string fp_hash = hash_hex(spec, p2.best);
  {
    RunManifest m = base;
    m.phase = 2;
    m.regime = Regime::kPatch;
    m.seed = o.patch_config.seed;
    m.checkpoint_hash = fp_hash;
    m.parent_manifest = "phase1_patch_db.run.json";
    m.config = {{"train", train_config_to_json(o.patch_config)}, {"strategy", strategy_to_json(o.strategy)}};
    m.results = train_summary(p2);
    persist("phase2_patch.ckpt", &p2.best, m);
  }

  // Phase 3
  Checkpoint fp;
  fp.spec_hash = spec_hash(spec);
  fp.params = p2.best;
  const ParameterSet<float> fi = phase3_transfer(fp, spec);
  {
    RunManifest m = base;
    m.phase = 3;
    m.regime = Regime::kImageFrozen;
    m.seed = o.patch_config.seed;
    m.checkpoint_hash = hash_hex(spec, fi);
    m.parent_checkpoint_hash = fp_hash;
    m.parent_manifest = "phase2_patch.ckpt.run.json";
    persist("phase3_frozen.ckpt", &fi, m);
  }

  // Phase 4 and the scratch baseline share the image configuration.
  const TrainResult p4 = phase4_finetune(spec, fi, held.train, held.val, o.image_config, hooks_for("finetune", "phase4"));
  cmp.finetune_history = p4.history;
  {
    RunManifest m = base;
    m.phase = 4;
    m.regime = Regime::kImageFinetuned;
    m.seed = o.image_config.seed;
    m.checkpoint_hash = hash_hex(spec, p4.best);
    m.parent_checkpoint_hash = hash_hex(spec, fi);
    m.parent_manifest = "phase3_frozen.ckpt.run.json";
    m.config = {{"train", train_config_to_json(o.image_config)}};
    m.results = train_summary(p4);
    persist("phase4_finetuned.ckpt", &p4.best, m);
  }
  const TrainResult scratch =
      train_epochs(spec, init_params(spec, o.image_config.seed), train_set_from_samples(held.train),
                   train_set_from_samples(held.val), o.image_config, hooks_for("scratch", "scratch"));
  cmp.scratch_history = scratch.history;
  {
    RunManifest m = base;
    m.phase = 2;
    m.regime = Regime::kImageScratch;
    m.seed = o.image_config.seed;
    m.checkpoint_hash = hash_hex(spec, scratch.best);
    m.config = {{"train", train_config_to_json(o.image_config)}};
    m.results = train_summary(scratch);
    persist("image_scratch.ckpt", &scratch.best, m);
  }

  // Evaluation with one protocol for all rows.
  EvalOptions whole;
  whole.fov = o.fov;
  EvalOptions patches = whole;
  patches.method = SegmentMethod::kPatches;
  patches.patch_size = o.strategy.patch_size;
  patches.stride = o.eval_stride;
  cmp.rows.push_back({Regime::kPatch, evaluate_samples(spec, p2.best, test, patches), fp_hash});
  cmp.rows.push_back({Regime::kImageFrozen, evaluate_samples(spec, fi, test, whole), hash_hex(spec, fi)});
  cmp.rows.push_back({Regime::kImageFinetuned, evaluate_samples(spec, p4.best, test, whole), hash_hex(spec, p4.best)});
  cmp.rows.push_back(
      {Regime::kImageScratch, evaluate_samples(spec, scratch.best, test, whole), hash_hex(spec, scratch.best)});

  if (o.out_dir) {
    write_text_atomic(*o.out_dir / "comparison.json", cmp.to_json().dump(2) + "\n");
    write_text_atomic(*o.out_dir / "comparison.txt", cmp.table());
    for (const RegimeRow& r : cmp.rows) {
      write_text_atomic(*o.out_dir / ("metrics_" + std::string(regime_name(r.regime)) + ".json"),
                        metrics_to_json(r.eval.report).dump(2) + "\n");
    }
  }
  return cmp;
}

}  // namespace p2i
