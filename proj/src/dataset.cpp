#include "p2i/dataset.hpp"

#include <set>

#include "p2i/file_util.hpp"
#include "p2i/hash.hpp"
#include "p2i/image_io.hpp"
#include "p2i/parallel.hpp"

namespace p2i {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kCacheFormat = 1;

void check_id(const std::string& id) {
  if (id.empty()) fail(ErrorCode::kFormat, "manifest: empty sample id");
  for (char ch : id) {
    const bool ok = (ch >= 'a' && ch <= 'z') || (ch >= 'A' && ch <= 'Z') || (ch >= '0' && ch <= '9') || ch == '_' ||
                    ch == '-' || ch == '.';
    if (!ok) fail(ErrorCode::kFormat, "manifest: sample id '" + id + "' may only contain [A-Za-z0-9_.-]");
  }
}

Tensor read_gray(const fs::path& path) {
  Tensor t = read_image(path);
  return t.c() == 3 ? to_grayscale(t) : t;
}

json size_json(Size2 s) { return json::array({s.h, s.w}); }
Size2 size_from(const json& j) { return {j.at(0).get<int>(), j.at(1).get<int>()}; }

std::string cache_key(const DatasetManifest& m) {
  json inputs = json::array();
  for (const ManifestEntry& e : m.entries) {
    json rec = {{"image", to_hex(sha256_file(e.image))}, {"mask", to_hex(sha256_file(e.mask))}};
    if (e.fov) rec["fov"] = to_hex(sha256_file(*e.fov));
    inputs.push_back(rec);
  }
  const json key = {{"format", kCacheFormat}, {"manifest", manifest_to_json(m)}, {"inputs", inputs}};
  return to_hex(sha256(key.dump()));
}

}  // namespace

std::string_view split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  fail(ErrorCode::kInvalidArgument, "unknown split '" + std::string(name) + "' (expected train, val or test)");
}

json manifest_to_json(const DatasetManifest& m) {
  json j;
  j["name"] = m.name;
  if (m.target) j["target"] = size_json(*m.target);
  j["preprocess"] = preprocess_to_json(m.preprocess);
  json entries = json::array();
  for (const ManifestEntry& e : m.entries) {
    json r = {{"id", e.id}, {"image", e.image.generic_string()}, {"mask", e.mask.generic_string()},
              {"split", std::string(split_name(e.split))}};
    if (e.fov) r["fov"] = e.fov->generic_string();
    entries.push_back(r);
  }
  j["entries"] = entries;
  return j;
}

DatasetManifest manifest_from_json(const json& j, const fs::path& base_dir) {
  DatasetManifest m;
  try {
    m.name = j.value("name", std::string("dataset"));
    if (j.contains("target") && !j.at("target").is_null()) {
      m.target = size_from(j.at("target"));
      if (m.target->h <= 0 || m.target->w <= 0 || m.target->h % 4 != 0 || m.target->w % 4 != 0) {
        fail(ErrorCode::kInvalidArgument, "manifest: resize target " + std::to_string(m.target->h) + "x" +
                                              std::to_string(m.target->w) + " must be positive multiples of 4");
      }
    }
    if (j.contains("preprocess")) m.preprocess = preprocess_from_json(j.at("preprocess"));
    auto resolve = [&](const std::string& p) {
      fs::path path(p);
      return path.is_absolute() ? path : base_dir / path;
    };
    std::set<std::string> seen;
    for (const json& r : j.at("entries")) {
      ManifestEntry e;
      e.image = resolve(r.at("image").get<std::string>());
      e.mask = resolve(r.at("mask").get<std::string>());
      if (r.contains("fov") && !r.at("fov").is_null()) e.fov = resolve(r.at("fov").get<std::string>());
      e.split = parse_split(r.value("split", std::string("train")));
      e.id = r.value("id", e.image.stem().string());
      check_id(e.id);
      if (!seen.insert(e.id).second) fail(ErrorCode::kFormat, "manifest: duplicate sample id '" + e.id + "'");
      m.entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, std::string("manifest: ") + e.what());
  }
  return m;
}

DatasetManifest load_manifest(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, "manifest '" + path.string() + "': " + e.what());
  }
  DatasetManifest m = manifest_from_json(j, path.parent_path());
  for (const ManifestEntry& e : m.entries) {
    for (const fs::path& p : {e.image, e.mask}) {
      if (!fs::exists(p)) fail(ErrorCode::kIo, "manifest entry '" + e.id + "': file '" + p.string() + "' not found");
    }
    if (e.fov && !fs::exists(*e.fov)) {
      fail(ErrorCode::kIo, "manifest entry '" + e.id + "': file '" + e.fov->string() + "' not found");
    }
  }
  return m;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  write_text_atomic(path, manifest_to_json(m).dump(2) + "\n");
}

ImageSample load_sample(const ManifestEntry& entry, const DatasetManifest& manifest) {
  ImageSample s;
  s.id = entry.id;
  s.split = entry.split;
  const Tensor raw = read_image(entry.image);
  s.original_size = {raw.h(), raw.w()};
  s.original_mask = binarize(read_gray(entry.mask));
  if (s.original_mask.h() != raw.h() || s.original_mask.w() != raw.w()) {
    fail(ErrorCode::kShape, "mask '" + entry.mask.string() + "' is " + std::to_string(s.original_mask.h()) + "x" +
                                std::to_string(s.original_mask.w()) + " but its image is " + std::to_string(raw.h()) +
                                "x" + std::to_string(raw.w()));
  }
  if (entry.fov) {
    s.fov = binarize(read_gray(*entry.fov));
    if (s.fov.h() != raw.h() || s.fov.w() != raw.w()) {
      fail(ErrorCode::kShape, "FOV mask '" + entry.fov->string() + "' does not match its image size");
    }
  }
  const Size2 target = manifest.target.value_or(round_up(s.original_size, 4));
  s.image = preprocess(resize_bilinear(raw, target), manifest.preprocess);
  s.mask = resize_mask(s.original_mask, target);
  return s;
}

std::vector<const ImageSample*> Dataset::split(Split s) const {
  std::vector<const ImageSample*> out;
  for (const ImageSample& x : samples)
    if (x.split == s) out.push_back(&x);
  return out;
}

PrepareResult prepare_dataset(const DatasetManifest& manifest, const fs::path& out_dir, bool force) {
  if (manifest.entries.empty()) fail(ErrorCode::kInvalidArgument, "prepare: manifest has no entries");
  const std::string key = cache_key(manifest);
  const fs::path record = out_dir / "dataset.json";
  if (!force && fs::exists(record)) {
    try {
      if (json::parse(read_text(record)).value("cache_key", std::string()) == key) return {true, out_dir};
    } catch (const json::exception&) {
      // An unreadable record is simply rebuilt.
    }
  }
  std::vector<ImageSample> samples(manifest.entries.size());
  parallel_for(samples.size(), [&](std::size_t i) { samples[i] = load_sample(manifest.entries[i], manifest); });

  fs::create_directories(out_dir / "samples");
  json recs = json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const ImageSample& s = samples[i];
    const std::string stem = "samples/" + s.id;
    save_tensor(out_dir / (stem + ".image.p2t"), s.image);
    write_image(out_dir / (stem + ".mask.png"), s.mask);
    write_image(out_dir / (stem + ".original_mask.png"), s.original_mask);
    json r = {{"id", s.id},
              {"split", std::string(split_name(s.split))},
              {"original_size", size_json(s.original_size)},
              {"size", size_json({s.image.h(), s.image.w()})},
              {"image", stem + ".image.p2t"},
              {"mask", stem + ".mask.png"},
              {"original_mask", stem + ".original_mask.png"},
              {"source_image", to_hex(sha256_file(manifest.entries[i].image))},
              {"source_mask", to_hex(sha256_file(manifest.entries[i].mask))}};
    if (!s.fov.empty()) {
      write_image(out_dir / (stem + ".fov.png"), s.fov);
      r["fov"] = stem + ".fov.png";
    }
    recs.push_back(r);
  }
  const json prov = {{"format", kCacheFormat},
                     {"cache_key", key},
                     {"name", manifest.name},
                     {"preprocess", preprocess_to_json(manifest.preprocess)},
                     {"manifest", manifest_to_json(manifest)},
                     {"samples", recs}};
  write_text_atomic(record, prov.dump(2) + "\n");
  return {false, out_dir};
}

Dataset load_prepared(const fs::path& dir) {
  const fs::path record = dir / "dataset.json";
  if (!fs::exists(record)) fail(ErrorCode::kIo, "'" + dir.string() + "' is not a prepared dataset (no dataset.json)");
  Dataset d;
  try {
    d.provenance = json::parse(read_text(record));
    d.name = d.provenance.at("name").get<std::string>();
    for (const json& r : d.provenance.at("samples")) {
      ImageSample s;
      s.id = r.at("id").get<std::string>();
      s.split = parse_split(r.at("split").get<std::string>());
      s.original_size = size_from(r.at("original_size"));
      s.image = load_tensor(dir / r.at("image").get<std::string>());
      s.mask = binarize(read_image(dir / r.at("mask").get<std::string>()));
      s.original_mask = binarize(read_image(dir / r.at("original_mask").get<std::string>()));
      if (r.contains("fov")) s.fov = binarize(read_image(dir / r.at("fov").get<std::string>()));
      d.samples.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, "'" + record.string() + "': " + e.what());
  }
  return d;
}

Dataset load_dataset(const fs::path& path) {
  if (fs::is_directory(path)) return load_prepared(path);
  const DatasetManifest m = load_manifest(path);
  if (m.entries.empty()) fail(ErrorCode::kInvalidArgument, "manifest '" + path.string() + "' has no entries");
  Dataset d;
  d.name = m.name;
  d.samples.resize(m.entries.size());
  parallel_for(d.samples.size(), [&](std::size_t i) { d.samples[i] = load_sample(m.entries[i], m); });
  d.provenance = {{"manifest", manifest_to_json(m)}, {"cache_key", cache_key(m)}};
  return d;
}

}  // namespace p2i
