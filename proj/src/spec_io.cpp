#include "p2i/spec_io.hpp"

#include <fstream>

#include "p2i/reference_nets.hpp"

namespace p2i {

using nlohmann::json;

json spec_to_json(const NetworkSpec& spec) {
  json layers = json::array();
  for (const LayerSpec& l : spec.layers) {
    json jl = {{"id", l.id}, {"kind", std::string(layer_kind_name(l.kind))}, {"inputs", l.inputs}};
    if (l.kind == LayerKind::kConv) {
      jl["filters"] = l.filters;
      if (l.kernel_h == l.kernel_w) {
        jl["kernel"] = l.kernel_h;
      } else {
        jl["kernel"] = {l.kernel_h, l.kernel_w};
      }
    }
    layers.push_back(std::move(jl));
  }
  return {{"name", spec.name},
          {"input_channels", spec.input_channels},
          {"strict_pooling", spec.strict_pooling},
          {"output", spec.output},
          {"layers", std::move(layers)}};
}

NetworkSpec spec_from_json(const json& j) {
  try {
    NetworkSpec spec;
    spec.name = j.value("name", std::string());
    spec.input_channels = j.value("input_channels", 1);
    spec.strict_pooling = j.value("strict_pooling", true);
    spec.output = j.at("output").get<std::string>();
    for (const json& jl : j.at("layers")) {
      LayerSpec l;
      l.id = jl.at("id").get<std::string>();
      l.kind = parse_layer_kind(jl.at("kind").get<std::string>());
      l.inputs = jl.at("inputs").get<std::vector<std::string>>();
      if (l.kind == LayerKind::kConv) {
        l.filters = jl.at("filters").get<int>();
        const json& k = jl.value("kernel", json(3));
        if (k.is_array()) {
          l.kernel_h = k.at(0).get<int>();
          l.kernel_w = k.at(1).get<int>();
        } else {
          l.kernel_h = l.kernel_w = k.get<int>();
        }
      }
      spec.layers.push_back(std::move(l));
    }
    validate(spec);
    return spec;
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, std::string("network spec: ") + e.what());
  }
}

NetworkSpec load_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open network spec '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, "network spec '" + path.string() + "': " + e.what());
  }
  return spec_from_json(j);
}

void save_spec(const NetworkSpec& spec, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIo, "cannot write network spec '" + path.string() + "'");
  out << spec_to_json(spec).dump(2) << '\n';
}

Digest spec_hash(const NetworkSpec& spec) { return sha256(spec_to_json(spec).dump()); }

NetworkSpec resolve_spec(std::string_view family_or_path) {
  for (Family f : {Family::kLight, Family::kMiniUnet, Family::kDense}) {
    if (family_name(f) == family_or_path) return build_reference(f);
  }
  return load_spec(std::filesystem::path(family_or_path));
}

}  // namespace p2i
