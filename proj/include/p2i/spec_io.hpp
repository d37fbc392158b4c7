#pragma once

#include <filesystem>
#include <string_view>

#include "json.hpp"
#include "p2i/graph.hpp"
#include "p2i/hash.hpp"

namespace p2i {

// Network spec files are JSON:
//   { "name": "light", "input_channels": 1, "strict_pooling": true,
//     "output": "sigmoid1",
//     "layers": [ { "id": "conv1", "kind": "conv", "inputs": ["input"],
//                   "filters": 8, "kernel": 3 }, ... ] }
// "kernel" is an odd integer or an [h, w] pair; "filters" and "kernel" only
// apply to conv layers.
nlohmann::json spec_to_json(const NetworkSpec& spec);
NetworkSpec spec_from_json(const nlohmann::json& j);

NetworkSpec load_spec(const std::filesystem::path& path);
void save_spec(const NetworkSpec& spec, const std::filesystem::path& path);

/// SHA-256 of the canonical (sorted-key, compact) JSON form.
Digest spec_hash(const NetworkSpec& spec);

/// Accepts a reference family name (light, mini-unet, dense) or a spec file path.
NetworkSpec resolve_spec(std::string_view family_or_path);

}  // namespace p2i
