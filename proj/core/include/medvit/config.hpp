#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "medvit/dataset.hpp"
#include "medvit/model.hpp"
#include "medvit/phantom.hpp"
#include "medvit/ssl_pretrain.hpp"
#include "medvit/train_engine.hpp"

namespace medvit {

// Reads the TOML subset used for run configurations: [table] and [a.b] headers,
// `key = value` with strings, integers, floats, booleans and (nested, multi-line)
// arrays, and # comments. Errors carry the line number.
nlohmann::json parse_toml(const std::string& text);
nlohmann::json read_toml(const std::filesystem::path& path);
// Inverse of parse_toml for trees of objects, arrays and scalars.
std::string to_toml(const nlohmann::json& tree);

// Built-in configurations: "default" (full-size model) and "desk" (small CPU budget).
const std::vector<std::string>& preset_names();
nlohmann::json preset_tree(const std::string& name);

// Sets a dotted path such as "train.lr", creating intermediate tables.
void set_path(nlohmann::json& tree, const std::string& dotted, nlohmann::json value);

struct RunConfig {
  nlohmann::json tree;

  std::uint64_t seed() const;
  ModelConfig model() const;
  TrainConfig train() const;
  SslConfig ssl() const;
  Preprocess preprocess() const;
  PhantomSpec phantom() const;
  // Stable hash of the canonical (key-sorted) tree.
  std::string fingerprint() const;
  // Builds every section; throws ConfigError on the first invalid value.
  void validate() const;
};

// Resolution order, lowest to highest: the "default" preset, the preset named by
// `source` or the file at that path (a file may name its base with `preset = "..."`),
// the MEDVIT_SEED environment variable, then `overrides` (dotted path -> value).
// Unknown keys are rejected.
RunConfig resolve_config(const std::string& source, const std::vector<std::pair<std::string, nlohmann::json>>& overrides = {},
                         bool use_environment = true);

}  // namespace medvit
