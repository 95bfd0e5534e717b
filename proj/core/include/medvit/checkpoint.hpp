#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/nn/module.h>

namespace medvit {

inline constexpr const char* kStageEncoderSsl = "encoder_ssl";
inline constexpr const char* kStageTransformerSsl = "transformer_ssl";
inline constexpr const char* kStageFinetuned = "finetuned";

// Transfer-learning hand-off: named parameters plus provenance.
//
// On disk (".medckpt"): the 8-byte magic "MEDCKPT1", a little-endian u64 manifest length,
// the UTF-8 JSON manifest, then the concatenated little-endian tensor payloads. The
// manifest lists each tensor's name, shape, dtype ("f32" or "f64"), byte offset and size.
struct Checkpoint {
  std::map<std::string, torch::Tensor> parameters;
  std::map<std::string, torch::Tensor> optimizer_state;
  std::string stage;
  // Hash of the full resolved configuration.
  std::string fingerprint;
  // Hash of the architecture sections that must agree for parameters to transfer.
  std::string backbone_fingerprint;
  nlohmann::json config = nlohmann::json::object();
  std::int64_t epoch = 0;
  double best_metric = std::numeric_limits<double>::quiet_NaN();

  bool has_prefix(const std::string& prefix) const;
};

// Writes to a temporary file and renames it into place.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Throws ConfigError when the checkpoint's backbone fingerprint differs, unless forced.
void check_backbone_fingerprint(const Checkpoint& checkpoint, const std::string& expected, bool force);

// Detached clones of every named parameter of `module`.
std::map<std::string, torch::Tensor> snapshot_parameters(const torch::nn::Module& module);

struct LoadReport {
  std::vector<std::string> loaded;
  std::vector<std::string> missing;     // in the module, absent from the checkpoint
  std::vector<std::string> unexpected;  // in the checkpoint, absent from the module
};

// Copies matching entries into `module` (shape mismatch throws).
LoadReport load_parameters(torch::nn::Module& module, const std::map<std::string, torch::Tensor>& parameters);

// Stable 64-bit FNV-1a hex digest of the raw bytes of all entries whose name starts
// with `prefix`, visited in name order.
std::string hash_parameters(const std::map<std::string, torch::Tensor>& parameters, const std::string& prefix = "");

// FNV-1a over a string, hex formatted.
std::string fnv1a_hex(const std::string& text);

}  // namespace medvit
