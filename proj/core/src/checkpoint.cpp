#include "medvit/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <torch/torch.h>

#include "medvit/error.hpp"

namespace medvit {
namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'M', 'E', 'D', 'C', 'K', 'P', 'T', '1'};

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::string dtype_name(const torch::Tensor& t) {
  if (t.scalar_type() == torch::kFloat32) return "f32";
  if (t.scalar_type() == torch::kFloat64) return "f64";
  throw Error("checkpoint tensors must be f32 or f64");
}

void append_tensors(const std::map<std::string, torch::Tensor>& tensors, nlohmann::json& entries,
                    std::vector<char>& payload) {
  for (const auto& [name, tensor] : tensors) {
    auto t = tensor.detach().contiguous().cpu();
    const auto nbytes = static_cast<std::size_t>(t.numel()) * t.element_size();
    entries.push_back({{"name", name},
                       {"shape", t.sizes().vec()},
                       {"dtype", dtype_name(t)},
                       {"offset", payload.size()},
                       {"nbytes", nbytes}});
    const auto at = payload.size();
    payload.resize(at + nbytes);
    std::memcpy(payload.data() + at, t.data_ptr(), nbytes);
    if constexpr (std::endian::native != std::endian::little) {
      const auto w = static_cast<std::size_t>(t.element_size());
      for (std::size_t i = at; i < at + nbytes; i += w) std::reverse(payload.begin() + i, payload.begin() + i + w);
    }
  }
}

std::map<std::string, torch::Tensor> read_tensors(const nlohmann::json& entries, const char* payload,
                                                  std::size_t payload_size) {
  std::map<std::string, torch::Tensor> out;
  for (const auto& e : entries) {
    const auto dtype = e.at("dtype").get<std::string>();
    const auto shape = e.at("shape").get<std::vector<std::int64_t>>();
    const auto offset = e.at("offset").get<std::size_t>();
    const auto nbytes = e.at("nbytes").get<std::size_t>();
    const auto st = dtype == "f64" ? torch::kFloat64 : (dtype == "f32" ? torch::kFloat32 : torch::kUInt8);
    if (st == torch::kUInt8) throw IoError("unsupported checkpoint dtype " + dtype);
    auto t = torch::empty(shape, st);
    if (static_cast<std::size_t>(t.numel()) * t.element_size() != nbytes || offset + nbytes > payload_size) {
      throw IoError("checkpoint entry " + e.at("name").get<std::string>() + " is inconsistent with its payload");
    }
    std::memcpy(t.data_ptr(), payload + offset, nbytes);
    if constexpr (std::endian::native != std::endian::little) {
      auto* bytes = static_cast<char*>(t.data_ptr());
      const auto w = static_cast<std::size_t>(t.element_size());
      for (std::size_t i = 0; i < nbytes; i += w) std::reverse(bytes + i, bytes + i + w);
    }
    out.emplace(e.at("name").get<std::string>(), t);
  }
  return out;
}

}  // namespace

bool Checkpoint::has_prefix(const std::string& prefix) const {
  for (const auto& [name, _] : parameters) {
    if (name.rfind(prefix, 0) == 0) return true;
  }
  return false;
}

void save_checkpoint(const Checkpoint& ck, const fs::path& path) {
  nlohmann::json manifest{{"format_version", 1},
                          {"stage", ck.stage},
                          {"fingerprint", ck.fingerprint},
                          {"backbone_fingerprint", ck.backbone_fingerprint},
                          {"config", ck.config},
                          {"epoch", ck.epoch},
                          {"best_metric", std::isfinite(ck.best_metric) ? nlohmann::json(ck.best_metric) : nlohmann::json()},
                          {"tensors", nlohmann::json::array()},
                          {"optimizer", nlohmann::json::array()}};
  std::vector<char> payload;
  append_tensors(ck.parameters, manifest["tensors"], payload);
  append_tensors(ck.optimizer_state, manifest["optimizer"], payload);
  const auto text = manifest.dump();

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(kMagic, sizeof(kMagic));
    std::uint64_t len = text.size();
    unsigned char len_bytes[8];
    for (int i = 0; i < 8; ++i) len_bytes[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(len_bytes), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("missing checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw IoError("not a medvit checkpoint: " + path.string());
  }
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + static_cast<std::size_t>(i)])) << (8 * i);
  if (16 + len > bytes.size()) throw IoError("truncated checkpoint manifest in " + path.string());
  Checkpoint ck;
  try {
    const auto manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
    ck.stage = manifest.at("stage").get<std::string>();
    ck.fingerprint = manifest.value("fingerprint", std::string());
    ck.backbone_fingerprint = manifest.value("backbone_fingerprint", std::string());
    ck.config = manifest.value("config", nlohmann::json::object());
    ck.epoch = manifest.value("epoch", std::int64_t{0});
    if (manifest.contains("best_metric") && manifest["best_metric"].is_number()) {
      ck.best_metric = manifest["best_metric"].get<double>();
    }
    const char* payload = bytes.data() + 16 + len;
    const auto payload_size = bytes.size() - 16 - len;
    ck.parameters = read_tensors(manifest.at("tensors"), payload, payload_size);
    ck.optimizer_state = read_tensors(manifest.value("optimizer", nlohmann::json::array()), payload, payload_size);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint manifest in " + path.string() + ": " + e.what());
  }
  return ck;
}

void check_backbone_fingerprint(const Checkpoint& checkpoint, const std::string& expected, bool force) {
  if (force || checkpoint.backbone_fingerprint == expected) return;
  throw ConfigError("checkpoint backbone fingerprint " + checkpoint.backbone_fingerprint +
                    " does not match the configured backbone " + expected + " (use --force to override)");
}

std::map<std::string, torch::Tensor> snapshot_parameters(const torch::nn::Module& module) {
  std::map<std::string, torch::Tensor> out;
  for (const auto& item : module.named_parameters(true)) out.emplace(item.key(), item.value().detach().clone());
  return out;
}

LoadReport load_parameters(torch::nn::Module& module, const std::map<std::string, torch::Tensor>& parameters) {
  LoadReport report;
  torch::NoGradGuard no_grad;
  auto named = module.named_parameters(true);
  for (auto& item : named) {
    auto it = parameters.find(item.key());
    if (it == parameters.end()) {
      report.missing.push_back(item.key());
      continue;
    }
    if (it->second.sizes() != item.value().sizes()) {
      std::ostringstream os;
      os << "parameter " << item.key() << " has shape " << item.value().sizes() << " but the checkpoint holds "
         << it->second.sizes();
      throw ShapeError(os.str());
    }
    item.value().copy_(it->second);
    report.loaded.push_back(item.key());
  }
  for (const auto& [name, _] : parameters) {
    if (!named.contains(name)) report.unexpected.push_back(name);
  }
  return report;
}

std::string hash_parameters(const std::map<std::string, torch::Tensor>& parameters, const std::string& prefix) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, tensor] : parameters) {
    if (name.rfind(prefix, 0) != 0) continue;
    h = fnv1a(name.data(), name.size(), h);
    auto t = tensor.detach().contiguous().cpu();
    h = fnv1a(t.data_ptr(), static_cast<std::size_t>(t.numel()) * t.element_size(), h);
  }
  return hex(h);
}

std::string fnv1a_hex(const std::string& text) { return hex(fnv1a(text.data(), text.size())); }

}  // namespace medvit
