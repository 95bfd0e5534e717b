#include "medvit/conv_encoder.hpp"

#include <numeric>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "medvit/checkpoint.hpp"
#include "medvit/error.hpp"

namespace medvit {

namespace {

torch::nn::Conv2d conv3x3(std::int64_t in, std::int64_t out, std::int64_t stride) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3)
                               .stride(stride)
                               .padding(1)
                               .bias(false)
                               .padding_mode(torch::kReplicate));
}

torch::nn::GroupNorm group_norm(std::int64_t channels, std::int64_t groups) {
  return torch::nn::GroupNorm(torch::nn::GroupNormOptions(std::gcd(channels, groups), channels));
}

}  // namespace

void EncoderConfig::validate() const {
  if (in_channels < 1 || stem_width < 1 || d_emb < 1 || norm_groups < 1) {
    throw ConfigError("encoder widths, d_emb and norm_groups must be positive");
  }
  if (stage_widths.empty() || stage_widths.size() != blocks.size()) {
    throw ConfigError("encoder stage_widths and blocks must be non-empty and the same length");
  }
  for (std::size_t i = 0; i < stage_widths.size(); ++i) {
    if (stage_widths[i] < 1 || blocks[i] < 1) throw ConfigError("encoder stage widths and block counts must be positive");
  }
  if (d_emb > stage_widths.back()) throw ConfigError("d_emb must not exceed the last stage width");
  for (auto t : taps) {
    if (t < 1 || t > static_cast<std::int64_t>(stage_widths.size())) throw ConfigError("encoder tap index out of range");
  }
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"in_channels", c.in_channels}, {"stem_width", c.stem_width}, {"stage_widths", c.stage_widths},
                     {"blocks", c.blocks},           {"d_emb", c.d_emb},           {"taps", c.taps},
                     {"norm_groups", c.norm_groups}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c.in_channels = j.value("in_channels", c.in_channels);
  c.stem_width = j.value("stem_width", c.stem_width);
  c.stage_widths = j.value("stage_widths", c.stage_widths);
  c.blocks = j.value("blocks", c.blocks);
  c.d_emb = j.value("d_emb", c.d_emb);
  c.taps = j.value("taps", c.taps);
  c.norm_groups = j.value("norm_groups", c.norm_groups);
}

ResidualBlockImpl::ResidualBlockImpl(std::int64_t in, std::int64_t out, std::int64_t stride, std::int64_t groups) {
  conv1_ = register_module("conv1", conv3x3(in, out, stride));
  norm1_ = register_module("norm1", group_norm(out, groups));
  conv2_ = register_module("conv2", conv3x3(out, out, 1));
  norm2_ = register_module("norm2", group_norm(out, groups));
  if (stride != 1 || in != out) {
    shortcut_ = register_module(
        "shortcut", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)));
    shortcut_norm_ = register_module("shortcut_norm", group_norm(out, groups));
  }
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) {
  auto y = torch::relu(norm1_(conv1_(x)));
  y = norm2_(conv2_(y));
  auto skip = shortcut_ ? shortcut_norm_(shortcut_(x)) : x;
  return torch::relu(y + skip);
}

SliceEncoderImpl::SliceEncoderImpl(EncoderConfig config) : config_(std::move(config)) {
  config_.validate();
  stem_conv_ = register_module("stem_conv", conv3x3(config_.in_channels, config_.stem_width, 1));
  stem_norm_ = register_module("stem_norm", group_norm(config_.stem_width, config_.norm_groups));
  std::int64_t prev = config_.stem_width;
  for (std::size_t s = 0; s < config_.stage_widths.size(); ++s) {
    torch::nn::ModuleList stage;
    const auto width = config_.stage_widths[s];
    for (std::int64_t b = 0; b < config_.blocks[s]; ++b) {
      const std::int64_t stride = (s > 0 && b == 0) ? 2 : 1;
      stage->push_back(ResidualBlock(prev, width, stride, config_.norm_groups));
      prev = width;
    }
    stages_.push_back(register_module("stage" + std::to_string(s + 1), stage));
  }
  proj_ = register_module("proj", torch::nn::Linear(prev, config_.d_emb));
}

torch::Tensor SliceEncoderImpl::stem_preactivation(const torch::Tensor& slices) { return stem_conv_(slices); }

EncoderOutput SliceEncoderImpl::forward(const torch::Tensor& slices, bool with_taps) {
  if (slices.dim() != 4) throw ShapeError("encoder expects (N, C, a, b) slices");
  if (slices.size(1) != config_.in_channels) {
    throw ShapeError("slice channel count " + std::to_string(slices.size(1)) + " does not match encoder in_channels " +
                     std::to_string(config_.in_channels) + " (see adapt_input_channels)");
  }
  EncoderOutput out;
  auto x = torch::relu(stem_norm_(stem_conv_(slices)));
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    for (const auto& block : *stages_[s]) x = block->as<ResidualBlock>()->forward(x);
    const auto stage = static_cast<std::int64_t>(s + 1);
    if (with_taps && std::find(config_.taps.begin(), config_.taps.end(), stage) != config_.taps.end()) {
      out.taps.push_back(Tap{stage, config_.stride_at(stage), x});
    }
  }
  out.embeddings = proj_(x.mean({2, 3}));
  return out;
}

EncoderOutput encode_slices(const PlaneSliceSet& slice_set, SliceEncoder& encoder, bool with_taps) {
  return encoder->forward(slice_set.slices, with_taps);
}

torch::Tensor duplicate_stem_kernel(const torch::Tensor& kernel, std::int64_t new_channels, bool scale) {
  if (kernel.dim() != 4) throw ShapeError("stem kernel must be (O, C, k, k)");
  if (kernel.size(1) != 1) throw ConfigError("stem kernel is already multi-channel; duplication needs C=1");
  if (new_channels < 1) throw ConfigError("new channel count must be >= 1");
  auto out = kernel.repeat({1, new_channels, 1, 1});
  if (scale) out = out / static_cast<double>(new_channels);
  return out.contiguous();
}

void adapt_input_channels(Checkpoint& checkpoint, std::int64_t new_channels, bool scale) {
  int adapted = 0;
  for (auto& [name, tensor] : checkpoint.parameters) {
    if (name.rfind("encoder.", 0) == 0 && name.size() > 17 &&
        name.compare(name.size() - 17, 17, ".stem_conv.weight") == 0) {
      tensor = duplicate_stem_kernel(tensor, new_channels, scale);
      ++adapted;
    }
  }
  if (adapted == 0) throw ConfigError("checkpoint has no encoder stem weights to adapt");
  if (checkpoint.config.is_object() && checkpoint.config.contains("encoder")) {
    checkpoint.config["encoder"]["in_channels"] = new_channels;
  }
}

}  // namespace medvit
