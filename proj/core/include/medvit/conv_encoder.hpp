#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/nn.h>

#include "medvit/multiview.hpp"

namespace medvit {

struct Checkpoint;

// Slim 2D residual encoder applied independently to the slices of one plane.
struct EncoderConfig {
  std::int64_t in_channels = 1;
  std::int64_t stem_width = 16;
  std::vector<std::int64_t> stage_widths{16, 32, 64, 140};
  std::vector<std::int64_t> blocks{2, 2, 2, 2};
  std::int64_t d_emb = 16;
  // 1-based stage indices whose outputs are exposed for multi-scale fusion.
  std::vector<std::int64_t> taps{2, 3, 4};
  // GroupNorm group count; reduced to gcd(groups, channels) per layer.
  std::int64_t norm_groups = 4;

  void validate() const;
  // Product of strides up to and including `stage` (1-based).
  std::int64_t stride_at(std::int64_t stage) const { return stage <= 1 ? 1 : std::int64_t{1} << (stage - 1); }
  std::int64_t width_at(std::int64_t stage) const { return stage_widths.at(static_cast<std::size_t>(stage - 1)); }
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

// Basic residual block: two 3x3 convs with GroupNorm, projection shortcut on shape change.
// Convolutions use replicate padding so spatially constant inputs stay constant.
class ResidualBlockImpl : public torch::nn::Module {
 public:
  ResidualBlockImpl(std::int64_t in, std::int64_t out, std::int64_t stride, std::int64_t groups);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, shortcut_{nullptr};
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr}, shortcut_norm_{nullptr};
};
TORCH_MODULE(ResidualBlock);

// Tapped stage output: (N, C_stage, ceil(a / stride), ceil(b / stride)).
struct Tap {
  std::int64_t stage = 0;
  std::int64_t stride = 1;
  torch::Tensor map;
};

struct EncoderOutput {
  torch::Tensor embeddings;  // (N, d_emb)
  std::vector<Tap> taps;
};

class SliceEncoderImpl : public torch::nn::Module {
 public:
  explicit SliceEncoderImpl(EncoderConfig config);

  // slices: (N, C, a, b). Taps are collected only when requested.
  EncoderOutput forward(const torch::Tensor& slices, bool with_taps = false);
  // Stem convolution output before normalisation.
  torch::Tensor stem_preactivation(const torch::Tensor& slices);

  const EncoderConfig& config() const { return config_; }

 private:
  EncoderConfig config_;
  torch::nn::Conv2d stem_conv_{nullptr};
  torch::nn::GroupNorm stem_norm_{nullptr};
  std::vector<torch::nn::ModuleList> stages_;
  torch::nn::Linear proj_{nullptr};
};
TORCH_MODULE(SliceEncoder);

EncoderOutput encode_slices(const PlaneSliceSet& slice_set, SliceEncoder& encoder, bool with_taps = false);

// Replicates a single-channel stem kernel (O, 1, k, k) along the input-channel axis.
torch::Tensor duplicate_stem_kernel(const torch::Tensor& kernel, std::int64_t new_channels, bool scale = false);

// Applies duplicate_stem_kernel to every `encoder.<plane>.stem_conv.weight` entry; other
// parameters are left untouched. Throws if the checkpoint is already multi-channel.
void adapt_input_channels(Checkpoint& checkpoint, std::int64_t new_channels, bool scale = false);

}  // namespace medvit
