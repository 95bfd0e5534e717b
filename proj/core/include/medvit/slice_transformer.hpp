#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/nn.h>

#include "medvit/multiview.hpp"

namespace medvit {

enum class AttentionMode {
  // Learned Q/K/V/O projections, `heads` heads.
  multi_head,
  // Projection-free single head: E + softmax(E E^T / sqrt(d)) E.
  projection_free,
};

struct TransformerConfig {
  std::int64_t d_emb = 16;
  std::int64_t d_ff = 64;
  std::int64_t heads = 4;
  std::int64_t layers = 1;
  // One transformer shared by all planes; otherwise one stack per plane.
  bool shared = true;
  AttentionMode mode = AttentionMode::multi_head;
  bool positional = true;
  bool ffn_bias = true;
  double dropout = 0.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TransformerConfig& c);
void from_json(const nlohmann::json& j, TransformerConfig& c);

// Sinusoidal table: PE[n, 2i] = sin(n / 10000^(2i/d)), PE[n, 2i+1] = cos(same).
torch::Tensor positional_encoding(std::int64_t n, std::int64_t d_emb,
                                  torch::TensorOptions options = torch::TensorOptions(torch::kFloat32));

// Tokens of one plane: (N, d_emb) plus per-position mask flags.
struct EncodingSequence {
  torch::Tensor tokens;
  PlaneId plane = PlaneId::sagittal;
  std::vector<bool> masked;

  std::int64_t length() const { return tokens.size(0); }
  std::int64_t masked_count() const;
};

// Learned per-plane vectors added to every token of the plane.
class SegmentEncodingImpl : public torch::nn::Module {
 public:
  SegmentEncodingImpl(std::int64_t d_emb, bool zero_init = false);
  torch::Tensor forward(PlaneId plane) const { return vectors_[static_cast<std::size_t>(plane_index(plane))]; }

 private:
  std::array<torch::Tensor, 3> vectors_;
};
TORCH_MODULE(SegmentEncoding);

// One block: Ebar = E + Attention(E); Ehat = Ebar + relu(Ebar F1) F2.
class AttentionBlockImpl : public torch::nn::Module {
 public:
  explicit AttentionBlockImpl(const TransformerConfig& config);
  torch::Tensor forward(const torch::Tensor& tokens);
  // Row-stochastic attention weights of the last forward call, (heads, N, N).
  const torch::Tensor& last_attention() const { return last_attention_; }

 private:
  torch::Tensor attend(const torch::Tensor& tokens);

  TransformerConfig config_;
  torch::nn::Linear query_{nullptr}, key_{nullptr}, value_{nullptr}, out_{nullptr};
  torch::nn::Linear ff1_{nullptr}, ff2_{nullptr};
  torch::nn::Dropout dropout_{nullptr};
  torch::Tensor last_attention_;
};
TORCH_MODULE(AttentionBlock);

class SliceTransformerImpl : public torch::nn::Module {
 public:
  explicit SliceTransformerImpl(TransformerConfig config);

  // tokens: (N, d_emb) with positional and segment encodings already added.
  torch::Tensor forward(const torch::Tensor& tokens, PlaneId plane);
  std::vector<AttentionBlock> blocks(PlaneId plane) const;
  const TransformerConfig& config() const { return config_; }

 private:
  TransformerConfig config_;
  std::vector<torch::nn::ModuleList> stacks_;
};
TORCH_MODULE(SliceTransformer);

// Applies the layer stack; throws NumericError if the output is not finite.
torch::Tensor encode(const EncodingSequence& sequence, SliceTransformer& transformer);

// Replaces the rows listed in `positions` with `mask_token`. Other rows are returned
// untouched. Positions must be unique and in range.
EncodingSequence apply_mask(const EncodingSequence& sequence, const std::vector<std::int64_t>& positions,
                            const torch::Tensor& mask_token);

// Embedding -> encoding vector: adds the positional table (when enabled) and the segment vector.
torch::Tensor add_position_and_segment(const torch::Tensor& embeddings, PlaneId plane, const torch::Tensor& segment,
                                       bool positional);

}  // namespace medvit
