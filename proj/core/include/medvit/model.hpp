#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/nn.h>

#include "medvit/checkpoint.hpp"
#include "medvit/conv_encoder.hpp"
#include "medvit/multiview.hpp"
#include "medvit/slice_transformer.hpp"
#include "medvit/task_heads.hpp"
#include "medvit/volume.hpp"

namespace medvit {

// Architecture of the full network: three plane encoders, the slice transformer with
// segment embeddings, an optional mask token (masked pre-training) and an optional
// task head (fine-tuning).
struct ModelConfig {
  EncoderConfig encoder;
  TransformerConfig transformer;
  bool use_transformer = true;
  bool with_mask_token = false;
  bool zero_init_segments = false;
  std::optional<TaskSpec> task;
  FusionConfig fusion;

  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);

// Hash of the sections that must match for backbone parameters to transfer. The encoder
// input channel count is excluded because it can be adapted by stem duplication.
std::string backbone_fingerprint(const ModelConfig& config);

struct PlaneOutput {
  torch::Tensor embeddings;  // Z, (N, d_emb)
  torch::Tensor encodings;   // transformer output, (N, d_emb)
  std::vector<Tap> taps;
};

class MedicalTransformerImpl : public torch::nn::Module {
 public:
  explicit MedicalTransformerImpl(ModelConfig config);

  SliceEncoder encoder(PlaneId plane) const { return encoders_[static_cast<std::size_t>(plane_index(plane))]; }
  SliceTransformer transformer() const { return transformer_; }
  SegmentEncoding segments() const { return segments_; }
  const torch::Tensor& mask_token() const { return mask_token_; }
  PredictionHead head() const { return head_; }
  const ModelConfig& config() const { return config_; }

  // Slice embeddings (and taps) of one plane of a (C, W, D, H) volume tensor.
  EncoderOutput embed(const torch::Tensor& volume, PlaneId plane, bool with_taps = false);
  // Embeddings -> encoding vectors (positional + segment). Identity without a transformer.
  torch::Tensor to_tokens(const torch::Tensor& embeddings, PlaneId plane) const;
  // Transformer over one plane's tokens; identity without a transformer.
  torch::Tensor contextualize(const torch::Tensor& tokens, PlaneId plane);

  PlaneOutput forward_plane(const torch::Tensor& volume, PlaneId plane, bool with_taps);
  // Fused single- or multi-scale feature volume, according to the fusion config.
  FeatureVolume features(const torch::Tensor& volume);
  // Task output: (K) scores, (1) regression value or (L, W, D, H) logits.
  torch::Tensor forward(const torch::Tensor& volume);

  std::vector<torch::Tensor> encoder_parameters() const;
  // Transformer layers, segment embeddings and mask token.
  std::vector<torch::Tensor> sequence_parameters(bool include_segments = true) const;

 private:
  ModelConfig config_;
  std::array<SliceEncoder, 3> encoders_{nullptr, nullptr, nullptr};
  SliceTransformer transformer_{nullptr};
  SegmentEncoding segments_{nullptr};
  torch::Tensor mask_token_;
  PredictionHead head_{nullptr};
};
TORCH_MODULE(MedicalTransformer);

// Snapshot of every parameter plus provenance. `config` is stored as the model
// configuration merged with `extra` (training sections and the like).
Checkpoint make_checkpoint(const MedicalTransformer& model, const std::string& stage,
                           const nlohmann::json& extra);

struct BackboneLoad {
  bool include_sequence = true;  // transformer, segment vectors and mask token
  bool force = false;            // ignore a backbone fingerprint mismatch
  bool scale_duplicated = false; // divide duplicated stem kernels by the channel count
};

// Copies the encoder (and optionally sequence) parameters of `checkpoint` into `model`.
// A single-channel stem is duplicated when the model expects more input channels.
LoadReport load_backbone(MedicalTransformer& model, Checkpoint checkpoint, const BackboneLoad& options = {});

}  // namespace medvit
