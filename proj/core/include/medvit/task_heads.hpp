#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/nn.h>

#include "medvit/conv_encoder.hpp"
#include "medvit/multiview.hpp"
#include "medvit/volume.hpp"

namespace medvit {

enum class TaskKind { classification, regression, segmentation };

std::string task_id(TaskKind kind);  // "cls", "reg", "seg"
TaskKind task_from_id(const std::string& id);

struct TaskSpec {
  TaskKind kind = TaskKind::classification;
  std::int64_t num_classes = 3;
  // Segmentation label ids, ascending; index 0 must be background (label 0).
  std::vector<std::int64_t> label_set{0, 1, 2, 4};
  std::int64_t head_hidden = 64;
  // Single linear readout instead of one hidden layer.
  bool head_linear = false;

  std::int64_t output_width() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const TaskSpec& t);
void from_json(const nlohmann::json& j, TaskSpec& t);

enum class FusionMode { single_scale, multi_scale };

struct FusionConfig {
  FusionMode mode = FusionMode::single_scale;
  std::vector<std::int64_t> taps{2, 3, 4};

  void validate(const EncoderConfig& encoder) const;
  // Channel count of the fused volume: 3 d_emb (+ 3 x sum of tapped stage widths).
  std::int64_t fused_channels(const EncoderConfig& encoder) const;
};

void to_json(nlohmann::json& j, const FusionConfig& f);
void from_json(const nlohmann::json& j, FusionConfig& f);

// Throws ConfigError for incompatible combinations (segmentation needs multi-scale taps).
void validate_task_fusion(const TaskSpec& task, const FusionConfig& fusion, const EncoderConfig& encoder);

// Stacks a plane's per-slice tap maps (N, C, a', b') along that plane's axis.
torch::Tensor stack_tap(const torch::Tensor& tap, PlaneId plane);

// Trilinear (align_corners) resize of a (C, a, b, c) map to (C, W, D, H).
FeatureVolume upsample_map(const torch::Tensor& stacked, const std::array<std::int64_t, 3>& target,
                           const std::string& provenance = "scale");

// Stacked + resized tap maps, ordered by stage (shallow to deep) then plane
// (sagittal, coronal, axial).
std::vector<FeatureVolume> multi_scale_maps(const std::array<std::vector<Tap>, 3>& plane_taps,
                                            const std::array<std::int64_t, 3>& target);

// Voxelwise prediction network: Linear(F, hidden) -> ReLU -> Linear(hidden, out), or a
// single Linear(F, out) in linear mode.
class PredictionHeadImpl : public torch::nn::Module {
 public:
  PredictionHeadImpl(std::int64_t in_features, std::int64_t out_features, std::int64_t hidden, bool linear);
  // (F, W, D, H) -> (out, W, D, H)
  torch::Tensor forward(const torch::Tensor& fused);
  std::int64_t in_features() const { return in_features_; }
  torch::nn::Linear readout() const { return readout_; }

 private:
  std::int64_t in_features_;
  torch::nn::Linear hidden_{nullptr}, readout_{nullptr};
};
TORCH_MODULE(PredictionHead);

// (K) class scores: voxelwise head then global average pooling. No softmax.
torch::Tensor predict_classification(PredictionHead& head, const FeatureVolume& fused);
// Scalar prediction, shape (1).
torch::Tensor predict_regression(PredictionHead& head, const FeatureVolume& fused);
// (L, W, D, H) logits, no pooling.
torch::Tensor predict_segmentation(PredictionHead& head, const FeatureVolume& fused);

// Label ids -> class indices into `label_set`; throws on labels outside the set.
torch::Tensor labels_to_indices(const torch::Tensor& labels, const std::vector<std::int64_t>& label_set);
// Voxelwise argmax with ties resolved to the lowest label id.
LabelVolume argmax_labels(const torch::Tensor& logits, const std::vector<std::int64_t>& label_set);

// Softmax cross-entropy of (B, K) logits against (B) class indices.
torch::Tensor classification_loss(const torch::Tensor& logits, const torch::Tensor& classes);
// Mean absolute error.
torch::Tensor regression_loss(const torch::Tensor& predictions, const torch::Tensor& targets);
// Voxelwise cross-entropy plus soft-Dice loss (1 - mean per-label soft Dice), equally weighted.
// logits (L, W, D, H), labels (W, D, H) holding label ids.
torch::Tensor segmentation_loss(const torch::Tensor& logits, const torch::Tensor& labels,
                                const std::vector<std::int64_t>& label_set);
torch::Tensor soft_dice_loss(const torch::Tensor& probabilities, const torch::Tensor& one_hot);

// Dispatch on the task kind. Classification targets are class indices, regression
// targets real values, segmentation targets label-id volumes.
torch::Tensor task_loss(const torch::Tensor& outputs, const torch::Tensor& targets, const TaskSpec& spec);

}  // namespace medvit
