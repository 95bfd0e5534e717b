#include "medvit/task_heads.hpp"

#include <algorithm>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "medvit/error.hpp"

namespace medvit {

namespace F = torch::nn::functional;

std::string task_id(TaskKind kind) {
  switch (kind) {
    case TaskKind::classification: return "cls";
    case TaskKind::regression: return "reg";
    case TaskKind::segmentation: return "seg";
  }
  return "?";
}

TaskKind task_from_id(const std::string& id) {
  if (id == "cls" || id == "classification") return TaskKind::classification;
  if (id == "reg" || id == "regression") return TaskKind::regression;
  if (id == "seg" || id == "segmentation") return TaskKind::segmentation;
  throw ConfigError("unknown task '" + id + "' (expected cls, reg or seg)");
}

std::int64_t TaskSpec::output_width() const {
  switch (kind) {
    case TaskKind::classification: return num_classes;
    case TaskKind::regression: return 1;
    case TaskKind::segmentation: return static_cast<std::int64_t>(label_set.size());
  }
  return 0;
}

void TaskSpec::validate() const {
  if (kind == TaskKind::classification && num_classes < 2) throw ConfigError("classification needs >= 2 classes");
  if (kind == TaskKind::segmentation) {
    if (label_set.size() < 2 || label_set.front() != 0) {
      throw ConfigError("segmentation label set must start with background 0 and hold >= 2 labels");
    }
    if (!std::is_sorted(label_set.begin(), label_set.end()) ||
        std::adjacent_find(label_set.begin(), label_set.end()) != label_set.end()) {
      throw ConfigError("segmentation label set must be strictly ascending");
    }
  }
  if (!head_linear && head_hidden < 1) throw ConfigError("head_hidden must be positive");
}

void to_json(nlohmann::json& j, const TaskSpec& t) {
  j = nlohmann::json{{"kind", task_id(t.kind)},
                     {"num_classes", t.num_classes},
                     {"label_set", t.label_set},
                     {"head_hidden", t.head_hidden},
                     {"head_linear", t.head_linear}};
}

void from_json(const nlohmann::json& j, TaskSpec& t) {
  if (j.contains("kind")) t.kind = task_from_id(j.at("kind").get<std::string>());
  t.num_classes = j.value("num_classes", t.num_classes);
  t.label_set = j.value("label_set", t.label_set);
  t.head_hidden = j.value("head_hidden", t.head_hidden);
  t.head_linear = j.value("head_linear", t.head_linear);
}

void FusionConfig::validate(const EncoderConfig& encoder) const {
  if (mode == FusionMode::multi_scale) {
    if (taps.empty()) throw ConfigError("multi-scale fusion needs at least one tap stage");
    for (auto t : taps) {
      if (std::find(encoder.taps.begin(), encoder.taps.end(), t) == encoder.taps.end()) {
        throw ConfigError("fusion tap " + std::to_string(t) + " is not exposed by the encoder");
      }
    }
  }
}

std::int64_t FusionConfig::fused_channels(const EncoderConfig& encoder) const {
  std::int64_t channels = 3 * encoder.d_emb;
  if (mode == FusionMode::multi_scale) {
    for (auto t : taps) channels += 3 * encoder.width_at(t);
  }
  return channels;
}

void to_json(nlohmann::json& j, const FusionConfig& f) {
  j = nlohmann::json{{"mode", f.mode == FusionMode::single_scale ? "single_scale" : "multi_scale"}, {"taps", f.taps}};
}

void from_json(const nlohmann::json& j, FusionConfig& f) {
  if (j.contains("mode")) {
    const auto m = j.at("mode").get<std::string>();
    if (m == "single_scale") {
      f.mode = FusionMode::single_scale;
    } else if (m == "multi_scale") {
      f.mode = FusionMode::multi_scale;
    } else {
      throw ConfigError("unknown fusion mode '" + m + "'");
    }
  }
  f.taps = j.value("taps", f.taps);
}

void validate_task_fusion(const TaskSpec& task, const FusionConfig& fusion, const EncoderConfig& encoder) {
  task.validate();
  fusion.validate(encoder);
  if (task.kind == TaskKind::segmentation && fusion.mode != FusionMode::multi_scale) {
    throw ConfigError("segmentation requires multi_scale fusion with encoder taps");
  }
}

torch::Tensor stack_tap(const torch::Tensor& tap, PlaneId plane) { return stack_slices(tap, plane); }

FeatureVolume upsample_map(const torch::Tensor& stacked, const std::array<std::int64_t, 3>& target,
                           const std::string& provenance) {
  if (!stacked.defined() || stacked.dim() != 4) throw ShapeError("upsample_map expects a (C, a, b, c) map");
  auto out = F::interpolate(stacked.unsqueeze(0), F::InterpolateFuncOptions()
                                                      .size(std::vector<std::int64_t>{target[0], target[1], target[2]})
                                                      .mode(torch::kTrilinear)
                                                      .align_corners(true));
  return FeatureVolume{out.squeeze(0), provenance};
}

std::vector<FeatureVolume> multi_scale_maps(const std::array<std::vector<Tap>, 3>& plane_taps,
                                            const std::array<std::int64_t, 3>& target) {
  std::vector<FeatureVolume> maps;
  const auto& reference = plane_taps[0];
  for (std::size_t t = 0; t < reference.size(); ++t) {
    for (auto plane : kPlanes) {
      const auto& taps = plane_taps[static_cast<std::size_t>(plane_index(plane))];
      if (taps.size() != reference.size() || taps[t].stage != reference[t].stage) {
        throw ShapeError("missing encoder taps for multi-scale fusion");
      }
      maps.push_back(upsample_map(stack_tap(taps[t].map, plane), target,
                                  std::string(plane_name(plane)) + "@stage" + std::to_string(taps[t].stage)));
    }
  }
  if (maps.empty()) throw ShapeError("missing encoder taps for multi-scale fusion");
  return maps;
}

PredictionHeadImpl::PredictionHeadImpl(std::int64_t in_features, std::int64_t out_features, std::int64_t hidden,
                                       bool linear)
    : in_features_(in_features) {
  if (linear) {
    readout_ = register_module("readout", torch::nn::Linear(in_features, out_features));
  } else {
    hidden_ = register_module("hidden", torch::nn::Linear(in_features, hidden));
    readout_ = register_module("readout", torch::nn::Linear(hidden, out_features));
  }
}

torch::Tensor PredictionHeadImpl::forward(const torch::Tensor& fused) {
  if (fused.dim() != 4 || fused.size(0) != in_features_) {
    throw ShapeError("prediction head expects " + std::to_string(in_features_) + " input channels, got " +
                     std::to_string(fused.dim() == 4 ? fused.size(0) : -1));
  }
  const auto spatial = fused.sizes().slice(1).vec();
  auto x = fused.reshape({in_features_, -1}).t();
  if (hidden_) x = torch::relu(hidden_(x));
  x = readout_(x);
  std::vector<std::int64_t> shape{x.size(1)};
  shape.insert(shape.end(), spatial.begin(), spatial.end());
  return x.t().reshape(shape);
}

torch::Tensor predict_classification(PredictionHead& head, const FeatureVolume& fused) {
  return head->forward(fused.data).mean({1, 2, 3});
}

torch::Tensor predict_regression(PredictionHead& head, const FeatureVolume& fused) {
  return head->forward(fused.data).mean({1, 2, 3});
}

torch::Tensor predict_segmentation(PredictionHead& head, const FeatureVolume& fused) {
  return head->forward(fused.data);
}

torch::Tensor labels_to_indices(const torch::Tensor& labels, const std::vector<std::int64_t>& label_set) {
  auto ids = labels.to(torch::kInt64);
  auto out = torch::full_like(ids, -1);
  for (std::size_t i = 0; i < label_set.size(); ++i) {
    out.masked_fill_(ids == label_set[i], static_cast<std::int64_t>(i));
  }
  if ((out < 0).any().item<bool>()) throw ConfigError("label volume holds ids outside the declared label set");
  return out;
}

LabelVolume argmax_labels(const torch::Tensor& logits, const std::vector<std::int64_t>& label_set) {
  if (logits.dim() != 4 || logits.size(0) != static_cast<std::int64_t>(label_set.size())) {
    throw ShapeError("argmax_labels expects (L, W, D, H) logits matching the label set");
  }
  // Scan in ascending label order and only replace on a strictly larger logit.
  auto best = logits[0].clone();
  auto index = torch::zeros(best.sizes(), torch::kInt64);
  for (std::int64_t l = 1; l < logits.size(0); ++l) {
    auto better = logits[l] > best;
    best = torch::where(better, logits[l], best);
    index.masked_fill_(better, l);
  }
  auto ids = torch::tensor(label_set, torch::kInt64).index({index});
  return LabelVolume(ids);
}

torch::Tensor classification_loss(const torch::Tensor& logits, const torch::Tensor& classes) {
  if (logits.dim() != 2 || classes.dim() != 1 || logits.size(0) != classes.size(0)) {
    throw ShapeError("classification_loss expects (B, K) logits and (B) classes");
  }
  if ((classes < 0).any().item<bool>() || (classes >= logits.size(1)).any().item<bool>()) {
    throw ConfigError("class index outside [0, K)");
  }
  return F::cross_entropy(logits, classes.to(torch::kInt64));
}

torch::Tensor regression_loss(const torch::Tensor& predictions, const torch::Tensor& targets) {
  if (predictions.sizes() != targets.sizes()) throw ShapeError("regression_loss shape mismatch");
  return (predictions - targets.to(predictions.dtype())).abs().mean();
}

torch::Tensor soft_dice_loss(const torch::Tensor& probabilities, const torch::Tensor& one_hot) {
  constexpr double eps = 1e-5;
  const auto l = probabilities.size(0);
  auto p = probabilities.reshape({l, -1});
  auto t = one_hot.reshape({l, -1}).to(probabilities.dtype());
  auto dice = (2.0 * (p * t).sum(1) + eps) / (p.sum(1) + t.sum(1) + eps);
  return 1.0 - dice.mean();
}

torch::Tensor segmentation_loss(const torch::Tensor& logits, const torch::Tensor& labels,
                                const std::vector<std::int64_t>& label_set) {
  if (logits.dim() != 4 || labels.dim() != 3 || logits.sizes().slice(1) != labels.sizes()) {
    throw ShapeError("segmentation_loss expects (L, W, D, H) logits and (W, D, H) labels");
  }
  const auto l = logits.size(0);
  if (l != static_cast<std::int64_t>(label_set.size())) throw ShapeError("logit channels differ from label set size");
  auto idx = labels_to_indices(labels, label_set);
  auto flat_logits = logits.reshape({l, -1}).t();
  auto ce = F::cross_entropy(flat_logits, idx.reshape({-1}));
  auto probs = torch::softmax(logits, 0);
  auto one_hot = F::one_hot(idx, l).permute({3, 0, 1, 2});
  return ce + soft_dice_loss(probs, one_hot);
}

torch::Tensor task_loss(const torch::Tensor& outputs, const torch::Tensor& targets, const TaskSpec& spec) {
  switch (spec.kind) {
    case TaskKind::classification:
      return classification_loss(outputs.dim() == 1 ? outputs.unsqueeze(0) : outputs,
                                 targets.dim() == 0 ? targets.unsqueeze(0) : targets);
    case TaskKind::regression:
      return regression_loss(outputs.reshape({-1}), targets.reshape({-1}));
    case TaskKind::segmentation:
      return segmentation_loss(outputs, targets, spec.label_set);
  }
  throw ConfigError("unknown task");
}

}  // namespace medvit
