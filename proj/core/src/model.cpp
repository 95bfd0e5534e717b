#include "medvit/model.hpp"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "medvit/checkpoint.hpp"
#include "medvit/error.hpp"

namespace medvit {

void ModelConfig::validate() const {
  encoder.validate();
  transformer.validate();
  if (transformer.d_emb != encoder.d_emb) throw ConfigError("transformer d_emb must equal encoder d_emb");
  if (task) validate_task_fusion(*task, fusion, encoder);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"encoder", c.encoder},
                     {"transformer", c.transformer},
                     {"use_transformer", c.use_transformer},
                     {"fusion", c.fusion}};
  if (c.task) j["task"] = *c.task;
}

std::string backbone_fingerprint(const ModelConfig& config) {
  nlohmann::json enc = config.encoder;
  enc.erase("in_channels");
  enc.erase("taps");
  nlohmann::json j{{"encoder", enc}, {"transformer", config.transformer}};
  return fnv1a_hex(j.dump());
}

MedicalTransformerImpl::MedicalTransformerImpl(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  torch::nn::ModuleDict encoders;
  for (auto p : kPlanes) {
    SliceEncoder enc(config_.encoder);
    encoders_[static_cast<std::size_t>(plane_index(p))] = enc;
    encoders->update({{std::string(plane_name(p)), enc.ptr()}});
  }
  register_module("encoder", encoders);
  if (config_.use_transformer) {
    transformer_ = register_module("transformer", SliceTransformer(config_.transformer));
    segments_ = register_module("segment", SegmentEncoding(config_.encoder.d_emb, config_.zero_init_segments));
    if (config_.with_mask_token) {
      mask_token_ = register_parameter("mask_token", torch::randn({config_.encoder.d_emb}) * 0.02);
    }
  }
  if (config_.task) {
    head_ = register_module("head", PredictionHead(config_.fusion.fused_channels(config_.encoder),
                                                   config_.task->output_width(), config_.task->head_hidden,
                                                   config_.task->head_linear));
  }
}

EncoderOutput MedicalTransformerImpl::embed(const torch::Tensor& volume, PlaneId plane, bool with_taps) {
  return encoder(plane)->forward(slices_of(volume, plane), with_taps);
}

torch::Tensor MedicalTransformerImpl::to_tokens(const torch::Tensor& embeddings, PlaneId plane) const {
  if (!transformer_) return embeddings;
  return add_position_and_segment(embeddings, plane, segments_->forward(plane), config_.transformer.positional);
}

torch::Tensor MedicalTransformerImpl::contextualize(const torch::Tensor& tokens, PlaneId plane) {
  if (!transformer_) return tokens;
  return encode(EncodingSequence{tokens, plane, {}}, transformer_);
}

PlaneOutput MedicalTransformerImpl::forward_plane(const torch::Tensor& volume, PlaneId plane, bool with_taps) {
  auto enc = embed(volume, plane, with_taps);
  PlaneOutput out;
  out.embeddings = enc.embeddings;
  out.encodings = contextualize(to_tokens(enc.embeddings, plane), plane);
  out.taps = std::move(enc.taps);
  return out;
}

FeatureVolume MedicalTransformerImpl::features(const torch::Tensor& volume) {
  if (volume.dim() != 4) throw ShapeError("model expects a (C, W, D, H) volume tensor");
  const std::array<std::int64_t, 3> spatial{volume.size(1), volume.size(2), volume.size(3)};
  const bool multi = config_.fusion.mode == FusionMode::multi_scale;
  std::array<FeatureVolume, 3> planes;
  std::array<std::vector<Tap>, 3> taps;
  for (auto p : kPlanes) {
    auto out = forward_plane(volume, p, multi);
    const auto i = static_cast<std::size_t>(plane_index(p));
    planes[i] = broadcast_encodings(out.encodings, p, spatial);
    for (auto& t : out.taps) {
      if (std::find(config_.fusion.taps.begin(), config_.fusion.taps.end(), t.stage) != config_.fusion.taps.end()) {
        taps[i].push_back(std::move(t));
      }
    }
  }
  if (!multi) return fuse_planes(planes);
  return fuse_planes(planes, multi_scale_maps(taps, spatial));
}

torch::Tensor MedicalTransformerImpl::forward(const torch::Tensor& volume) {
  if (!head_) throw ConfigError("model has no task head");
  auto fused = features(volume);
  switch (config_.task->kind) {
    case TaskKind::classification: return predict_classification(head_, fused);
    case TaskKind::regression: return predict_regression(head_, fused);
    case TaskKind::segmentation: return predict_segmentation(head_, fused);
  }
  throw ConfigError("unknown task");
}

std::vector<torch::Tensor> MedicalTransformerImpl::encoder_parameters() const {
  std::vector<torch::Tensor> out;
  for (const auto& enc : encoders_) {
    for (auto& p : enc->parameters()) out.push_back(p);
  }
  return out;
}

std::vector<torch::Tensor> MedicalTransformerImpl::sequence_parameters(bool include_segments) const {
  std::vector<torch::Tensor> out;
  if (!transformer_) return out;
  for (auto& p : transformer_->parameters()) out.push_back(p);
  if (include_segments) {
    for (auto& p : segments_->parameters()) out.push_back(p);
  }
  if (mask_token_.defined()) out.push_back(mask_token_);
  return out;
}

Checkpoint make_checkpoint(const MedicalTransformer& model, const std::string& stage, const nlohmann::json& extra) {
  Checkpoint ck;
  ck.parameters = snapshot_parameters(*model);
  ck.stage = stage;
  nlohmann::json config = model->config();
  for (const auto& [key, value] : extra.items()) config[key] = value;
  ck.config = config;
  ck.fingerprint = fnv1a_hex(config.dump());
  ck.backbone_fingerprint = backbone_fingerprint(model->config());
  return ck;
}

LoadReport load_backbone(MedicalTransformer& model, Checkpoint checkpoint, const BackboneLoad& options) {
  check_backbone_fingerprint(checkpoint, backbone_fingerprint(model->config()), options.force);
  const auto stem_key = "encoder." + std::string(plane_name(PlaneId::sagittal)) + ".stem_conv.weight";
  auto stem = checkpoint.parameters.find(stem_key);
  if (stem == checkpoint.parameters.end()) throw ConfigError("checkpoint has no encoder parameters");
  const auto have = stem->second.size(1);
  const auto want = model->config().encoder.in_channels;
  if (have != want) adapt_input_channels(checkpoint, want, options.scale_duplicated);

  std::map<std::string, torch::Tensor> selected;
  for (const auto& [name, tensor] : checkpoint.parameters) {
    const bool encoder = name.rfind("encoder.", 0) == 0;
    const bool sequence =
        name.rfind("transformer.", 0) == 0 || name.rfind("segment.", 0) == 0 || name == "mask_token";
    if (encoder || (sequence && options.include_sequence)) selected.emplace(name, tensor);
  }
  return load_parameters(*model, selected);
}

}  // namespace medvit
