#include "medvit/ssl_pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "medvit/error.hpp"

namespace medvit {

void BezierCurveParams::validate() const {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_unit(a) || !in_unit(b) || !in_unit(c) || !in_unit(d)) {
    throw ConfigError("Bezier control points must lie in [0, 1]^2");
  }
  if (a > c || b > d) throw ConfigError("Bezier control points need a <= c and b <= d");
}

namespace {

double cubic(double p1, double p2, double t) {
  const double s = 1.0 - t;
  return 3.0 * s * s * t * p1 + 3.0 * s * t * t * p2 + t * t * t;
}

}  // namespace

double BezierCurveParams::x_at(double t) const { return cubic(a, c, t); }
double BezierCurveParams::y_at(double t) const { return cubic(b, d, t); }

BezierCurveParams sample_bezier(Rng& rng) {
  BezierCurveParams p;
  p.a = rng.uniform();
  p.b = rng.uniform();
  p.c = rng.uniform();
  p.d = rng.uniform();
  if (p.a > p.c) std::swap(p.a, p.c);
  if (p.b > p.d) std::swap(p.b, p.d);
  return p;
}

double bezier_map_exact(const BezierCurveParams& params, double x) {
  if (!(x >= 0.0 && x <= 1.0)) throw ConfigError("Bezier input must lie in [0, 1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  double lo = 0.0;
  double hi = 1.0;
  while (hi - lo >= 1e-12) {
    const double mid = 0.5 * (lo + hi);
    if (params.x_at(mid) < x) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return std::clamp(params.y_at(0.5 * (lo + hi)), 0.0, 1.0);
}

BezierLut::BezierLut(const BezierCurveParams& params) {
  params.validate();
  table_.resize(static_cast<std::size_t>(kBezierLutSize));
  const double step = 1.0 / static_cast<double>(kBezierLutSize - 1);
  for (std::int64_t i = 0; i < kBezierLutSize; ++i) {
    table_[static_cast<std::size_t>(i)] = bezier_map_exact(params, std::min(1.0, static_cast<double>(i) * step));
  }
  table_.front() = 0.0;
  table_.back() = 1.0;
  // Guard against rounding making neighbouring exact samples non-monotone.
  for (std::size_t i = 1; i < table_.size(); ++i) table_[i] = std::max(table_[i], table_[i - 1]);
  table_tensor_ = torch::tensor(table_, torch::kFloat64);
}

double BezierLut::operator()(double x) const {
  if (!(x >= 0.0 && x <= 1.0)) throw ConfigError("Bezier input must lie in [0, 1]");
  const double pos = x * static_cast<double>(kBezierLutSize - 1);
  const auto i = std::min<std::int64_t>(static_cast<std::int64_t>(pos), kBezierLutSize - 2);
  const double w = pos - static_cast<double>(i);
  return table_[static_cast<std::size_t>(i)] * (1.0 - w) + table_[static_cast<std::size_t>(i + 1)] * w;
}

torch::Tensor BezierLut::apply(const torch::Tensor& values) const {
  torch::NoGradGuard no_grad;
  auto x = values.to(torch::kFloat64);
  if (x.numel() > 0 && (x.min().item<double>() < 0.0 || x.max().item<double>() > 1.0)) {
    throw ConfigError("Bezier transform needs intensities in [0, 1]; normalize the volume first");
  }
  auto pos = x * static_cast<double>(kBezierLutSize - 1);
  auto i0 = pos.floor().clamp(0, kBezierLutSize - 2).to(torch::kInt64);
  auto w = pos - i0.to(torch::kFloat64);
  auto flat = i0.reshape({-1});
  auto lo = table_tensor_.index_select(0, flat).view_as(x);
  auto hi = table_tensor_.index_select(0, flat + 1).view_as(x);
  return (lo * (1.0 - w) + hi * w).to(values.scalar_type());
}

Volume bezier_transform(const Volume& volume, const BezierCurveParams& params) {
  return Volume{BezierLut(params).apply(volume.data)};
}

torch::Tensor triplet_loss(const torch::Tensor& anchors, const torch::Tensor& positives,
                           const torch::Tensor& negatives, double margin) {
  if (anchors.numel() == 0) throw ShapeError("triplet loss needs a non-empty batch");
  if (anchors.sizes() != positives.sizes() || anchors.sizes() != negatives.sizes()) {
    throw ShapeError("triplet loss: anchor, positive and negative shapes differ");
  }
  if (margin < 0.0) throw ConfigError("triplet margin must be >= 0");
  auto a = anchors.dim() == 1 ? anchors.unsqueeze(0) : anchors;
  auto p = positives.dim() == 1 ? positives.unsqueeze(0) : positives;
  auto n = negatives.dim() == 1 ? negatives.unsqueeze(0) : negatives;
  auto d_pos = torch::linalg_vector_norm(a - p, 2, {-1});
  auto d_neg = torch::linalg_vector_norm(a - n, 2, {-1});
  return torch::clamp_min(d_pos - d_neg + margin, 0.0).mean();
}

torch::Tensor masked_prediction_loss(const torch::Tensor& predicted, const torch::Tensor& target,
                                     const std::vector<bool>& masked) {
  if (predicted.sizes() != target.sizes()) throw ShapeError("masked prediction: shape mismatch");
  if (predicted.dim() != 2 || static_cast<std::size_t>(predicted.size(0)) != masked.size()) {
    throw ShapeError("masked prediction: expected (N, d) tensors and N mask flags");
  }
  std::vector<std::int64_t> rows;
  for (std::size_t i = 0; i < masked.size(); ++i) {
    if (masked[i]) rows.push_back(static_cast<std::int64_t>(i));
  }
  if (rows.empty()) throw ConfigError("masked prediction needs at least one masked position");
  auto index = torch::tensor(rows, torch::kInt64);
  auto diff = predicted.index_select(0, index) - target.index_select(0, index);
  return diff.square().mean();
}

std::int64_t mask_count(std::int64_t n, double ratio) {
  if (!(ratio > 0.0) || ratio >= 1.0) throw ConfigError("mask ratio must be in (0, 1)");
  if (n < 1) throw ShapeError("cannot mask an empty sequence");
  const auto count = static_cast<std::int64_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
  if (count < 1) {
    throw ConfigError("mask ratio " + std::to_string(ratio) + " masks no slice of a " + std::to_string(n) +
                      "-slice sequence");
  }
  return count;
}

std::vector<std::int64_t> mask_indices(std::int64_t n, double ratio, std::uint64_t seed) {
  const auto count = mask_count(n, ratio);
  std::vector<std::int64_t> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), 0);
  Rng rng(seed);
  // Partial Fisher-Yates: the first `count` entries become a uniform sample.
  for (std::int64_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n - i)));
    std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(j)]);
  }
  all.resize(static_cast<std::size_t>(count));
  std::sort(all.begin(), all.end());
  return all;
}

MaskPlan make_mask_plan(const std::array<std::int64_t, 3>& lengths, double ratio, std::uint64_t seed) {
  MaskPlan plan;
  plan.ratio = ratio;
  plan.seed = seed;
  for (std::size_t p = 0; p < 3; ++p) plan.indices[p] = mask_indices(lengths[p], ratio, stream_seed(seed, p, 0x3a5c));
  return plan;
}

void SslConfig::validate() const {
  if (margin < 0.0) throw ConfigError("ssl.margin must be >= 0");
  if (!(mask_ratio > 0.0) || mask_ratio >= 1.0) throw ConfigError("ssl.mask_ratio must be in (0, 1)");
}

void to_json(nlohmann::json& j, const SslConfig& c) {
  j = nlohmann::json{{"margin", c.margin},
                     {"mask_ratio", c.mask_ratio},
                     {"target", c.target == MaskTarget::encoding ? "encoding" : "embedding"},
                     {"freeze_segments", c.freeze_segments},
                     {"augment_per_epoch", c.augment_per_epoch},
                     {"refresh_negatives", c.refresh_negatives},
                     {"dry_run", c.dry_run}};
}

void from_json(const nlohmann::json& j, SslConfig& c) {
  c.margin = j.value("margin", c.margin);
  c.mask_ratio = j.value("mask_ratio", c.mask_ratio);
  if (j.contains("target")) {
    const auto t = j.at("target").get<std::string>();
    if (t == "encoding") {
      c.target = MaskTarget::encoding;
    } else if (t == "embedding") {
      c.target = MaskTarget::embedding;
    } else {
      throw ConfigError("ssl.target must be \"encoding\" or \"embedding\", got \"" + t + "\"");
    }
  }
  c.freeze_segments = j.value("freeze_segments", c.freeze_segments);
  c.augment_per_epoch = j.value("augment_per_epoch", c.augment_per_epoch);
  c.refresh_negatives = j.value("refresh_negatives", c.refresh_negatives);
  c.dry_run = j.value("dry_run", c.dry_run);
}

namespace {

nlohmann::json stage_config(const TrainConfig& train, const SslConfig& ssl) {
  return nlohmann::json{{"train", train}, {"ssl", ssl}};
}

void check_channels(const Dataset& data, const ModelConfig& model) {
  if (data.size() == 0) throw Error("pre-training needs a non-empty dataset");
  for (const auto& s : data.samples) {
    if (s.volume.channels() != model.encoder.in_channels) {
      throw ConfigError("subject " + s.record.subject_id + " has " + std::to_string(s.volume.channels()) +
                        " channels but the encoder expects " + std::to_string(model.encoder.in_channels));
    }
  }
}

class EncoderStage : public Trainable {
 public:
  EncoderStage(const Dataset& data, MedicalTransformer model, const TrainConfig& train, const SslConfig& ssl)
      : data_(data), model_(std::move(model)), train_(train), ssl_(ssl) {}

  std::vector<torch::Tensor> trainable_parameters() override { return model_->encoder_parameters(); }
  std::size_t train_size() const override { return data_.size(); }

  void on_epoch_start(std::int64_t) override {
    for (auto& b : buffer_) b = torch::Tensor();
    previous_.clear();
    loss_sum_ = 0.0;
    seen_ = 0;
  }

  double train_batch(std::span<const std::size_t> indices, std::int64_t epoch) override {
    const auto batch = static_cast<std::int64_t>(indices.size());
    std::array<torch::Tensor, 3> negatives;
    if (previous_.empty()) {
      if (batch < 2) throw Error("triplet pre-training needs a batch of at least 2 when no negatives are buffered");
      negatives = embed_subjects(indices);
      for (auto& n : negatives) n = n.roll(1, 0);
    } else if (ssl_.refresh_negatives) {
      negatives = embed_subjects(previous_);
    } else {
      negatives = buffer_;
    }

    std::array<std::vector<torch::Tensor>, 3> anchors;
    double total = 0.0;
    for (std::int64_t j = 0; j < batch; ++j) {
      const auto sample = indices[static_cast<std::size_t>(j)];
      const auto& x = data_.samples[sample].volume;
      Rng rng(stream_seed(stream_seed(train_.seed, 0xbe21), ssl_.augment_per_epoch ? epoch : 0, sample));
      const auto positive_volume = bezier_transform(x, sample_bezier(rng));

      std::optional<torch::NoGradGuard> no_grad;
      if (ssl_.dry_run) no_grad.emplace();
      torch::Tensor loss;
      for (auto p : kPlanes) {
        // Anchor and positive slices go through the encoder as one batch.
        const auto n = x.data.size(plane_axis(p) + 1);
        auto slices = torch::cat({slices_of(x.data, p), slices_of(positive_volume.data, p)});
        auto emb = model_->encoder(p)->forward(slices).embeddings;
        auto a = emb.slice(0, 0, n).mean(0);
        auto pos = emb.slice(0, n).mean(0);
        const auto& neg_rows = negatives[idx(p)];
        auto term = triplet_loss(a, pos, neg_rows[j % neg_rows.size(0)], ssl_.margin);
        loss = loss.defined() ? loss + term : term;
        anchors[idx(p)].push_back(a.detach());
      }
      loss = loss / 3.0;
      if (!ssl_.dry_run) (loss / static_cast<double>(batch)).backward();
      total += loss.item<double>();
    }
    for (auto p : kPlanes) buffer_[idx(p)] = torch::stack(anchors[idx(p)]);
    previous_.assign(indices.begin(), indices.end());
    loss_sum_ += total;
    seen_ += batch;
    return total / static_cast<double>(batch);
  }

  double validate(std::int64_t) override { return loss_sum_ / static_cast<double>(std::max<std::int64_t>(seen_, 1)); }
  std::map<std::string, torch::Tensor> state() override { return snapshot_parameters(*model_); }
  void restore(const std::map<std::string, torch::Tensor>& s) override { load_parameters(*model_, s); }

 private:
  static std::size_t idx(PlaneId p) { return static_cast<std::size_t>(plane_index(p)); }
  torch::Tensor anchor(const torch::Tensor& volume, PlaneId plane) {
    return model_->embed(volume, plane).embeddings.mean(0);
  }
  // Current-encoder slice-averaged embeddings of the given subjects, without gradient.
  std::array<torch::Tensor, 3> embed_subjects(std::span<const std::size_t> subjects) {
    torch::NoGradGuard no_grad;
    std::array<torch::Tensor, 3> out;
    for (auto p : kPlanes) {
      std::vector<torch::Tensor> rows;
      for (auto i : subjects) rows.push_back(anchor(data_.samples[i].volume.data, p));
      out[idx(p)] = torch::stack(rows);
    }
    return out;
  }

  const Dataset& data_;
  MedicalTransformer model_;
  TrainConfig train_;
  SslConfig ssl_;
  std::array<torch::Tensor, 3> buffer_;
  std::vector<std::size_t> previous_;
  double loss_sum_ = 0.0;
  std::int64_t seen_ = 0;
};

class MaskedStage : public Trainable {
 public:
  MaskedStage(const Dataset& data, MedicalTransformer model, const TrainConfig& train, const SslConfig& ssl)
      : data_(data), model_(std::move(model)), train_(train), ssl_(ssl) {
    // The encoders are frozen, so their embeddings can be computed once.
    torch::NoGradGuard no_grad;
    for (const auto& s : data_.samples) {
      std::array<torch::Tensor, 3> z;
      for (auto p : kPlanes) z[idx(p)] = model_->embed(s.volume.data, p).embeddings;
      cache_.push_back(z);
    }
  }

  std::vector<torch::Tensor> trainable_parameters() override {
    return model_->sequence_parameters(!ssl_.freeze_segments);
  }
  std::size_t train_size() const override { return data_.size(); }

  void on_epoch_start(std::int64_t) override {
    loss_sum_ = 0.0;
    seen_ = 0;
  }

  double train_batch(std::span<const std::size_t> indices, std::int64_t epoch) override {
    const auto batch = static_cast<double>(indices.size());
    double total = 0.0;
    for (auto sample : indices) {
      const auto& z = cache_[sample];
      const std::array<std::int64_t, 3> lengths{z[0].size(0), z[1].size(0), z[2].size(0)};
      const auto plan = make_mask_plan(lengths, ssl_.mask_ratio, stream_seed(train_.seed, epoch, sample));

      std::optional<torch::NoGradGuard> no_grad;
      if (ssl_.dry_run) no_grad.emplace();
      torch::Tensor loss;
      for (auto p : kPlanes) {
        const auto& emb = z[idx(p)];
        auto masked = apply_mask(EncodingSequence{emb, p, {}}, plan.of(p), model_->mask_token());
        auto predicted = model_->contextualize(model_->to_tokens(masked.tokens, p), p);
        auto target = ssl_.target == MaskTarget::encoding ? model_->to_tokens(emb, p).detach() : emb;
        auto term = masked_prediction_loss(predicted, target, masked.masked);
        loss = loss.defined() ? loss + term : term;
      }
      loss = loss / 3.0;
      if (!ssl_.dry_run) (loss / batch).backward();
      total += loss.item<double>();
    }
    loss_sum_ += total;
    seen_ += static_cast<std::int64_t>(indices.size());
    return total / batch;
  }

  double validate(std::int64_t) override { return loss_sum_ / static_cast<double>(std::max<std::int64_t>(seen_, 1)); }
  std::map<std::string, torch::Tensor> state() override { return snapshot_parameters(*model_); }
  void restore(const std::map<std::string, torch::Tensor>& s) override { load_parameters(*model_, s); }

 private:
  static std::size_t idx(PlaneId p) { return static_cast<std::size_t>(plane_index(p)); }

  const Dataset& data_;
  MedicalTransformer model_;
  TrainConfig train_;
  SslConfig ssl_;
  std::vector<std::array<torch::Tensor, 3>> cache_;
  double loss_sum_ = 0.0;
  std::int64_t seen_ = 0;
};

}  // namespace

PretrainResult pretrain_encoder(const Dataset& data, const ModelConfig& model_config, const TrainConfig& train,
                                const SslConfig& ssl) {
  train.validate();
  ssl.validate();
  ModelConfig cfg = model_config;
  cfg.use_transformer = false;
  cfg.with_mask_token = false;
  cfg.task.reset();
  cfg.validate();
  check_channels(data, cfg);

  torch::manual_seed(train.seed);
  MedicalTransformer model(cfg);
  EncoderStage stage(data, model, train, ssl);
  TrainOptions options;
  options.goal = MetricGoal::minimize;
  options.restore_best = false;
  options.freeze = ssl.dry_run;
  auto run = medvit::train(stage, train, options);

  PretrainResult result;
  result.history = run.history;
  result.checkpoint = make_checkpoint(model, kStageEncoderSsl, stage_config(train, ssl));
  result.checkpoint.epoch = static_cast<std::int64_t>(run.history.size());
  if (!run.history.empty()) result.checkpoint.best_metric = run.history.back().metric;
  result.encoder_hash_before = result.encoder_hash_after = hash_parameters(result.checkpoint.parameters, "encoder.");
  return result;
}

PretrainResult pretrain_transformer(const Dataset& data, const Checkpoint& encoder_checkpoint,
                                    const ModelConfig& model_config, const TrainConfig& train, const SslConfig& ssl,
                                    bool force) {
  train.validate();
  ssl.validate();
  if (encoder_checkpoint.stage != kStageEncoderSsl && !force) {
    throw ConfigError("masked pre-training needs an \"" + std::string(kStageEncoderSsl) +
                      "\" checkpoint, got stage \"" + encoder_checkpoint.stage + "\"");
  }
  if (!encoder_checkpoint.has_prefix("encoder.")) throw ConfigError("checkpoint holds no encoder parameters");
  ModelConfig cfg = model_config;
  cfg.use_transformer = true;
  cfg.with_mask_token = true;
  cfg.task.reset();
  cfg.validate();
  check_channels(data, cfg);

  torch::manual_seed(train.seed);
  MedicalTransformer model(cfg);
  BackboneLoad load;
  load.include_sequence = false;
  load.force = force;
  load_backbone(model, encoder_checkpoint, load);
  for (auto& p : model->encoder_parameters()) p.set_requires_grad(false);
  if (ssl.freeze_segments) {
    for (auto& p : model->segments()->parameters()) p.set_requires_grad(false);
  }

  const auto before = hash_parameters(snapshot_parameters(*model), "encoder.");
  MaskedStage stage(data, model, train, ssl);
  TrainOptions options;
  options.goal = MetricGoal::minimize;
  options.restore_best = false;
  options.freeze = ssl.dry_run;
  auto run = medvit::train(stage, train, options);

  PretrainResult result;
  result.history = run.history;
  result.checkpoint = make_checkpoint(model, kStageTransformerSsl, stage_config(train, ssl));
  result.checkpoint.epoch = static_cast<std::int64_t>(run.history.size());
  if (!run.history.empty()) result.checkpoint.best_metric = run.history.back().metric;
  result.encoder_hash_before = before;
  result.encoder_hash_after = hash_parameters(result.checkpoint.parameters, "encoder.");
  if (result.encoder_hash_after != before) {
    throw NumericError("encoder parameters changed during masked pre-training (" + before + " -> " +
                       result.encoder_hash_after + ")");
  }
  // Restore trainability so callers can keep using the parameters.
  for (auto& p : model->parameters()) p.set_requires_grad(true);
  return result;
}

}  // namespace medvit
