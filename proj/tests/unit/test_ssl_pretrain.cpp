#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "medvit/dataset.hpp"
#include "medvit/error.hpp"
#include "medvit/model.hpp"
#include "medvit/ssl_pretrain.hpp"
#include "oracles.hpp"

using namespace medvit;

namespace {

ModelConfig tiny_model() {
  ModelConfig m;
  m.encoder.stem_width = 4;
  m.encoder.stage_widths = {4, 8};
  m.encoder.blocks = {1, 1};
  m.encoder.d_emb = 4;
  m.encoder.taps = {2};
  m.transformer.d_emb = 4;
  m.transformer.d_ff = 8;
  m.transformer.heads = 2;
  m.fusion.taps = {2};
  return m;
}

Dataset tiny_data(std::int64_t count) {
  PhantomSpec spec;
  spec.grid = {8, 8, 8};
  return make_phantom_dataset(spec, count);
}

TrainConfig quick_train(std::int64_t epochs, std::int64_t batch) {
  TrainConfig t;
  t.lr = 1e-3;
  t.max_epochs = epochs;
  t.patience = epochs;
  t.batch_size = batch;
  return t;
}

// Eight slices per plane: a quarter of them are masked.
SslConfig tiny_ssl() {
  SslConfig s;
  s.mask_ratio = 0.25;
  return s;
}

// Triplet term for row i given explicit distances along the first axis.
double brute_triplet(const torch::Tensor& a, const torch::Tensor& p, const torch::Tensor& n, double margin) {
  double total = 0.0;
  for (std::int64_t r = 0; r < a.size(0); ++r) {
    double dp = 0.0, dn = 0.0;
    for (std::int64_t c = 0; c < a.size(1); ++c) {
      const double x = a[r][c].item<double>();
      dp += std::pow(x - p[r][c].item<double>(), 2);
      dn += std::pow(x - n[r][c].item<double>(), 2);
    }
    total += std::max(0.0, std::sqrt(dp) - std::sqrt(dn) + margin);
  }
  return total / static_cast<double>(a.size(0));
}

}  // namespace

TEST_SUITE("ssl_pretrain") {
  TEST_CASE("collinear control points give the identity map") {
    BezierCurveParams identity;
    BezierLut lut(identity);
    for (double x : {0.0, 0.013, 0.25, 0.5, 0.77, 0.999, 1.0}) {
      CHECK(bezier_map_exact(identity, x) == doctest::Approx(x).epsilon(1e-10));
      CHECK(lut(x) == doctest::Approx(x).epsilon(1e-10));
    }
  }

  TEST_CASE("exact map solves x(t) = x and returns y(t)") {
    BezierCurveParams p{0.1, 0.6, 0.4, 0.9};
    for (double t : {0.05, 0.3, 0.6, 0.95}) {
      CHECK(bezier_map_exact(p, p.x_at(t)) == doctest::Approx(p.y_at(t)).epsilon(1e-10));
    }
  }

  TEST_CASE("1000 random curves: monotone, endpoints fixed, distinct inputs stay distinct") {
    Rng rng(2024);
    Rng probe(7);
    for (int draw = 0; draw < 1000; ++draw) {
      auto params = sample_bezier(rng);
      REQUIRE_NOTHROW(params.validate());
      BezierLut lut(params);
      const auto& table = lut.table();
      REQUIRE(table.size() == static_cast<std::size_t>(kBezierLutSize));
      CHECK(table.front() == 0.0);
      CHECK(table.back() == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(lut(0.0) == 0.0);
      CHECK(lut(1.0) == doctest::Approx(1.0).epsilon(1e-12));
      bool strictly = true;
      for (std::size_t i = 1; i < table.size(); ++i) strictly = strictly && table[i] > table[i - 1];
      CHECK(strictly);
      // Table nodes are exact samples of the curve.
      const auto node = static_cast<std::size_t>(probe.below(static_cast<std::uint64_t>(kBezierLutSize)));
      const double xn = static_cast<double>(node) / static_cast<double>(kBezierLutSize - 1);
      CHECK(table[node] == doctest::Approx(bezier_map_exact(params, xn)).epsilon(1e-9));
      // Sorted inputs map to sorted outputs.
      std::vector<double> xs;
      for (int i = 0; i < 64; ++i) xs.push_back(probe.uniform());
      std::sort(xs.begin(), xs.end());
      for (std::size_t i = 1; i < xs.size(); ++i) CHECK(lut(xs[i]) >= lut(xs[i - 1]));
    }
  }

  TEST_CASE("tensor transform keeps shape, dtype and the unit range") {
    Rng rng(5);
    auto params = sample_bezier(rng);
    Volume v(torch::rand({2, 4, 5, 6}));
    auto out = bezier_transform(v, params);
    CHECK(out.data.sizes() == v.data.sizes());
    CHECK(out.data.dtype() == torch::kFloat32);
    CHECK(out.data.min().item<float>() >= 0.0f);
    CHECK(out.data.max().item<float>() <= 1.0f);
    BezierLut lut(params);
    const double x = v.data[1][2][3][4].item<double>();
    CHECK(out.data[1][2][3][4].item<double>() == doctest::Approx(lut(x)).epsilon(1e-6));
    CHECK_THROWS_AS(bezier_transform(Volume(torch::full({1, 2, 2, 2}, 1.5f)), params), ConfigError);
  }

  TEST_CASE("invalid control points are rejected") {
    BezierCurveParams p{0.7, 0.2, 0.3, 0.9};
    CHECK_THROWS_AS(p.validate(), ConfigError);
    p = BezierCurveParams{0.2, 0.2, 0.3, 1.2};
    CHECK_THROWS_AS(p.validate(), ConfigError);
  }

  TEST_CASE("triplet loss worked examples") {
    auto a = torch::zeros({1, 2}, torch::kFloat64);
    CHECK(triplet_loss(a, a, torch::tensor({{2.0, 0.0}}, torch::kFloat64), 1.0).item<double>() == 0.0);
    auto p = torch::tensor({{0.0, 1.0}}, torch::kFloat64);
    auto n = torch::tensor({{0.3, 0.4}}, torch::kFloat64);
    CHECK(triplet_loss(a, p, n, 0.2).item<double>() == doctest::Approx(0.7).epsilon(1e-12));
    // Margin zero with identical anchor and positive.
    CHECK(triplet_loss(p, p, n, 0.0).item<double>() == 0.0);
  }

  TEST_CASE("triplet loss on a random batch of 8 matches elementwise evaluation") {
    torch::manual_seed(3);
    auto a = torch::randn({8, 16}, torch::kFloat64);
    auto p = a + 0.3 * torch::randn({8, 16}, torch::kFloat64);
    auto n = torch::randn({8, 16}, torch::kFloat64);
    for (double margin : {0.0, 0.5, 1.0, 4.0}) {
      const double got = triplet_loss(a, p, n, margin).item<double>();
      CHECK(got == doctest::Approx(brute_triplet(a, p, n, margin)).epsilon(1e-12));
      CHECK(got >= 0.0);
    }
    CHECK_THROWS_AS(triplet_loss(torch::zeros({0, 4}), torch::zeros({0, 4}), torch::zeros({0, 4}), 1.0), ShapeError);
    CHECK_THROWS_AS(triplet_loss(a, p, n.slice(0, 0, 4), 1.0), ShapeError);
  }

  TEST_CASE("triplet loss is zero exactly when every margin is satisfied") {
    auto a = torch::zeros({3, 1}, torch::kFloat64);
    auto p = torch::tensor({{0.1}, {0.2}, {0.0}}, torch::kFloat64);
    auto far = torch::tensor({{1.2}, {1.3}, {1.0}}, torch::kFloat64);
    CHECK(triplet_loss(a, p, far, 1.0).item<double>() == 0.0);
    auto near = far.clone();
    near[1][0] = 1.1;
    CHECK(triplet_loss(a, p, near, 1.0).item<double>() > 0.0);
  }

  TEST_CASE("masked prediction loss worked examples") {
    auto target = torch::zeros({3, 2}, torch::kFloat64);
    auto pred = torch::tensor({{9.0, 9.0}, {3.0, 4.0}, {7.0, 7.0}}, torch::kFloat64);
    CHECK(masked_prediction_loss(pred, target, {false, true, false}).item<double>() == 12.5);
    CHECK(masked_prediction_loss(target, target, {true, true, false}).item<double>() == 0.0);
    CHECK_THROWS_AS(masked_prediction_loss(pred, target, {false, false, false}), ConfigError);
    CHECK_THROWS_AS(masked_prediction_loss(pred, target, {true}), ShapeError);
  }

  TEST_CASE("masked prediction loss matches the brute-force masked-row mean") {
    torch::manual_seed(4);
    auto pred = torch::randn({10, 5}, torch::kFloat64);
    auto target = torch::randn({10, 5}, torch::kFloat64);
    std::vector<bool> mask{true, false, false, true, true, false, false, false, true, false};
    double sum = 0.0;
    int count = 0;
    for (std::int64_t r = 0; r < 10; ++r) {
      if (!mask[static_cast<std::size_t>(r)]) continue;
      for (std::int64_t c = 0; c < 5; ++c) {
        sum += std::pow(pred[r][c].item<double>() - target[r][c].item<double>(), 2);
        ++count;
      }
    }
    CHECK(masked_prediction_loss(pred, target, mask).item<double>() == doctest::Approx(sum / count).epsilon(1e-12));
  }

  TEST_CASE("mask plans: 96/114/96 slices at ratio 0.1 mask 9/11/9") {
    auto plan = make_mask_plan({96, 114, 96}, 0.1, 17);
    CHECK(plan.of(PlaneId::sagittal).size() == 9);
    CHECK(plan.of(PlaneId::coronal).size() == 11);
    CHECK(plan.of(PlaneId::axial).size() == 9);
    for (auto plane : kPlanes) {
      const auto& idx = plan.of(plane);
      CHECK(std::is_sorted(idx.begin(), idx.end()));
      CHECK(std::set<std::int64_t>(idx.begin(), idx.end()).size() == idx.size());
      CHECK(idx.front() >= 0);
      CHECK(idx.back() < (plane == PlaneId::coronal ? 114 : 96));
    }
    CHECK_THROWS_AS(mask_count(96, 0.0), ConfigError);
    CHECK_THROWS_AS(mask_count(5, 0.1), ConfigError);
  }

  TEST_CASE("mask plans are deterministic per seed and differ across epochs") {
    auto a = make_mask_plan({96, 114, 96}, 0.1, stream_seed(3, 0, 7));
    auto b = make_mask_plan({96, 114, 96}, 0.1, stream_seed(3, 0, 7));
    CHECK(a.indices == b.indices);
    std::set<std::vector<std::int64_t>> distinct;
    for (std::uint64_t epoch = 0; epoch < 10; ++epoch) {
      distinct.insert(make_mask_plan({96, 114, 96}, 0.1, stream_seed(3, epoch, 7)).of(PlaneId::coronal));
    }
    CHECK(distinct.size() == 10);
  }

  TEST_CASE("mask indices are uniform over positions") {
    std::vector<int> hits(20, 0);
    for (std::uint64_t s = 0; s < 4000; ++s) {
      for (auto i : mask_indices(20, 0.1, s)) ++hits[static_cast<std::size_t>(i)];
    }
    // Each position is expected 400 times; allow six standard deviations.
    for (int h : hits) CHECK(std::abs(h - 400) < 6 * 19);
  }

  TEST_CASE("triplet objective gradients through a miniature encoder match finite differences") {
    torch::manual_seed(5);
    auto cfg = tiny_model();
    cfg.use_transformer = false;
    MedicalTransformer model(cfg);
    auto params = testing::double_parameters(*model);
    auto x = torch::rand({1, 5, 5, 5}, torch::kFloat64);
    auto y = torch::rand({1, 5, 5, 5}, torch::kFloat64);
    BezierLut lut(BezierCurveParams{0.2, 0.5, 0.6, 0.9});
    auto xp = lut.apply(x);
    auto loss = [&] {
      torch::Tensor total;
      for (auto p : kPlanes) {
        auto a = model->embed(x, p).embeddings.mean(0);
        auto pos = model->embed(xp, p).embeddings.mean(0);
        auto neg = model->embed(y, p).embeddings.mean(0);
        auto t = triplet_loss(a, pos, neg, 5.0);
        total = total.defined() ? total + t : t;
      }
      return total / 3.0;
    };
    REQUIRE(loss().item<double>() > 0.0);
    CHECK(testing::gradient_check(loss, model->encoder_parameters()) < 1e-4);
  }

  TEST_CASE("masked objective gradients through a miniature transformer match finite differences") {
    torch::manual_seed(6);
    auto cfg = tiny_model();
    cfg.with_mask_token = true;
    MedicalTransformer model(cfg);
    testing::double_parameters(*model);
    auto z = torch::randn({7, 4}, torch::kFloat64);
    // The target is a stop-gradient constant, so the oracle holds it fixed as well.
    auto target = model->to_tokens(z, PlaneId::coronal).detach();
    auto loss = [&] {
      auto masked = apply_mask(EncodingSequence{z, PlaneId::coronal, {}}, {1, 5}, model->mask_token());
      auto pred = model->contextualize(model->to_tokens(masked.tokens, PlaneId::coronal), PlaneId::coronal);
      return masked_prediction_loss(pred, target, masked.masked);
    };
    CHECK(testing::gradient_check(loss, model->sequence_parameters()) < 1e-4);
  }

  TEST_CASE("frozen dry run gives the same loss every epoch") {
    auto data = tiny_data(6);
    auto train = quick_train(3, 6);
    train.shuffle = false;
    SslConfig ssl;
    ssl.dry_run = true;
    ssl.augment_per_epoch = false;
    auto r = pretrain_encoder(data, tiny_model(), train, ssl);
    REQUIRE(r.history.size() == 3);
    CHECK(r.history[1].train_loss == r.history[0].train_loss);
    CHECK(r.history[2].train_loss == r.history[0].train_loss);
  }

  TEST_CASE("encoder stage checkpoint holds encoders only and is reproducible") {
    auto data = tiny_data(6);
    auto train = quick_train(2, 3);
    auto a = pretrain_encoder(data, tiny_model(), train, SslConfig{});
    auto b = pretrain_encoder(data, tiny_model(), train, SslConfig{});
    CHECK(a.checkpoint.stage == kStageEncoderSsl);
    CHECK(a.checkpoint.has_prefix("encoder.sagittal."));
    CHECK_FALSE(a.checkpoint.has_prefix("transformer."));
    CHECK_FALSE(a.checkpoint.has_prefix("head."));
    CHECK(hash_parameters(a.checkpoint.parameters) == hash_parameters(b.checkpoint.parameters));
    CHECK(a.history[0].train_loss == b.history[0].train_loss);
  }

  TEST_CASE("masked stage keeps the encoder bytes and trains the sequence parameters") {
    auto data = tiny_data(6);
    auto train = quick_train(2, 3);
    auto stage1 = pretrain_encoder(data, tiny_model(), train, SslConfig{});
    auto stage2 = pretrain_transformer(data, stage1.checkpoint, tiny_model(), train, tiny_ssl());
    CHECK(stage2.checkpoint.stage == kStageTransformerSsl);
    CHECK(stage2.encoder_hash_before == stage2.encoder_hash_after);
    CHECK(stage2.encoder_hash_after == hash_parameters(stage1.checkpoint.parameters, "encoder."));
    CHECK(stage2.checkpoint.has_prefix("transformer."));
    CHECK(stage2.checkpoint.has_prefix("mask_token"));
    CHECK(std::isfinite(stage2.history.back().train_loss));
  }

  TEST_CASE("masked stage needs an encoder-stage checkpoint unless forced") {
    auto data = tiny_data(4);
    auto train = quick_train(1, 2);
    auto stage1 = pretrain_encoder(data, tiny_model(), train, SslConfig{});
    auto wrong = stage1.checkpoint;
    wrong.stage = kStageFinetuned;
    CHECK_THROWS_AS(pretrain_transformer(data, wrong, tiny_model(), train, tiny_ssl()), ConfigError);
    CHECK_NOTHROW(pretrain_transformer(data, wrong, tiny_model(), train, tiny_ssl(), true));
    Checkpoint empty;
    empty.stage = kStageEncoderSsl;
    CHECK_THROWS_AS(pretrain_transformer(data, empty, tiny_model(), train, tiny_ssl()), ConfigError);
  }

  TEST_CASE("a single-sample batch without buffered negatives is an error") {
    auto data = tiny_data(1);
    CHECK_THROWS_AS(pretrain_encoder(data, tiny_model(), quick_train(1, 1), SslConfig{}), Error);
  }

  TEST_CASE("ssl config JSON round trip and validation") {
    SslConfig c;
    c.margin = 0.5;
    c.target = MaskTarget::embedding;
    c.refresh_negatives = false;
    nlohmann::json j = c;
    auto back = j.get<SslConfig>();
    CHECK(back.margin == 0.5);
    CHECK(back.target == MaskTarget::embedding);
    CHECK_FALSE(back.refresh_negatives);
    c.mask_ratio = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }
}
