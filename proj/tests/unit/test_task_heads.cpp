#include <doctest.h>

#include <cmath>

#include <torch/torch.h>

#include "medvit/error.hpp"
#include "medvit/metrics.hpp"
#include "medvit/model.hpp"
#include "medvit/task_heads.hpp"
#include "oracles.hpp"

using namespace medvit;

namespace {

ModelConfig full_model(TaskKind kind) {
  ModelConfig m;
  TaskSpec t;
  t.kind = kind;
  m.task = t;
  if (kind == TaskKind::segmentation) m.fusion.mode = FusionMode::multi_scale;
  return m;
}

double manual_cross_entropy(const torch::Tensor& logits, std::int64_t target) {
  double mx = -1e300;
  for (std::int64_t k = 0; k < logits.size(0); ++k) mx = std::max(mx, logits[k].item<double>());
  double z = 0.0;
  for (std::int64_t k = 0; k < logits.size(0); ++k) z += std::exp(logits[k].item<double>() - mx);
  return -(logits[target].item<double>() - mx - std::log(z));
}

}  // namespace

TEST_SUITE("task_heads") {
  TEST_CASE("full model parameter counts match the reference sizes") {
    const auto cls = count_parameters(*MedicalTransformer(full_model(TaskKind::classification))).total;
    const auto reg = count_parameters(*MedicalTransformer(full_model(TaskKind::regression))).total;
    const auto seg = count_parameters(*MedicalTransformer(full_model(TaskKind::segmentation))).total;
    CHECK(cls == 2396923);
    CHECK(reg == 2396793);
    CHECK(seg == 2442300);
    CHECK(std::abs(double(cls) - 2.402e6) / 2.402e6 < 0.10);
    CHECK(std::abs(double(reg) - 2.401e6) / 2.401e6 < 0.10);
    CHECK(std::abs(double(seg) - 2.410e6) / 2.410e6 < 0.10);
  }

  TEST_CASE("fused channel counts") {
    EncoderConfig enc;
    FusionConfig single;
    CHECK(single.fused_channels(enc) == 48);
    FusionConfig multi;
    multi.mode = FusionMode::multi_scale;
    CHECK(multi.fused_channels(enc) == 48 + 3 * (32 + 64 + 140));
  }

  TEST_CASE("segmentation requires multi-scale fusion") {
    TaskSpec seg;
    seg.kind = TaskKind::segmentation;
    CHECK_THROWS_AS(validate_task_fusion(seg, FusionConfig{}, EncoderConfig{}), ConfigError);
    FusionConfig multi;
    multi.mode = FusionMode::multi_scale;
    CHECK_NOTHROW(validate_task_fusion(seg, multi, EncoderConfig{}));
    multi.taps = {1};
    CHECK_THROWS_AS(validate_task_fusion(seg, multi, EncoderConfig{}), ConfigError);
  }

  TEST_CASE("head is the same MLP at every voxel") {
    torch::manual_seed(1);
    PredictionHead head(5, 3, 4, false);
    head->to(torch::kFloat64);
    auto fused = torch::randn({5, 2, 3, 2}, torch::kFloat64);
    auto out = head->forward(fused);
    REQUIRE(out.sizes().vec() == std::vector<std::int64_t>{3, 2, 3, 2});
    auto params = head->named_parameters();
    auto w1 = params["hidden.weight"], b1 = params["hidden.bias"];
    auto w2 = params["readout.weight"], b2 = params["readout.bias"];
    for (std::int64_t x = 0; x < 2; ++x) {
      for (std::int64_t y = 0; y < 3; ++y) {
        auto v = fused.index({torch::indexing::Slice(), x, y, 1});
        std::vector<double> h(4);
        for (std::int64_t j = 0; j < 4; ++j) {
          double s = b1[j].item<double>();
          for (std::int64_t i = 0; i < 5; ++i) s += w1[j][i].item<double>() * v[i].item<double>();
          h[static_cast<std::size_t>(j)] = std::max(s, 0.0);
        }
        for (std::int64_t o = 0; o < 3; ++o) {
          double s = b2[o].item<double>();
          for (std::int64_t j = 0; j < 4; ++j) s += w2[o][j].item<double>() * h[static_cast<std::size_t>(j)];
          CHECK(out[o][x][y][1].item<double>() == doctest::Approx(s).epsilon(1e-12));
        }
      }
    }
  }

  TEST_CASE("classification and regression pool the voxelwise output") {
    torch::manual_seed(2);
    PredictionHead head(4, 3, 8, false);
    FeatureVolume fused{torch::randn({4, 3, 3, 3}), "f"};
    auto voxel = head->forward(fused.data);
    CHECK(torch::allclose(predict_classification(head, fused), voxel.mean({1, 2, 3})));
    PredictionHead reg(4, 1, 8, false);
    CHECK(predict_regression(reg, fused).sizes().vec() == std::vector<std::int64_t>{1});
    CHECK(predict_segmentation(head, fused).sizes().vec() == std::vector<std::int64_t>{3, 3, 3, 3});
  }

  TEST_CASE("head gradients match central differences") {
    torch::manual_seed(3);
    PredictionHead head(4, 3, 5, false);
    auto params = testing::double_parameters(*head);
    auto fused = torch::randn({4, 2, 2, 3}, torch::kFloat64);
    auto target = torch::tensor({2}, torch::kInt64);
    auto loss = [&] {
      FeatureVolume f{fused, "f"};
      return classification_loss(predict_classification(head, f).unsqueeze(0), target);
    };
    CHECK(testing::gradient_check(loss, params) < 1e-6);
  }

  TEST_CASE("cross-entropy matches the log-sum-exp formula") {
    auto logits = torch::tensor({{1.0, -2.0, 0.5}, {0.0, 3.0, 3.0}}, torch::kFloat64);
    auto classes = torch::tensor({0, 2}, torch::kInt64);
    const double expected = 0.5 * (manual_cross_entropy(logits[0], 0) + manual_cross_entropy(logits[1], 2));
    CHECK(classification_loss(logits, classes).item<double>() == doctest::Approx(expected).epsilon(1e-12));
    CHECK_THROWS_AS(classification_loss(logits, torch::tensor({0, 3}, torch::kInt64)), ConfigError);
  }

  TEST_CASE("regression loss is the mean absolute error") {
    auto p = torch::tensor({1.0, 2.0, 4.0}, torch::kFloat64);
    auto t = torch::tensor({1.5, 2.0, 1.0}, torch::kFloat64);
    CHECK(regression_loss(p, t).item<double>() == doctest::Approx(3.5 / 3.0));
  }

  TEST_CASE("soft Dice loss on hard probabilities follows set arithmetic") {
    // Label 0: predicted {0,1}, truth {0}; label 1: predicted {2,3}, truth {1,2,3}.
    auto probs = torch::tensor({{1.0, 1.0, 0.0, 0.0}, {0.0, 0.0, 1.0, 1.0}}, torch::kFloat64).reshape({2, 4, 1, 1});
    auto one_hot = torch::tensor({{1.0, 0.0, 0.0, 0.0}, {0.0, 1.0, 1.0, 1.0}}, torch::kFloat64).reshape({2, 4, 1, 1});
    const double eps = 1e-5;
    const double d0 = (2.0 * 1 + eps) / (2 + 1 + eps);
    const double d1 = (2.0 * 2 + eps) / (2 + 3 + eps);
    CHECK(soft_dice_loss(probs, one_hot).item<double>() == doctest::Approx(1.0 - 0.5 * (d0 + d1)).epsilon(1e-12));
  }

  TEST_CASE("segmentation loss gradients match central differences") {
    torch::manual_seed(4);
    auto logits = torch::randn({4, 2, 2, 2}, torch::kFloat64).requires_grad_(true);
    auto labels = torch::tensor({0, 1, 2, 4, 4, 0, 1, 0}, torch::kInt64).reshape({2, 2, 2});
    auto loss = [&] { return segmentation_loss(logits, labels, kBratsLabels); };
    CHECK(testing::gradient_check(loss, {logits}) < 1e-6);
  }

  TEST_CASE("segmentation loss is smaller for confident correct logits") {
    auto labels = torch::tensor({0, 1, 2, 4, 4, 0, 1, 0}, torch::kInt64).reshape({2, 2, 2});
    auto idx = labels_to_indices(labels, kBratsLabels);
    auto good = torch::nn::functional::one_hot(idx, 4).permute({3, 0, 1, 2}).to(torch::kFloat32) * 20.0;
    auto flat = torch::zeros({4, 2, 2, 2});
    CHECK(segmentation_loss(good, labels, kBratsLabels).item<float>() < 1e-3f);
    CHECK(segmentation_loss(flat, labels, kBratsLabels).item<float>() > 1.0f);
  }

  TEST_CASE("label ids map to indices into the label set") {
    auto labels = torch::tensor({0, 4, 2, 1}, torch::kInt64);
    CHECK(torch::equal(labels_to_indices(labels, kBratsLabels), torch::tensor({0, 3, 2, 1}, torch::kInt64)));
    CHECK_THROWS_AS(labels_to_indices(torch::tensor({3}, torch::kInt64), kBratsLabels), ConfigError);
  }

  TEST_CASE("argmax resolves ties to the lowest label id") {
    auto logits = torch::zeros({4, 1, 1, 3});
    logits[3][0][0][1] = 1.0f;
    logits[1][0][0][2] = 2.0f;
    logits[2][0][0][2] = 2.0f;
    auto out = argmax_labels(logits, kBratsLabels);
    CHECK(torch::equal(out.labels.reshape({-1}), torch::tensor({0, 4, 1}, torch::kInt64)));
  }

  TEST_CASE("trilinear upsampling keeps corners and constants") {
    auto map = torch::rand({2, 2, 3, 2});
    auto up = upsample_map(map, {5, 7, 4}).data;
    CHECK(up.sizes().vec() == std::vector<std::int64_t>{2, 5, 7, 4});
    CHECK(up[1][0][0][0].item<float>() == doctest::Approx(map[1][0][0][0].item<float>()));
    CHECK(up[0][4][6][3].item<float>() == doctest::Approx(map[0][1][2][1].item<float>()));
    auto flat = upsample_map(torch::full({1, 2, 2, 2}, 0.3f), {6, 6, 6}).data;
    CHECK((flat - 0.3f).abs().max().item<float>() < 1e-6f);
  }

  TEST_CASE("multi-scale maps are ordered by stage then plane") {
    std::array<std::vector<Tap>, 3> taps;
    for (auto plane : kPlanes) {
      const auto p = static_cast<std::size_t>(plane_index(plane));
      std::array<std::int64_t, 3> shape{4, 4, 4};
      const auto n = shape[p];
      taps[p].push_back(Tap{2, 2, torch::full({n, 3, 2, 2}, float(10 + p))});
      taps[p].push_back(Tap{3, 4, torch::full({n, 5, 1, 1}, float(20 + p))});
    }
    auto maps = multi_scale_maps(taps, {4, 4, 4});
    REQUIRE(maps.size() == 6);
    const float expected[6] = {10, 11, 12, 20, 21, 22};
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(maps[i].data.mean().item<float>() == doctest::Approx(expected[i]));
      CHECK(maps[i].data.size(1) == 4);
    }
    CHECK(maps[0].channels() == 3);
    CHECK(maps[3].channels() == 5);
  }

  TEST_CASE("task spec output widths and id round trip") {
    TaskSpec t;
    CHECK(t.output_width() == 3);
    t.kind = TaskKind::regression;
    CHECK(t.output_width() == 1);
    t.kind = TaskKind::segmentation;
    CHECK(t.output_width() == 4);
    for (auto k : {TaskKind::classification, TaskKind::regression, TaskKind::segmentation}) {
      CHECK(task_from_id(task_id(k)) == k);
    }
    CHECK_THROWS(task_from_id("detect"));
  }
}
