#include <doctest.h>

#include <cmath>

#include <torch/torch.h>

#include "medvit/error.hpp"
#include "medvit/metrics.hpp"
#include "medvit/rng.hpp"
#include "oracles.hpp"

using namespace medvit;

namespace {

struct Scored {
  std::vector<double> scores;
  std::vector<std::int64_t> labels;
};

// Random scores quantised to a coarse grid so that ties are common.
Scored random_scores(std::uint64_t seed, std::size_t n, std::int64_t k) {
  Rng rng(seed);
  Scored s;
  for (std::size_t r = 0; r < n; ++r) {
    s.labels.push_back(static_cast<std::int64_t>(r % static_cast<std::size_t>(k)));
    for (std::int64_t c = 0; c < k; ++c) s.scores.push_back(std::floor(rng.uniform() * 8.0) / 8.0);
  }
  return s;
}

LabelVolume labels_of(std::vector<std::int64_t> v) {
  return LabelVolume(torch::tensor(v, torch::kInt64).reshape({1, 1, -1}));
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("mAUC agrees with brute-force pair enumeration, ties included") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const std::int64_t k = 2 + static_cast<std::int64_t>(seed % 4);
      auto s = random_scores(seed, 40 + seed, k);
      CHECK(mauc(s.scores, s.labels, k) == doctest::Approx(testing::brute_mauc(s.scores, s.labels, k)).epsilon(1e-12));
    }
  }

  TEST_CASE("mAUC is invariant to a strictly increasing transform of the scores") {
    auto s = random_scores(99, 60, 3);
    auto t = s.scores;
    for (auto& x : t) x = std::exp(3.0 * x) - 2.0;
    CHECK(mauc(t, s.labels, 3) == doctest::Approx(mauc(s.scores, s.labels, 3)).epsilon(1e-12));
  }

  TEST_CASE("mAUC is invariant to relabelling classes together with score columns") {
    auto s = random_scores(5, 30, 3);
    const std::int64_t perm[3] = {2, 0, 1};
    std::vector<double> scores(s.scores.size());
    std::vector<std::int64_t> labels;
    for (std::size_t r = 0; r < s.labels.size(); ++r) {
      labels.push_back(perm[s.labels[r]]);
      for (std::size_t c = 0; c < 3; ++c) scores[r * 3 + static_cast<std::size_t>(perm[c])] = s.scores[r * 3 + c];
    }
    CHECK(mauc(scores, labels, 3) == doctest::Approx(mauc(s.scores, s.labels, 3)).epsilon(1e-12));
  }

  TEST_CASE("perfect, reversed and constant scorers") {
    std::vector<std::int64_t> labels{0, 1, 2, 0, 1, 2};
    std::vector<double> perfect, reversed, constant(18, 0.25);
    for (auto l : labels) {
      for (std::int64_t c = 0; c < 3; ++c) {
        perfect.push_back(c == l ? 1.0 : 0.0);
        reversed.push_back(c == l ? 0.0 : 1.0);
      }
    }
    CHECK(mauc(perfect, labels, 3) == 1.0);
    CHECK(mauc(reversed, labels, 3) == 0.0);
    CHECK(mauc(constant, labels, 3) == 0.5);
  }

  TEST_CASE("mAUC requires every class unless restricted to observed classes") {
    auto s = random_scores(1, 12, 3);
    for (auto& l : s.labels) l = l == 2 ? 1 : l;
    CHECK_THROWS_AS(mauc(s.scores, s.labels, 3), Error);
    // Only classes 0 and 1 occur: the observed-class average is the single pair term.
    std::vector<double> pos0, neg0, pos1, neg1;
    for (std::size_t r = 0; r < s.labels.size(); ++r) {
      (s.labels[r] == 0 ? pos0 : neg0).push_back(s.scores[r * 3 + 0]);
      (s.labels[r] == 1 ? pos1 : neg1).push_back(s.scores[r * 3 + 1]);
    }
    const double expected = 0.5 * (testing::pairwise_auc(pos0, neg0) + testing::pairwise_auc(pos1, neg1));
    CHECK(mauc_observed(s.scores, s.labels, 3) == doctest::Approx(expected).epsilon(1e-12));
    auto full = random_scores(2, 30, 3);
    CHECK(mauc_observed(full.scores, full.labels, 3) == mauc(full.scores, full.labels, 3));
    std::vector<std::int64_t> single(12, 0);
    CHECK_THROWS_AS(mauc_observed(s.scores, single, 3), Error);
  }

  TEST_CASE("mAUC input validation") {
    std::vector<double> scores{0.1, 0.9, 0.8, 0.2};
    CHECK_THROWS_AS(mauc(scores, std::vector<std::int64_t>{0, 2}, 2), ConfigError);
    CHECK_THROWS_AS(mauc(scores, std::vector<std::int64_t>{0, 1, 1}, 2), ShapeError);
    CHECK_THROWS_AS(mauc(scores, std::vector<std::int64_t>{0, 0, 0, 0}, 1), ConfigError);
  }

  TEST_CASE("binary AUC matches the pairwise count") {
    Rng rng(7);
    std::vector<double> score;
    std::vector<bool> flags;
    std::vector<double> pos, neg;
    for (int i = 0; i < 50; ++i) {
      const double s = std::floor(rng.uniform() * 5.0);
      const bool p = rng.uniform() < 0.4;
      score.push_back(s);
      flags.push_back(p);
      (p ? pos : neg).push_back(s);
    }
    auto raw = std::make_unique<bool[]>(flags.size());
    for (std::size_t i = 0; i < flags.size(); ++i) raw[i] = flags[i];
    CHECK(binary_auc(score, std::span<const bool>(raw.get(), flags.size())) ==
          doctest::Approx(testing::pairwise_auc(pos, neg)).epsilon(1e-12));
  }

  TEST_CASE("MAE") {
    std::vector<double> p{1.0, 2.0, 4.0}, t{1.5, 2.0, 1.0};
    CHECK(mae(p, t) == doctest::Approx(3.5 / 3.0));
    CHECK_THROWS_AS(mae(p, std::vector<double>{1.0}), ShapeError);
    CHECK_THROWS_AS(mae(std::vector<double>{}, std::vector<double>{}), Error);
  }

  TEST_CASE("Dice follows set arithmetic on the nested tumour regions") {
    auto truth = labels_of({0, 1, 2, 4, 4, 2, 0, 1});
    auto pred = labels_of({0, 2, 2, 4, 1, 0, 0, 1});
    // WT {1,2,4}: truth {1,2,3,4,5,7}, pred {1,2,3,4,7} -> overlap 5.
    CHECK(dice(pred, truth, Region::whole_tumor) == doctest::Approx(2.0 * 5 / (5 + 6)));
    // TC {1,4}: truth {1,3,4,7}, pred {3,4,7} -> overlap 3.
    CHECK(dice(pred, truth, Region::tumor_core) == doctest::Approx(2.0 * 3 / (3 + 4)));
    // ET {4}: truth {3,4}, pred {3} -> overlap 1.
    CHECK(dice(pred, truth, Region::enhancing_tumor) == doctest::Approx(2.0 * 1 / (1 + 2)));
    CHECK(dice(truth, truth, Region::tumor_core) == 1.0);
  }

  TEST_CASE("Dice edge cases") {
    auto empty = labels_of({0, 0, 0});
    auto some = labels_of({0, 4, 0});
    CHECK(dice(empty, empty, Region::enhancing_tumor) == 1.0);
    CHECK(dice(some, empty, Region::enhancing_tumor) == 0.0);
    CHECK(dice(empty, some, Region::whole_tumor) == 0.0);
    CHECK_THROWS_AS(dice(empty, labels_of({0, 0}), Region::whole_tumor), ShapeError);
  }

  TEST_CASE("region masks nest: ET within TC within WT") {
    Rng rng(3);
    std::vector<std::int64_t> v;
    for (int i = 0; i < 200; ++i) v.push_back(kBratsLabels[rng.below(4)]);
    auto l = labels_of(v);
    auto wt = region_mask(l, Region::whole_tumor);
    auto tc = region_mask(l, Region::tumor_core);
    auto et = region_mask(l, Region::enhancing_tumor);
    CHECK((tc & ~wt).sum().item<std::int64_t>() == 0);
    CHECK((et & ~tc).sum().item<std::int64_t>() == 0);
    CHECK(region_name(Region::tumor_core) == "TC");
  }

  TEST_CASE("parameter counts skip frozen tensors and group by name prefix") {
    torch::nn::Sequential net(torch::nn::Linear(3, 4), torch::nn::Linear(4, 2));
    auto c = count_parameters(*net);
    CHECK(c.total == 3 * 4 + 4 + 4 * 2 + 2);
    CHECK(c.breakdown["0"] == 16);
    CHECK(c.breakdown["1"] == 10);
    net[1]->as<torch::nn::Linear>()->weight.set_requires_grad(false);
    CHECK(count_parameters(*net).total == 3 * 4 + 4 + 2);
  }

  TEST_CASE("summary uses the population standard deviation") {
    auto s = summarize({0.6, 0.7, 0.8, 0.9, 1.0});
    CHECK(s.mean == doctest::Approx(0.8));
    CHECK(s.std == doctest::Approx(std::sqrt(0.02)));
    CHECK(summarize({0.5}).std == 0.0);
  }

  TEST_CASE("report serialisation") {
    MetricReport r;
    r.task = "cls";
    r.metrics["mAUC"] = summarize({0.5, 0.7});
    r.metrics["MAE"] = summarize({2.0});
    r.timestamp["elapsed_seconds"] = 1.5;
    auto j = r.to_json();
    CHECK(j["metrics"]["mAUC"]["mean"].get<double>() == doctest::Approx(0.6));
    CHECK(j["metrics"]["mAUC"]["per_fold"].size() == 2);
    CHECK(j["timestamp"]["elapsed_seconds"] == 1.5);
    CHECK(r.to_csv() == "metric,mean,std,fold0,fold1\nMAE,2,0,2,\nmAUC,0.6,0.1,0.5,0.7\n");
  }
}
