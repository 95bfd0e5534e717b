#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <torch/torch.h>

#include "medvit/checkpoint.hpp"
#include "medvit/error.hpp"
#include "medvit/rng.hpp"
#include "medvit/train_engine.hpp"
#include "oracles.hpp"

using namespace medvit;

namespace {

std::vector<std::string> ids(std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back("s" + std::to_string(1000 + i));
  return out;
}

// Validation metric is read from a script; one scalar parameter records the epoch.
class Scripted : public Trainable {
 public:
  explicit Scripted(std::vector<double> script) : script_(std::move(script)) {
    w_ = torch::zeros({1}, torch::requires_grad());
  }
  std::vector<torch::Tensor> trainable_parameters() override { return {w_}; }
  std::size_t train_size() const override { return 4; }
  double train_batch(std::span<const std::size_t>, std::int64_t epoch) override {
    last_epoch_ = epoch;
    return 1.0;
  }
  double validate(std::int64_t epoch) override {
    torch::NoGradGuard g;
    w_.fill_(static_cast<double>(epoch));
    return script_.at(static_cast<std::size_t>(epoch));
  }
  std::map<std::string, torch::Tensor> state() override { return {{"w", w_.detach().clone()}}; }
  void restore(const std::map<std::string, torch::Tensor>& s) override {
    torch::NoGradGuard g;
    w_.copy_(s.at("w"));
  }
  torch::Tensor w_;
  std::int64_t last_epoch_ = -1;
  std::vector<double> script_;
};

// Least squares y = x . w on a fixed random problem.
class LinearFit : public Trainable {
 public:
  LinearFit() {
    torch::manual_seed(42);
    x_ = torch::randn({23, 3});
    y_ = x_.matmul(torch::tensor({1.0f, -2.0f, 0.5f}));
    w_ = torch::zeros({3}, torch::requires_grad());
  }
  std::vector<torch::Tensor> trainable_parameters() override { return {w_}; }
  std::size_t train_size() const override { return 23; }
  double train_batch(std::span<const std::size_t> idx, std::int64_t) override {
    std::vector<std::int64_t> rows(idx.begin(), idx.end());
    auto sel = torch::tensor(rows, torch::kInt64);
    auto loss = (x_.index_select(0, sel).matmul(w_) - y_.index_select(0, sel)).pow(2).mean();
    loss.backward();
    return loss.item<double>();
  }
  double validate(std::int64_t) override {
    torch::NoGradGuard g;
    return (x_.matmul(w_) - y_).pow(2).mean().item<double>();
  }
  std::map<std::string, torch::Tensor> state() override { return {{"w", w_.detach().clone()}}; }
  void restore(const std::map<std::string, torch::Tensor>& s) override {
    torch::NoGradGuard g;
    w_.copy_(s.at("w"));
  }
  torch::Tensor x_, y_, w_;
};

}  // namespace

TEST_SUITE("train_engine") {
  TEST_CASE("learning-rate schedule") {
    TrainConfig c;
    CHECK(lr_schedule(c, 0) == 1e-4);
    CHECK(lr_schedule(c, 1) == doctest::Approx(9.9e-5).epsilon(1e-12));
    CHECK(lr_schedule(c, 100) == doctest::Approx(3.660323e-5).epsilon(1e-6));
    for (std::int64_t e = 0; e < 150; ++e) CHECK(lr_schedule(c, e + 1) < lr_schedule(c, e));
    CHECK_THROWS_AS(lr_schedule(c, -1), ConfigError);
  }

  TEST_CASE("config validation") {
    TrainConfig c;
    c.patience = 200;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.beta2 = 1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }

  TEST_CASE("Adam matches a plain-double reference for 100 steps") {
    const std::vector<double> a{1.0, 4.0, 0.25, 9.0}, center{0.5, -1.0, 2.0, 0.0};
    std::vector<double> x_ref{0.0, 0.3, -0.7, 1.2};
    auto x = torch::tensor(x_ref, torch::kFloat64).requires_grad_(true);
    AdamOptimizer opt({x});
    testing::ReferenceAdam ref;
    auto ca = torch::tensor(a, torch::kFloat64);
    auto cc = torch::tensor(center, torch::kFloat64);
    for (int step = 0; step < 100; ++step) {
      const double lr = 1e-2 * std::pow(0.99, step);
      opt.zero_grad();
      (0.5 * ca * (x - cc).pow(2)).sum().backward();
      opt.step(lr);
      std::vector<double> g(4);
      for (std::size_t i = 0; i < 4; ++i) g[i] = a[i] * (x_ref[i] - center[i]);
      ref.step(x_ref, g, lr);
    }
    CHECK(opt.steps() == 100);
    double err = 0.0;
    for (std::size_t i = 0; i < 4; ++i) err = std::max(err, std::abs(x[static_cast<std::int64_t>(i)].item<double>() - x_ref[i]));
    CHECK(err < 1e-10);
  }

  TEST_CASE("Adam skips parameters without gradients") {
    auto a = torch::ones({2}, torch::requires_grad());
    auto b = torch::ones({2}, torch::requires_grad());
    AdamOptimizer opt({a, b});
    (a * 3.0).sum().backward();
    opt.step(0.1);
    CHECK(a[0].item<float>() < 1.0f);
    CHECK(torch::equal(b.detach(), torch::ones({2})));
  }

  TEST_CASE("folds: ten subjects into five folds of two") {
    auto split = make_folds(ids(10), 5, 1);
    REQUIRE(split.k() == 5);
    for (const auto& f : split.folds) CHECK(f.size() == 2);
  }

  TEST_CASE("folds: 103 subjects form a near-equal partition") {
    auto all = ids(103);
    auto split = make_folds(all, 5, 7);
    std::vector<std::size_t> sizes;
    std::set<std::string> seen;
    std::size_t total = 0;
    for (const auto& f : split.folds) {
      sizes.push_back(f.size());
      total += f.size();
      seen.insert(f.begin(), f.end());
    }
    CHECK(sizes == std::vector<std::size_t>{21, 21, 21, 20, 20});
    CHECK(total == 103);
    CHECK(seen == std::set<std::string>(all.begin(), all.end()));
  }

  TEST_CASE("folds are deterministic in the seed and independent of input order") {
    auto all = ids(30);
    auto a = make_folds(all, 5, 3);
    std::reverse(all.begin(), all.end());
    auto b = make_folds(all, 5, 3);
    CHECK(a.folds == b.folds);
    CHECK(make_folds(all, 5, 4).folds != a.folds);
    CHECK_THROWS_AS(make_folds(ids(4), 5, 0), ConfigError);
    auto dup = ids(6);
    dup.push_back(dup.front());
    CHECK_THROWS_AS(make_folds(dup, 5, 0), ConfigError);
  }

  TEST_CASE("fold rotations never leak a subject across splits") {
    auto split = make_folds(ids(53), 5, 11);
    for (std::size_t run = 0; run < 5; ++run) {
      auto r = split.rotation(run);
      CHECK(r.test == split.folds[run]);
      CHECK(r.validation == split.folds[(run + 1) % 5]);
      std::set<std::string> all;
      for (const auto* part : {&r.train, &r.validation, &r.test}) all.insert(part->begin(), part->end());
      CHECK(all.size() == r.train.size() + r.validation.size() + r.test.size());
      CHECK(all.size() == 53);
    }
    CHECK_THROWS_AS(split.rotation(5), ConfigError);
  }

  TEST_CASE("training ratio subsampling") {
    auto all = ids(300);
    auto sub = subsample_ids(all, 0.1, 5);
    CHECK(sub.size() == 30);
    CHECK(subsample_ids(all, 0.1, 5) == sub);
    for (const auto& s : sub) CHECK(std::find(all.begin(), all.end(), s) != all.end());
    CHECK(ratio_count(0.3, 10) == 3);
    CHECK(ratio_count(0.01, 10) == 1);
    CHECK(subsample_ids(all, 1.0, 5).size() == 300);
    CHECK_THROWS_AS(subsample_ids(all, 0.0, 5), ConfigError);
    CHECK_THROWS_AS(subsample_ids(all, 1.5, 5), ConfigError);
  }

  TEST_CASE("patience: improvement only at epochs 0 and 5 stops after epoch 35") {
    std::vector<double> script(150, 0.5);
    script[0] = 0.4;
    script[5] = 0.3;
    Scripted model(script);
    TrainConfig c;
    auto r = train(model, c, TrainOptions{MetricGoal::minimize, true, false, nullptr});
    CHECK(r.history.size() == 36);
    CHECK(r.history.back().epoch == 35);
    CHECK(r.best_epoch == 5);
    CHECK(r.best_metric == 0.3);
    CHECK(r.stopped_early);
    CHECK(model.w_.item<double>() == 5.0);
  }

  TEST_CASE("the returned state is never worse than any earlier epoch") {
    Rng rng(17);
    std::vector<double> script;
    for (int i = 0; i < 60; ++i) script.push_back(rng.uniform());
    Scripted model(script);
    TrainConfig c;
    c.max_epochs = 60;
    c.patience = 10;
    auto r = train(model, c, TrainOptions{MetricGoal::maximize, true, false, nullptr});
    for (const auto& e : r.history) {
      if (e.epoch <= r.best_epoch) CHECK(e.metric <= r.best_metric);
    }
    CHECK(model.w_.item<double>() == double(r.best_epoch));
  }

  TEST_CASE("non-finite loss aborts with a numeric error") {
    struct Exploding : LinearFit {
      double train_batch(std::span<const std::size_t>, std::int64_t) override { return std::nan(""); }
    } model;
    CHECK_THROWS_AS(train(model, TrainConfig{}), NumericError);
  }

  TEST_CASE("training converges and is bitwise reproducible") {
    TrainConfig c;
    c.lr = 0.05;
    c.max_epochs = 40;
    c.patience = 40;
    c.batch_size = 5;
    c.seed = 9;
    std::vector<std::vector<double>> losses;
    std::vector<std::string> hashes;
    for (int run = 0; run < 2; ++run) {
      LinearFit model;
      auto r = train(model, c);
      std::vector<double> l;
      for (const auto& e : r.history) l.push_back(e.train_loss);
      losses.push_back(l);
      hashes.push_back(hash_parameters(model.state()));
      CHECK(r.history.back().metric < 0.01 * r.history.front().metric);
    }
    CHECK(losses[0] == losses[1]);
    CHECK(hashes[0] == hashes[1]);
  }

  TEST_CASE("freeze computes losses without moving parameters") {
    LinearFit model;
    TrainConfig c;
    c.max_epochs = 3;
    c.patience = 3;
    auto r = train(model, c, TrainOptions{MetricGoal::minimize, false, true, nullptr});
    CHECK(r.history.size() == 3);
    CHECK(model.w_.abs().sum().item<float>() == 0.0f);
  }

  TEST_CASE("loss curve CSV") {
    std::vector<EpochRecord> h{{0, 1e-4, 0.5, 0.25}, {1, 9.9e-5, 0.4, 0.2}};
    auto csv = loss_curve_csv(h);
    CHECK(csv.rfind("epoch,lr,train_loss,metric\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  }

  TEST_CASE("checkpoint round trip is exact for f32 and f64") {
    const auto dir = testing::scratch_dir("checkpoint");
    Checkpoint ck;
    ck.parameters["a.weight"] = torch::randn({3, 4});
    ck.parameters["b"] = torch::randn({5}, torch::kFloat64);
    ck.optimizer_state["a.weight.m"] = torch::randn({3, 4});
    ck.stage = kStageFinetuned;
    ck.fingerprint = "abc";
    ck.backbone_fingerprint = "def";
    ck.config = {{"k", 1}};
    ck.epoch = 12;
    ck.best_metric = 0.75;
    save_checkpoint(ck, dir / "x.medckpt");
    std::size_t files = 0;
    for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir)) ++files;
    CHECK(files == 1);
    auto back = load_checkpoint(dir / "x.medckpt");
    CHECK(back.stage == ck.stage);
    CHECK(back.fingerprint == "abc");
    CHECK(back.epoch == 12);
    CHECK(back.best_metric == 0.75);
    CHECK(back.config == ck.config);
    CHECK(torch::equal(back.parameters["a.weight"], ck.parameters["a.weight"]));
    CHECK(back.parameters["b"].dtype() == torch::kFloat64);
    CHECK(torch::equal(back.parameters["b"], ck.parameters["b"]));
    CHECK(torch::equal(back.optimizer_state["a.weight.m"], ck.optimizer_state["a.weight.m"]));
    CHECK(hash_parameters(back.parameters) == hash_parameters(ck.parameters));
    CHECK(hash_parameters(back.parameters, "a.") != hash_parameters(back.parameters));
  }

  TEST_CASE("corrupt checkpoints are rejected") {
    const auto dir = testing::scratch_dir("checkpoint_bad");
    std::ofstream(dir / "junk.medckpt") << "not a checkpoint at all";
    CHECK_THROWS_AS(load_checkpoint(dir / "junk.medckpt"), IoError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.medckpt"), IoError);
  }

  TEST_CASE("backbone fingerprint mismatch needs force") {
    Checkpoint ck;
    ck.backbone_fingerprint = "aaaa";
    CHECK_NOTHROW(check_backbone_fingerprint(ck, "aaaa", false));
    CHECK_THROWS_AS(check_backbone_fingerprint(ck, "bbbb", false), ConfigError);
    CHECK_NOTHROW(check_backbone_fingerprint(ck, "bbbb", true));
  }

  TEST_CASE("FNV-1a digest of known strings") {
    CHECK(fnv1a_hex("") == "cbf29ce484222325");
    CHECK(fnv1a_hex("a") == "af63dc4c8601ec8c");
  }
}
