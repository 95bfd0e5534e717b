#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/types.h>

namespace medvit {

struct TrainConfig {
  double lr = 1e-4;
  double lr_decay = 0.99;
  std::int64_t max_epochs = 150;
  std::int64_t patience = 30;
  std::int64_t batch_size = 10;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  std::int64_t threads = 1;
  bool shuffle = true;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// lr0 * decay^epoch, decayed once per epoch.
double lr_schedule(const TrainConfig& config, std::int64_t epoch);

// Adam with bias correction: p -= lr * m_hat / (sqrt(v_hat) + eps).
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<torch::Tensor> parameters, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  // Parameters without a gradient are skipped (their moments are untouched).
  void step(double lr);
  void zero_grad();
  std::int64_t steps() const { return step_; }
  const std::vector<torch::Tensor>& parameters() const { return params_; }

 private:
  std::vector<torch::Tensor> params_;
  std::vector<torch::Tensor> m_, v_;
  double beta1_, beta2_, eps_;
  std::int64_t step_ = 0;
};

struct FoldRotation {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;
};

// Disjoint, near-equal folds of subject ids (the first n mod k folds get one extra).
struct FoldSplit {
  std::vector<std::vector<std::string>> folds;

  std::size_t k() const { return folds.size(); }
  // Test fold = run, validation fold = (run + 1) mod k, remaining folds train.
  FoldRotation rotation(std::size_t run) const;
};

FoldSplit make_folds(std::vector<std::string> subject_ids, std::size_t k = 5, std::uint64_t seed = 0);

// Deterministic subset of floor(ratio * n) ids (at least one when n > 0).
std::vector<std::string> subsample_ids(const std::vector<std::string>& ids, double ratio, std::uint64_t seed);
std::int64_t ratio_count(double ratio, std::int64_t n);

enum class MetricGoal { minimize, maximize };

// What the training loop drives. Implementations accumulate gradients in train_batch.
class Trainable {
 public:
  virtual ~Trainable() = default;

  virtual std::vector<torch::Tensor> trainable_parameters() = 0;
  virtual std::size_t train_size() const = 0;
  // Forward + backward over the given training indices; returns the mean batch loss.
  virtual double train_batch(std::span<const std::size_t> indices, std::int64_t epoch) = 0;
  // Called once per epoch after training; result drives early stopping.
  virtual double validate(std::int64_t epoch) = 0;
  // Hooks so the loop can keep the best parameters.
  virtual std::map<std::string, torch::Tensor> state() = 0;
  virtual void restore(const std::map<std::string, torch::Tensor>& state) = 0;
  virtual void on_epoch_start(std::int64_t epoch) {}
};

struct EpochRecord {
  std::int64_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double metric = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::int64_t best_epoch = -1;
  double best_metric = std::numeric_limits<double>::quiet_NaN();
  std::map<std::string, torch::Tensor> best_state;
  bool stopped_early = false;
};

struct TrainOptions {
  MetricGoal goal = MetricGoal::minimize;
  // Restore the best-validation parameters into the trainable before returning.
  bool restore_best = true;
  // Skip optimizer steps (dry run: losses are still computed).
  bool freeze = false;
  std::function<void(const EpochRecord&)> on_epoch;
};

// Shuffled mini-batches, one Adam step per batch at the scheduled learning rate,
// validation every epoch, early stop after `patience` epochs without improvement.
TrainResult train(Trainable& model, const TrainConfig& config, const TrainOptions& options = {});

std::string loss_curve_csv(const std::vector<EpochRecord>& history);

// Sets libtorch's intra-op thread count and seeds its global generator.
void configure_runtime(const TrainConfig& config);

}  // namespace medvit
