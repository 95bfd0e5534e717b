#include "medvit/train_engine.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "medvit/error.hpp"
#include "medvit/rng.hpp"

namespace medvit {

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !(lr_decay > 0.0) || max_epochs < 1 || patience < 1 || batch_size < 1 || threads < 1) {
    throw ConfigError("training hyperparameters must be positive");
  }
  if (patience > max_epochs) throw ConfigError("patience must not exceed max_epochs");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0 || !(eps > 0.0)) {
    throw ConfigError("Adam betas must be in [0, 1) and eps positive");
  }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr", c.lr},       {"lr_decay", c.lr_decay},     {"max_epochs", c.max_epochs},
                     {"patience", c.patience}, {"batch_size", c.batch_size}, {"beta1", c.beta1},
                     {"beta2", c.beta2}, {"eps", c.eps},               {"seed", c.seed},
                     {"threads", c.threads}, {"shuffle", c.shuffle}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.lr = j.value("lr", c.lr);
  c.lr_decay = j.value("lr_decay", c.lr_decay);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.seed = j.value("seed", c.seed);
  c.threads = j.value("threads", c.threads);
  c.shuffle = j.value("shuffle", c.shuffle);
}

double lr_schedule(const TrainConfig& config, std::int64_t epoch) {
  if (epoch < 0) throw ConfigError("epoch must be >= 0");
  return config.lr * std::pow(config.lr_decay, static_cast<double>(epoch));
}

AdamOptimizer::AdamOptimizer(std::vector<torch::Tensor> parameters, double beta1, double beta2, double eps)
    : params_(std::move(parameters)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.push_back(torch::zeros_like(p));
    v_.push_back(torch::zeros_like(p));
  }
}

void AdamOptimizer::step(double lr) {
  torch::NoGradGuard no_grad;
  ++step_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    const auto& g = p.grad();
    if (!g.defined()) continue;
    m_[i].mul_(beta1_).add_(g, 1.0 - beta1_);
    v_[i].mul_(beta2_).addcmul_(g, g, 1.0 - beta2_);
    auto denom = (v_[i] / c2).sqrt_().add_(eps_);
    p.addcdiv_(m_[i] / c1, denom, -lr);
  }
}

void AdamOptimizer::zero_grad() {
  for (auto& p : params_) {
    if (p.grad().defined()) {
      p.grad().detach_();
      p.grad().zero_();
    }
  }
}

FoldRotation FoldSplit::rotation(std::size_t run) const {
  const auto n = folds.size();
  if (n < 3) throw ConfigError("fold rotation needs at least 3 folds");
  if (run >= n) throw ConfigError("fold index " + std::to_string(run) + " out of range");
  FoldRotation r;
  const auto val = (run + 1) % n;
  r.test = folds[run];
  r.validation = folds[val];
  for (std::size_t f = 0; f < n; ++f) {
    if (f == run || f == val) continue;
    r.train.insert(r.train.end(), folds[f].begin(), folds[f].end());
  }
  return r;
}

FoldSplit make_folds(std::vector<std::string> subject_ids, std::size_t k, std::uint64_t seed) {
  if (k < 1) throw ConfigError("fold count must be >= 1");
  if (subject_ids.size() < k) {
    throw ConfigError("need at least " + std::to_string(k) + " subjects for " + std::to_string(k) + " folds");
  }
  std::sort(subject_ids.begin(), subject_ids.end());
  if (std::adjacent_find(subject_ids.begin(), subject_ids.end()) != subject_ids.end()) {
    throw ConfigError("subject ids must be unique");
  }
  Rng rng(stream_seed(seed, 0xf01d));
  rng.shuffle(std::span<std::string>(subject_ids));
  FoldSplit split;
  split.folds.resize(k);
  const auto base = subject_ids.size() / k;
  const auto extra = subject_ids.size() % k;
  std::size_t at = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const auto size = base + (f < extra ? 1 : 0);
    split.folds[f].assign(subject_ids.begin() + static_cast<std::ptrdiff_t>(at),
                          subject_ids.begin() + static_cast<std::ptrdiff_t>(at + size));
    at += size;
  }
  return split;
}

std::int64_t ratio_count(double ratio, std::int64_t n) {
  if (!(ratio > 0.0) || ratio > 1.0) throw ConfigError("ratio must be in (0, 1]");
  // The epsilon absorbs representation error such as 0.7 * 10 = 6.9999...
  const auto count = static_cast<std::int64_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
  return n > 0 ? std::max<std::int64_t>(count, 1) : 0;
}

std::vector<std::string> subsample_ids(const std::vector<std::string>& ids, double ratio, std::uint64_t seed) {
  const auto count = ratio_count(ratio, static_cast<std::int64_t>(ids.size()));
  std::vector<std::string> shuffled = ids;
  Rng rng(stream_seed(seed, 0x5a3b));
  rng.shuffle(std::span<std::string>(shuffled));
  shuffled.resize(static_cast<std::size_t>(count));
  return shuffled;
}

TrainResult train(Trainable& model, const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  const auto n = model.train_size();
  if (n == 0) throw Error("cannot train on an empty dataset");

  AdamOptimizer optimizer(model.trainable_parameters(), config.beta1, config.beta2, config.eps);
  TrainResult result;
  std::vector<std::size_t> order(n);

  for (std::int64_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    model.on_epoch_start(epoch);
    const double lr = lr_schedule(config, epoch);
    std::iota(order.begin(), order.end(), 0);
    if (config.shuffle) {
      Rng rng(stream_seed(config.seed, static_cast<std::uint64_t>(epoch), 0xba7c));
      rng.shuffle(std::span<std::size_t>(order));
    }

    double loss_sum = 0.0;
    std::int64_t batches = 0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(config.batch_size)) {
      const auto end = std::min(n, start + static_cast<std::size_t>(config.batch_size));
      optimizer.zero_grad();
      const double loss = model.train_batch(std::span<const std::size_t>(order.data() + start, end - start), epoch);
      if (!std::isfinite(loss)) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batches));
      }
      if (!options.freeze) optimizer.step(lr);
      loss_sum += loss;
      ++batches;
    }

    EpochRecord record{epoch, lr, loss_sum / static_cast<double>(batches), model.validate(epoch)};
    result.history.push_back(record);
    if (options.on_epoch) options.on_epoch(record);

    const bool improved =
        std::isfinite(record.metric) &&
        (result.best_epoch < 0 || (options.goal == MetricGoal::minimize ? record.metric < result.best_metric
                                                                        : record.metric > result.best_metric));
    if (improved) {
      result.best_epoch = epoch;
      result.best_metric = record.metric;
      result.best_state = model.state();
    } else if (result.best_epoch < 0 && epoch + 1 >= config.patience) {
      break;
    }
    if (result.best_epoch >= 0 && epoch - result.best_epoch >= config.patience) {
      result.stopped_early = epoch + 1 < config.max_epochs;
      break;
    }
  }
  if (options.restore_best && !result.best_state.empty()) model.restore(result.best_state);
  return result;
}

std::string loss_curve_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream os;
  os.precision(10);
  os << "epoch,lr,train_loss,metric\n";
  for (const auto& r : history) os << r.epoch << "," << r.lr << "," << r.train_loss << "," << r.metric << "\n";
  return os.str();
}

void configure_runtime(const TrainConfig& config) {
  at::set_num_threads(static_cast<int>(config.threads));
  torch::manual_seed(config.seed);
}

}  // namespace medvit
