#include "medvit/metrics.hpp"

#include <algorithm>
#include <memory>
#include <cmath>
#include <numeric>
#include <sstream>

#include <torch/torch.h>

#include "medvit/error.hpp"

namespace medvit {

double binary_auc(std::span<const double> score, std::span<const bool> positive) {
  if (score.size() != positive.size()) throw ShapeError("binary_auc: length mismatch");
  const auto n = score.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && score[order[j + 1]] == score[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double rank_sum = 0.0;
  double n_pos = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (positive[i]) {
      rank_sum += rank[i];
      n_pos += 1.0;
    }
  }
  const double n_neg = static_cast<double>(n) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) throw Error("binary_auc needs both positive and negative samples");
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

namespace {

double mauc_impl(std::span<const double> scores, std::span<const std::int64_t> labels, std::int64_t num_classes,
                 bool observed_only) {
  if (num_classes < 2) throw ConfigError("mAUC needs at least two classes");
  const auto n = labels.size();
  const auto k = static_cast<std::size_t>(num_classes);
  if (scores.size() != n * k) throw ShapeError("mAUC: score matrix must be n x K");
  std::vector<std::size_t> counts(k, 0);
  for (auto l : labels) {
    if (l < 0 || l >= num_classes) throw ConfigError("mAUC: label outside [0, K)");
    ++counts[static_cast<std::size_t>(l)];
  }
  std::vector<std::size_t> present;
  for (std::size_t c = 0; c < k; ++c) {
    if (counts[c] > 0) {
      present.push_back(c);
    } else if (!observed_only) {
      throw Error("mAUC: class " + std::to_string(c) + " has no samples");
    }
  }
  if (present.size() < 2) throw Error("mAUC: fewer than two classes have samples");

  // A(i|j): AUC of column i separating class i (positive) from class j.
  auto pairwise = [&](std::size_t i, std::size_t j) {
    std::vector<double> s;
    auto pos = std::make_unique<bool[]>(n);  // std::vector<bool> has no contiguous storage
    for (std::size_t r = 0; r < n; ++r) {
      const auto l = static_cast<std::size_t>(labels[r]);
      if (l != i && l != j) continue;
      pos[s.size()] = l == i;
      s.push_back(scores[r * k + i]);
    }
    return binary_auc(s, std::span<const bool>(pos.get(), s.size()));
  };

  double total = 0.0;
  for (std::size_t a = 0; a < present.size(); ++a) {
    for (std::size_t b = a + 1; b < present.size(); ++b) {
      const auto i = present[a], j = present[b];
      total += 0.5 * (pairwise(i, j) + pairwise(j, i));
    }
  }
  const auto m = present.size();
  return 2.0 * total / static_cast<double>(m * (m - 1));
}

}  // namespace

double mauc(std::span<const double> scores, std::span<const std::int64_t> labels, std::int64_t num_classes) {
  return mauc_impl(scores, labels, num_classes, false);
}

double mauc_observed(std::span<const double> scores, std::span<const std::int64_t> labels, std::int64_t num_classes) {
  return mauc_impl(scores, labels, num_classes, true);
}

double mae(std::span<const double> predictions, std::span<const double> targets) {
  if (predictions.empty()) throw Error("mae: empty input");
  if (predictions.size() != targets.size()) throw ShapeError("mae: length mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) sum += std::abs(predictions[i] - targets[i]);
  return sum / static_cast<double>(predictions.size());
}

std::vector<std::int64_t> region_labels(Region region) {
  switch (region) {
    case Region::whole_tumor: return {1, 2, 4};
    case Region::tumor_core: return {1, 4};
    case Region::enhancing_tumor: return {4};
  }
  return {};
}

std::string region_name(Region region) {
  switch (region) {
    case Region::whole_tumor: return "WT";
    case Region::tumor_core: return "TC";
    case Region::enhancing_tumor: return "ET";
  }
  return "?";
}

torch::Tensor region_mask(const LabelVolume& labels, Region region) {
  return torch::isin(labels.labels, torch::tensor(region_labels(region), torch::kInt64));
}

double dice(const LabelVolume& prediction, const LabelVolume& truth, Region region) {
  if (prediction.labels.sizes() != truth.labels.sizes()) throw ShapeError("dice: shape mismatch");
  auto p = region_mask(prediction, region);
  auto t = region_mask(truth, region);
  const auto p_count = p.sum().item<std::int64_t>();
  const auto t_count = t.sum().item<std::int64_t>();
  if (p_count + t_count == 0) return 1.0;
  const auto overlap = (p & t).sum().item<std::int64_t>();
  return 2.0 * static_cast<double>(overlap) / static_cast<double>(p_count + t_count);
}

ParameterCount count_parameters(const torch::nn::Module& module) {
  ParameterCount out;
  for (const auto& item : module.named_parameters(true)) {
    if (!item.value().requires_grad()) continue;
    const auto n = item.value().numel();
    out.total += n;
    const auto& name = item.key();
    auto first = name.find('.');
    std::string group = name;
    if (first != std::string::npos) {
      auto second = name.find('.', first + 1);
      group = name.substr(0, second == std::string::npos ? first : second);
    }
    out.breakdown[group] += n;
  }
  return out;
}

MetricSummary summarize(std::vector<double> values) {
  MetricSummary s;
  s.per_fold = std::move(values);
  if (s.per_fold.empty()) return s;
  const double n = static_cast<double>(s.per_fold.size());
  s.mean = std::accumulate(s.per_fold.begin(), s.per_fold.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : s.per_fold) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / n);
  return s;
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j;
  j["task"] = task;
  j["sample_count"] = sample_count;
  j["fingerprint"] = fingerprint;
  j["metrics"] = nlohmann::json::object();
  for (const auto& [name, s] : metrics) {
    j["metrics"][name] = {{"mean", s.mean}, {"std", s.std}, {"per_fold", s.per_fold}};
  }
  j["timestamp"] = timestamp;
  if (!extra.empty()) j["extra"] = extra;
  return j;
}

std::string MetricReport::to_csv() const {
  std::ostringstream os;
  os.precision(10);
  os << "metric,mean,std";
  std::size_t folds = 0;
  for (const auto& [_, s] : metrics) folds = std::max(folds, s.per_fold.size());
  for (std::size_t f = 0; f < folds; ++f) os << ",fold" << f;
  os << "\n";
  for (const auto& [name, s] : metrics) {
    os << name << "," << s.mean << "," << s.std;
    for (std::size_t f = 0; f < folds; ++f) {
      os << ",";
      if (f < s.per_fold.size()) os << s.per_fold[f];
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace medvit
