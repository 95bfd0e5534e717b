#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/nn/module.h>

#include "medvit/volume.hpp"

namespace medvit {

// Hand & Till multi-class AUC over an (n x K) row-major score matrix. Every class must
// be present at least once. Ties count one half.
double mauc(std::span<const double> scores, std::span<const std::int64_t> labels, std::int64_t num_classes);
// Same average restricted to pairs of classes that occur in `labels` (at least two must).
// Equal to mauc() when every class is present; used on small evaluation folds.
double mauc_observed(std::span<const double> scores, std::span<const std::int64_t> labels, std::int64_t num_classes);

// AUC of `score` separating positives (true) from negatives (false) via midranks.
double binary_auc(std::span<const double> score, std::span<const bool> positive);

double mae(std::span<const double> predictions, std::span<const double> targets);

// Tumour regions as label-id sets (BraTS convention).
enum class Region { whole_tumor, tumor_core, enhancing_tumor };

std::vector<std::int64_t> region_labels(Region region);
std::string region_name(Region region);  // "WT", "TC", "ET"
torch::Tensor region_mask(const LabelVolume& labels, Region region);

// 2|P n T| / (|P| + |T|) on region masks; 1.0 when both masks are empty.
double dice(const LabelVolume& prediction, const LabelVolume& truth, Region region);

struct ParameterCount {
  std::int64_t total = 0;
  // Keyed by the first two name components, e.g. "encoder.sagittal", "transformer.0", "head.hidden".
  std::map<std::string, std::int64_t> breakdown;
};

// Sum of trainable (requires_grad) parameter element counts.
ParameterCount count_parameters(const torch::nn::Module& module);

// Aggregate of one metric over folds.
struct MetricSummary {
  std::vector<double> per_fold;
  double mean = 0.0;
  // Population standard deviation (divisor n).
  double std = 0.0;
};

MetricSummary summarize(std::vector<double> values);

struct MetricReport {
  std::string task;
  std::map<std::string, MetricSummary> metrics;
  std::int64_t sample_count = 0;
  std::string fingerprint;
  // Anything run-specific that is not compared for determinism (wall clock, dates).
  nlohmann::json timestamp = nlohmann::json::object();
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json() const;
  // One row per metric: metric,mean,std,fold0,fold1,...
  std::string to_csv() const;
};

// Column names matching the published results table.
inline const std::vector<std::string> kReportColumns{"mAUC", "MAE", "Dice_WT", "Dice_TC", "Dice_ET"};

}  // namespace medvit
