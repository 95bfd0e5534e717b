#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "medvit/checkpoint.hpp"
#include "medvit/dataset.hpp"
#include "medvit/error.hpp"
#include "medvit/metrics.hpp"
#include "medvit/model.hpp"
#include "medvit/train_engine.hpp"

namespace medvit {

struct FinetuneOptions {
  // Skip the checkpoint and train from random initialization.
  bool from_scratch = false;
  // Replace the transformer (and its positional/segment encodings) with the identity.
  bool no_transformer = false;
  // Fraction of the training folds used for training.
  double ratio = 1.0;
  std::size_t fold = 0;
  std::size_t folds = 5;
  bool force = false;
  bool scale_duplicated = false;
};

void to_json(nlohmann::json& j, const FinetuneOptions& o);
void from_json(const nlohmann::json& j, FinetuneOptions& o);

struct SubjectPrediction {
  std::string subject_id;
  // Class probabilities (classification) or the single predicted value (regression).
  std::vector<double> values;
  std::optional<LabelVolume> labels;
};

struct Evaluation {
  std::map<std::string, double> metrics;
  std::vector<SubjectPrediction> predictions;
};

// Direction and value of the early-stopping metric: mAUC (max), MAE (min), mean Dice (max).
MetricGoal metric_goal(TaskKind kind);
double selection_metric(TaskKind kind, const std::map<std::string, double>& metrics);

std::vector<SubjectPrediction> predict(MedicalTransformer& model, const Dataset& data,
                                       const std::vector<std::size_t>& indices);
// Scores predictions against the supervision in `truth` (matched by subject id).
// mAUC averages over the class pairs present; it is NaN when fewer than two classes occur.
std::map<std::string, double> score_predictions(const TaskSpec& task, const std::vector<SubjectPrediction>& predictions,
                                                const Dataset& truth);
Evaluation evaluate_model(MedicalTransformer& model, const Dataset& data, const std::vector<std::size_t>& indices);

struct FinetuneResult {
  Checkpoint checkpoint;
  std::vector<EpochRecord> history;
  std::int64_t best_epoch = -1;
  double best_validation = 0.0;
  std::vector<std::string> train_ids;
  std::vector<std::string> validation_ids;
  std::vector<std::string> test_ids;
  Evaluation test;
};

// Trains backbone and head on the training folds of one rotation, selects the epoch with the
// best validation metric and evaluates it on the test fold. `init` is required unless
// options.from_scratch is set.
FinetuneResult finetune(const Dataset& data, const Checkpoint* init, const ModelConfig& model,
                        const TrainConfig& train, const FinetuneOptions& options);

struct CvResult {
  MetricReport report;
  std::vector<FinetuneResult> folds;
};

// Raised when a fold fails; carries the report of the folds completed so far.
class CvAborted : public Error {
 public:
  CvAborted(const std::string& what, MetricReport partial) : Error(what), partial_(std::move(partial)) {}
  const MetricReport& partial() const { return partial_; }

 private:
  MetricReport partial_;
};

// One fine-tuning run per fold rotation; per-metric mean and population std over folds.
CvResult run_cv(const Dataset& data, const Checkpoint* init, const ModelConfig& model, const TrainConfig& train,
                FinetuneOptions options);

}  // namespace medvit
