#include "medvit/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "medvit/error.hpp"

namespace medvit {

void to_json(nlohmann::json& j, const FinetuneOptions& o) {
  j = nlohmann::json{{"from_scratch", o.from_scratch}, {"no_transformer", o.no_transformer},
                     {"ratio", o.ratio},               {"fold", o.fold},
                     {"folds", o.folds},               {"force", o.force},
                     {"scale_duplicated", o.scale_duplicated}};
}

void from_json(const nlohmann::json& j, FinetuneOptions& o) {
  o.from_scratch = j.value("from_scratch", o.from_scratch);
  o.no_transformer = j.value("no_transformer", o.no_transformer);
  o.ratio = j.value("ratio", o.ratio);
  o.fold = j.value("fold", o.fold);
  o.folds = j.value("folds", o.folds);
  o.force = j.value("force", o.force);
  o.scale_duplicated = j.value("scale_duplicated", o.scale_duplicated);
}

MetricGoal metric_goal(TaskKind kind) {
  return kind == TaskKind::regression ? MetricGoal::minimize : MetricGoal::maximize;
}

double selection_metric(TaskKind kind, const std::map<std::string, double>& metrics) {
  switch (kind) {
    case TaskKind::classification: return metrics.at("mAUC");
    case TaskKind::regression: return metrics.at("MAE");
    case TaskKind::segmentation:
      return (metrics.at("Dice_WT") + metrics.at("Dice_TC") + metrics.at("Dice_ET")) / 3.0;
  }
  throw ConfigError("unknown task");
}

namespace {

const TaskSpec& task_of(const MedicalTransformer& model) {
  if (!model->config().task) throw ConfigError("model has no task head");
  return *model->config().task;
}

void require_supervision(const Sample& s, const TaskSpec& task) {
  const auto& id = s.record.subject_id;
  switch (task.kind) {
    case TaskKind::classification:
      if (!s.record.class_label) throw ConfigError("subject " + id + " has no class label");
      if (*s.record.class_label < 0 || *s.record.class_label >= task.num_classes) {
        throw ConfigError("subject " + id + " has class " + std::to_string(*s.record.class_label) +
                          " outside [0, " + std::to_string(task.num_classes) + ")");
      }
      break;
    case TaskKind::regression:
      if (!s.record.target) throw ConfigError("subject " + id + " has no regression target");
      break;
    case TaskKind::segmentation:
      if (!s.labels) throw ConfigError("subject " + id + " has no label volume");
      break;
  }
}

torch::Tensor target_of(const Sample& s, const TaskSpec& task) {
  switch (task.kind) {
    case TaskKind::classification: return torch::tensor(*s.record.class_label, torch::kInt64);
    case TaskKind::regression: return torch::tensor(*s.record.target, torch::kFloat32);
    case TaskKind::segmentation: return s.labels->labels;
  }
  throw ConfigError("unknown task");
}

}  // namespace

std::vector<SubjectPrediction> predict(MedicalTransformer& model, const Dataset& data,
                                       const std::vector<std::size_t>& indices) {
  const auto& task = task_of(model);
  torch::NoGradGuard no_grad;
  model->eval();
  std::vector<SubjectPrediction> out;
  for (auto i : indices) {
    const auto& s = data.samples.at(i);
    auto output = model->forward(s.volume.data);
    SubjectPrediction p;
    p.subject_id = s.record.subject_id;
    if (task.kind == TaskKind::segmentation) {
      p.labels = argmax_labels(output, task.label_set);
    } else {
      auto v = task.kind == TaskKind::classification ? torch::softmax(output.to(torch::kFloat64), 0)
                                                     : output.to(torch::kFloat64);
      v = v.contiguous();
      p.values.assign(v.data_ptr<double>(), v.data_ptr<double>() + v.numel());
    }
    out.push_back(std::move(p));
  }
  model->train();
  return out;
}

std::map<std::string, double> score_predictions(const TaskSpec& task, const std::vector<SubjectPrediction>& predictions,
                                                const Dataset& truth) {
  if (predictions.empty()) throw Error("no predictions to score");
  std::map<std::string, double> metrics;
  switch (task.kind) {
    case TaskKind::classification: {
      std::vector<double> scores;
      std::vector<std::int64_t> labels;
      for (const auto& p : predictions) {
        const auto& s = truth.samples.at(truth.index_of(p.subject_id));
        require_supervision(s, task);
        if (static_cast<std::int64_t>(p.values.size()) != task.num_classes) {
          throw ShapeError("prediction for " + p.subject_id + " has the wrong number of class scores");
        }
        scores.insert(scores.end(), p.values.begin(), p.values.end());
        labels.push_back(*s.record.class_label);
      }
      const std::set<std::int64_t> present(labels.begin(), labels.end());
      metrics["mAUC"] = present.size() < 2 ? std::numeric_limits<double>::quiet_NaN()
                                           : mauc_observed(scores, labels, task.num_classes);
      break;
    }
    case TaskKind::regression: {
      std::vector<double> predicted, targets;
      for (const auto& p : predictions) {
        const auto& s = truth.samples.at(truth.index_of(p.subject_id));
        require_supervision(s, task);
        if (p.values.size() != 1) throw ShapeError("regression prediction for " + p.subject_id + " is not scalar");
        predicted.push_back(p.values[0]);
        targets.push_back(*s.record.target);
      }
      metrics["MAE"] = mae(predicted, targets);
      break;
    }
    case TaskKind::segmentation: {
      for (auto region : {Region::whole_tumor, Region::tumor_core, Region::enhancing_tumor}) {
        double sum = 0.0;
        for (const auto& p : predictions) {
          const auto& s = truth.samples.at(truth.index_of(p.subject_id));
          require_supervision(s, task);
          if (!p.labels) throw ShapeError("segmentation prediction for " + p.subject_id + " has no label volume");
          sum += dice(*p.labels, *s.labels, region);
        }
        metrics["Dice_" + region_name(region)] = sum / static_cast<double>(predictions.size());
      }
      break;
    }
  }
  return metrics;
}

Evaluation evaluate_model(MedicalTransformer& model, const Dataset& data, const std::vector<std::size_t>& indices) {
  Evaluation e;
  e.predictions = predict(model, data, indices);
  e.metrics = score_predictions(task_of(model), e.predictions, data);
  return e;
}

namespace {

class FinetuneStage : public Trainable {
 public:
  FinetuneStage(const Dataset& data, MedicalTransformer model, std::vector<std::size_t> train,
                std::vector<std::size_t> validation)
      : data_(data), model_(std::move(model)), train_(std::move(train)), validation_(std::move(validation)) {
    const auto& task = task_of(model_);
    for (auto i : train_) targets_.push_back(target_of(data_.samples[i], task));
  }

  std::vector<torch::Tensor> trainable_parameters() override { return model_->parameters(); }
  std::size_t train_size() const override { return train_.size(); }

  double train_batch(std::span<const std::size_t> positions, std::int64_t) override {
    const auto& task = task_of(model_);
    const auto batch = static_cast<double>(positions.size());
    double total = 0.0;
    for (auto pos : positions) {
      const auto& s = data_.samples[train_[pos]];
      auto loss = task_loss(model_->forward(s.volume.data), targets_[pos], task);
      (loss / batch).backward();
      total += loss.item<double>();
    }
    return total / batch;
  }

  double validate(std::int64_t) override {
    last_ = evaluate_model(model_, data_, validation_);
    return selection_metric(task_of(model_).kind, last_.metrics);
  }

  std::map<std::string, torch::Tensor> state() override { return snapshot_parameters(*model_); }
  void restore(const std::map<std::string, torch::Tensor>& s) override { load_parameters(*model_, s); }

 private:
  const Dataset& data_;
  MedicalTransformer model_;
  std::vector<std::size_t> train_, validation_;
  std::vector<torch::Tensor> targets_;
  Evaluation last_;
};

std::vector<std::size_t> indices_of(const Dataset& data, const std::vector<std::string>& ids) {
  std::vector<std::size_t> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(data.index_of(id));
  return out;
}

}  // namespace

FinetuneResult finetune(const Dataset& data, const Checkpoint* init, const ModelConfig& model_config,
                        const TrainConfig& train, const FinetuneOptions& options) {
  train.validate();
  if (!model_config.task) throw ConfigError("fine-tuning needs a task");
  if (!options.from_scratch && init == nullptr) {
    throw ConfigError("fine-tuning needs a pre-trained checkpoint (or from_scratch)");
  }
  if (data.size() == 0) throw Error("cannot fine-tune on an empty dataset");
  ModelConfig cfg = model_config;
  cfg.use_transformer = !options.no_transformer;
  cfg.with_mask_token = false;
  cfg.encoder.in_channels = data.samples.front().volume.channels();
  cfg.validate();
  const auto& task = *cfg.task;
  for (const auto& s : data.samples) {
    if (s.volume.channels() != cfg.encoder.in_channels) throw ConfigError("subjects differ in channel count");
    require_supervision(s, task);
  }

  const auto split = make_folds(data.subject_ids(), options.folds, train.seed);
  const auto rotation = split.rotation(options.fold);
  FinetuneResult result;
  result.train_ids = subsample_ids(rotation.train, options.ratio, train.seed);
  result.validation_ids = rotation.validation;
  result.test_ids = rotation.test;

  torch::manual_seed(train.seed);
  MedicalTransformer model(cfg);
  if (!options.from_scratch) {
    BackboneLoad load;
    load.include_sequence = !options.no_transformer;
    load.force = options.force;
    load.scale_duplicated = options.scale_duplicated;
    load_backbone(model, *init, load);
  }
  const auto train_idx = indices_of(data, result.train_ids);
  if (task.kind == TaskKind::regression) {
    double mean = 0.0;
    for (auto i : train_idx) mean += *data.samples[i].record.target;
    mean /= static_cast<double>(train_idx.size());
    torch::NoGradGuard no_grad;
    model->head()->readout()->bias.fill_(mean);
  }

  FinetuneStage stage(data, model, train_idx, indices_of(data, result.validation_ids));
  TrainOptions topts;
  topts.goal = metric_goal(task.kind);
  auto run = medvit::train(stage, train, topts);
  result.history = run.history;
  result.best_epoch = run.best_epoch;
  result.best_validation = run.best_metric;
  result.test = evaluate_model(model, data, indices_of(data, result.test_ids));

  nlohmann::json extra{{"train", train}, {"finetune", options}};
  result.checkpoint = make_checkpoint(model, kStageFinetuned, extra);
  result.checkpoint.epoch = run.best_epoch;
  result.checkpoint.best_metric = run.best_metric;
  if (init != nullptr && !options.from_scratch) result.checkpoint.config["source_fingerprint"] = init->fingerprint;
  return result;
}

CvResult run_cv(const Dataset& data, const Checkpoint* init, const ModelConfig& model, const TrainConfig& train,
                FinetuneOptions options) {
  if (!model.task) throw ConfigError("cross-validation needs a task");
  CvResult cv;
  std::map<std::string, std::vector<double>> per_metric;
  auto build_report = [&]() {
    MetricReport report;
    report.task = task_id(model.task->kind);
    for (auto& [name, values] : per_metric) report.metrics[name] = summarize(values);
    report.sample_count = static_cast<std::int64_t>(data.size());
    report.extra["folds_completed"] = cv.folds.size();
    return report;
  };
  for (std::size_t fold = 0; fold < options.folds; ++fold) {
    options.fold = fold;
    try {
      cv.folds.push_back(finetune(data, init, model, train, options));
    } catch (const std::exception& e) {
      throw CvAborted("fold " + std::to_string(fold) + " failed: " + e.what(), build_report());
    }
    for (const auto& [name, value] : cv.folds.back().test.metrics) per_metric[name].push_back(value);
  }
  cv.report = build_report();
  return cv;
}

}  // namespace medvit
