#include "cli.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "medvit/checkpoint.hpp"
#include "medvit/config.hpp"
#include "medvit/dataset.hpp"
#include "medvit/error.hpp"
#include "medvit/finetune.hpp"
#include "medvit/metrics.hpp"
#include "medvit/model.hpp"
#include "medvit/ssl_pretrain.hpp"
#include "medvit/train_engine.hpp"

namespace fs = std::filesystem;

namespace medvit::cli {

namespace {

constexpr const char* kPredictionsFile = "predictions.json";

struct Common {
  std::string config = "default";
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> epochs;
  std::optional<std::int64_t> threads;
  std::vector<std::string> set;
  std::string out;
};

struct OutputPaths {
  fs::path dir;
  fs::path checkpoint;
};

OutputPaths output_paths(const std::string& out) {
  if (out.empty()) throw ConfigError("--out is required");
  fs::path p(out);
  OutputPaths o;
  if (p.extension() == ".medckpt") {
    o.dir = p.parent_path().empty() ? fs::path(".") : p.parent_path();
    o.checkpoint = p;
  } else {
    o.dir = p;
    o.checkpoint = p / "checkpoint.medckpt";
  }
  fs::create_directories(o.dir);
  return o;
}

nlohmann::json parse_override_value(const std::string& text) {
  try {
    return parse_toml("v = " + text).at("v");
  } catch (const ConfigError&) {
    return text;
  }
}

RunConfig resolve(const Common& c, std::vector<std::pair<std::string, nlohmann::json>> extra = {}) {
  std::vector<std::pair<std::string, nlohmann::json>> overrides;
  for (const auto& s : c.set) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
    overrides.emplace_back(s.substr(0, eq), parse_override_value(s.substr(eq + 1)));
  }
  for (auto& e : extra) overrides.push_back(std::move(e));
  if (c.seed) overrides.emplace_back("seed", *c.seed);
  if (c.threads) overrides.emplace_back("train.threads", *c.threads);
  if (c.epochs) {
    overrides.emplace_back("train.max_epochs", *c.epochs);
    // Keep patience valid when the epoch budget shrinks.
    const auto base = resolve_config(c.config, {}, false);
    if (base.tree["train"]["patience"].get<std::int64_t>() > *c.epochs) {
      overrides.emplace_back("train.patience", *c.epochs);
    }
  }
  return resolve_config(c.config, overrides);
}

void write_text(const fs::path& path, const std::string& text) {
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os << text;
    if (!os) throw IoError("failed writing " + path.string());
  }
  fs::rename(tmp, path);
}

void write_resolved(const fs::path& dir, const RunConfig& rc) {
  write_text(dir / "resolved_config.toml", "# fingerprint: " + rc.fingerprint() + "\n" + to_toml(rc.tree));
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void write_report(const fs::path& dir, MetricReport report, const Stopwatch& clock) {
  report.timestamp = {{"finished_utc", utc_now()}, {"elapsed_seconds", clock.seconds()}};
  write_text(dir / "report.json", report.to_json().dump(2) + "\n");
  write_text(dir / "report.csv", report.to_csv());
}

Dataset load_data(const std::string& dir, const RunConfig& rc) {
  if (dir.empty()) throw ConfigError("--data is required");
  if (!fs::exists(fs::path(dir) / kManifestName)) {
    throw IoError("no " + std::string(kManifestName) + " in " + dir);
  }
  auto data = load_dataset(dir, rc.preprocess());
  if (data.size() == 0) throw ConfigError("dataset " + dir + " is empty");
  return data;
}

ModelConfig model_for(const RunConfig& rc, const Dataset& data) {
  auto m = rc.model();
  m.encoder.in_channels = data.samples.front().volume.channels();
  return m;
}

void configure(const RunConfig& rc) { configure_runtime(rc.train()); }

MetricSummary single(double v) { return summarize({v}); }

void write_predictions(const fs::path& dir, const TaskSpec& task, const std::vector<SubjectPrediction>& preds) {
  fs::create_directories(dir);
  nlohmann::json j{{"task", task_id(task.kind)}, {"subjects", nlohmann::json::object()}};
  for (const auto& p : preds) {
    if (p.labels) {
      const auto file = p.subject_id + "_label.raw";
      save_label_volume(*p.labels, dir / file);
      j["subjects"][p.subject_id] = file;
    } else {
      j["subjects"][p.subject_id] = p.values;
    }
  }
  write_text(dir / kPredictionsFile, j.dump(2) + "\n");
}

std::vector<SubjectPrediction> read_predictions(const fs::path& dir, const TaskSpec& task) {
  std::ifstream in(dir / kPredictionsFile);
  if (!in) throw IoError("no " + std::string(kPredictionsFile) + " in " + dir.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed " + (dir / kPredictionsFile).string() + ": " + e.what());
  }
  if (j.value("task", std::string()) != task_id(task.kind)) {
    throw ConfigError("predictions in " + dir.string() + " are for task '" + j.value("task", std::string()) +
                      "', not '" + task_id(task.kind) + "'");
  }
  std::vector<SubjectPrediction> out;
  for (const auto& [id, value] : j.at("subjects").items()) {
    SubjectPrediction p;
    p.subject_id = id;
    if (task.kind == TaskKind::segmentation) {
      p.labels = load_label_volume(dir / value.get<std::string>());
    } else {
      p.values = value.get<std::vector<double>>();
    }
    out.push_back(std::move(p));
  }
  return out;
}

void add_common(CLI::App* app, Common& c, bool with_out = true) {
  app->add_option("--config", c.config, "Preset name (default, desk) or config file")->capture_default_str();
  app->add_option("--seed", c.seed, "Random seed (overrides config and MEDVIT_SEED)");
  app->add_option("--epochs", c.epochs, "Maximum training epochs")->check(CLI::PositiveNumber);
  app->add_option("--threads", c.threads, "Intra-op threads")->check(CLI::PositiveNumber);
  app->add_option("--set", c.set, "Config override key=value (repeatable), e.g. train.lr=1e-3");
  if (with_out) app->add_option("--out", c.out, "Output directory or .medckpt path")->required();
}

int gen_phantoms(const Common& c, std::int64_t count, std::optional<std::int64_t> grid,
                 std::optional<std::int64_t> channels, std::ostream& out) {
  std::vector<std::pair<std::string, nlohmann::json>> extra;
  if (grid) extra.emplace_back("phantom.grid", std::vector<std::int64_t>{*grid, *grid, *grid});
  if (channels) extra.emplace_back("phantom.channels", *channels);
  const auto rc = resolve(c, extra);
  if (count < 1) throw ConfigError("--count must be >= 1");
  const fs::path dir(c.out);
  fs::create_directories(dir);
  const auto records = write_phantom_dataset(dir, rc.phantom(), count);
  write_resolved(dir, rc);
  out << "wrote " << records.size() << " phantoms to " << dir.string() << "\n";
  return 0;
}

int pretrain_encoder_cmd(const Common& c, const std::string& data_dir, std::ostream& out) {
  Stopwatch clock;
  const auto rc = resolve(c);
  const auto paths = output_paths(c.out);
  configure(rc);
  const auto data = load_data(data_dir, rc);
  auto result = pretrain_encoder(data, model_for(rc, data), rc.train(), rc.ssl());
  save_checkpoint(result.checkpoint, paths.checkpoint);
  write_text(paths.dir / "loss_curve.csv", loss_curve_csv(result.history));
  write_resolved(paths.dir, rc);

  MetricReport report;
  report.task = "pretrain-encoder";
  report.fingerprint = rc.fingerprint();
  report.sample_count = static_cast<std::int64_t>(data.size());
  report.metrics["first_epoch_loss"] = single(result.history.front().train_loss);
  report.metrics["final_epoch_loss"] = single(result.history.back().train_loss);
  report.extra = {{"epochs", result.history.size()}, {"encoder_hash", result.encoder_hash_after}};
  write_report(paths.dir, report, clock);
  out << "triplet loss " << result.history.front().train_loss << " -> " << result.history.back().train_loss
      << " over " << result.history.size() << " epochs; checkpoint " << paths.checkpoint.string() << "\n";
  return 0;
}

int pretrain_transformer_cmd(const Common& c, const std::string& data_dir, const std::string& from, bool force,
                             std::ostream& out) {
  Stopwatch clock;
  const auto rc = resolve(c);
  if (from.empty()) throw ConfigError("--encoder <stage-1 checkpoint> is required");
  const auto paths = output_paths(c.out);
  configure(rc);
  const auto data = load_data(data_dir, rc);
  const auto source = load_checkpoint(from);
  auto result = pretrain_transformer(data, source, model_for(rc, data), rc.train(), rc.ssl(), force);
  save_checkpoint(result.checkpoint, paths.checkpoint);
  write_text(paths.dir / "loss_curve.csv", loss_curve_csv(result.history));
  write_resolved(paths.dir, rc);

  MetricReport report;
  report.task = "pretrain-transformer";
  report.fingerprint = rc.fingerprint();
  report.sample_count = static_cast<std::int64_t>(data.size());
  report.metrics["first_epoch_loss"] = single(result.history.front().train_loss);
  report.metrics["final_epoch_loss"] = single(result.history.back().train_loss);
  report.extra = {{"epochs", result.history.size()},
                  {"encoder_hash", result.encoder_hash_after},
                  {"source_fingerprint", source.fingerprint}};
  write_report(paths.dir, report, clock);
  out << "masked-prediction loss " << result.history.front().train_loss << " -> "
      << result.history.back().train_loss << "; encoder hash " << result.encoder_hash_after << " unchanged\n";
  return 0;
}

struct FinetuneArgs {
  std::string data;
  std::string task = "cls";
  std::string from;
  bool from_scratch = false;
  bool no_transformer = false;
  bool head_linear = false;
  bool force = false;
  bool scale_duplicated = false;
  double ratio = 1.0;
  std::size_t fold = 0;
};

void add_finetune_options(CLI::App* app, FinetuneArgs& f, bool with_fold) {
  app->add_option("--data", f.data, "Dataset directory")->required();
  app->add_option("--task", f.task, "cls, reg or seg")->check(CLI::IsMember({"cls", "reg", "seg"}))->required();
  auto* from = app->add_option("--from", f.from, "Pre-trained checkpoint");
  auto* scratch = app->add_flag("--from-scratch", f.from_scratch, "Random initialization baseline");
  from->excludes(scratch);
  app->add_flag("--no-transformer", f.no_transformer, "Use slice embeddings directly (no transformer)");
  app->add_flag("--head-linear", f.head_linear, "Strictly linear prediction head");
  app->add_flag("--force", f.force, "Load despite a backbone fingerprint mismatch");
  app->add_flag("--scale-duplicated", f.scale_duplicated, "Scale duplicated stem kernels by 1/C");
  app->add_option("--ratio", f.ratio, "Fraction of the training folds to use")->check(CLI::Range(0.0, 1.0));
  if (with_fold) app->add_option("--fold", f.fold, "Fold rotation index");
}

std::pair<RunConfig, FinetuneOptions> finetune_setup(const Common& c, const FinetuneArgs& f) {
  std::vector<std::pair<std::string, nlohmann::json>> extra{{"task.kind", f.task}};
  if (f.head_linear) extra.emplace_back("task.head_linear", true);
  if (f.no_transformer) extra.emplace_back("model.use_transformer", false);
  auto rc = resolve(c, extra);
  if (!f.from_scratch && f.from.empty()) throw ConfigError("pass --from <checkpoint> or --from-scratch");
  if (!(f.ratio > 0.0)) throw ConfigError("--ratio must be in (0, 1]");
  FinetuneOptions o;
  o.from_scratch = f.from_scratch;
  o.no_transformer = f.no_transformer || !rc.model().use_transformer;
  o.ratio = f.ratio;
  o.fold = f.fold;
  o.force = f.force;
  o.scale_duplicated = f.scale_duplicated;
  if (o.fold >= o.folds) throw ConfigError("--fold must be < " + std::to_string(o.folds));
  return {rc, o};
}

int finetune_cmd(const Common& c, const FinetuneArgs& f, std::ostream& out) {
  Stopwatch clock;
  auto [rc, options] = finetune_setup(c, f);
  const auto paths = output_paths(c.out);
  configure(rc);
  const auto data = load_data(f.data, rc);
  std::optional<Checkpoint> init;
  if (!options.from_scratch) init = load_checkpoint(f.from);
  const auto model = model_for(rc, data);
  auto result = finetune(data, init ? &*init : nullptr, model, rc.train(), options);

  save_checkpoint(result.checkpoint, paths.checkpoint);
  write_text(paths.dir / "loss_curve.csv", loss_curve_csv(result.history));
  write_predictions(paths.dir / "predictions", *model.task, result.test.predictions);
  write_resolved(paths.dir, rc);

  MetricReport report;
  report.task = f.task;
  report.fingerprint = rc.fingerprint();
  report.sample_count = static_cast<std::int64_t>(result.test_ids.size());
  for (const auto& [name, value] : result.test.metrics) report.metrics[name] = single(value);
  report.extra = {{"fold", options.fold},
                  {"ratio", options.ratio},
                  {"train_count", result.train_ids.size()},
                  {"validation_count", result.validation_ids.size()},
                  {"test_count", result.test_ids.size()},
                  {"best_epoch", result.best_epoch},
                  {"best_validation", result.best_validation},
                  {"epochs_run", result.history.size()},
                  {"from_scratch", options.from_scratch},
                  {"no_transformer", options.no_transformer}};
  write_report(paths.dir, report, clock);
  out << f.task << " fold " << options.fold << ": trained on " << result.train_ids.size() << " subjects, best epoch "
      << result.best_epoch << ", validation " << result.best_validation;
  for (const auto& [name, value] : result.test.metrics) out << ", test " << name << " " << value;
  out << "\n";
  return 0;
}

int run_cv_cmd(const Common& c, const FinetuneArgs& f, std::ostream& out) {
  Stopwatch clock;
  auto [rc, options] = finetune_setup(c, f);
  const fs::path dir(c.out);
  fs::create_directories(dir);
  configure(rc);
  const auto data = load_data(f.data, rc);
  std::optional<Checkpoint> init;
  if (!options.from_scratch) init = load_checkpoint(f.from);
  const auto model = model_for(rc, data);
  write_resolved(dir, rc);
  CvResult cv;
  try {
    cv = run_cv(data, init ? &*init : nullptr, model, rc.train(), options);
  } catch (const CvAborted& e) {
    auto partial = e.partial();
    partial.fingerprint = rc.fingerprint();
    partial.extra["error"] = e.what();
    write_report(dir, partial, clock);
    throw;
  }
  std::ostringstream curves;
  curves << "fold," << loss_curve_csv({}).substr(0, loss_curve_csv({}).find('\n') + 1);
  for (std::size_t k = 0; k < cv.folds.size(); ++k) {
    const auto csv = loss_curve_csv(cv.folds[k].history);
    std::istringstream lines(csv.substr(csv.find('\n') + 1));
    for (std::string line; std::getline(lines, line);) curves << k << "," << line << "\n";
    save_checkpoint(cv.folds[k].checkpoint, dir / ("fold" + std::to_string(k) + ".medckpt"));
  }
  write_text(dir / "loss_curve.csv", curves.str());
  cv.report.fingerprint = rc.fingerprint();
  cv.report.extra["ratio"] = options.ratio;
  cv.report.extra["from_scratch"] = options.from_scratch;
  cv.report.extra["no_transformer"] = options.no_transformer;
  write_report(dir, cv.report, clock);
  for (const auto& [name, s] : cv.report.metrics) {
    out << name << " " << s.mean << " +- " << s.std << " over " << s.per_fold.size() << " folds\n";
  }
  return 0;
}

int evaluate_cmd(const Common& c, const std::string& pred, const std::string& truth, const std::string& task,
                 std::ostream& out) {
  Stopwatch clock;
  const auto rc = resolve(c, {{"task.kind", task}});
  const fs::path dir = c.out.empty() ? fs::path(pred) : fs::path(c.out);
  fs::create_directories(dir);
  const auto truth_data = load_data(truth, rc);
  const auto spec = *rc.model().task;
  const auto predictions = read_predictions(pred, spec);
  const auto metrics = score_predictions(spec, predictions, truth_data);
  MetricReport report;
  report.task = task;
  report.fingerprint = rc.fingerprint();
  report.sample_count = static_cast<std::int64_t>(predictions.size());
  for (const auto& [name, value] : metrics) report.metrics[name] = single(value);
  write_report(dir, report, clock);
  for (const auto& [name, value] : metrics) out << name << " " << value << "\n";
  return 0;
}

int count_params_cmd(const Common& c, const std::string& task, bool no_transformer, bool as_json, std::ostream& out) {
  std::vector<std::pair<std::string, nlohmann::json>> extra{{"task.kind", task}};
  if (no_transformer) extra.emplace_back("model.use_transformer", false);
  const auto rc = resolve(c, extra);
  torch::manual_seed(rc.seed());
  MedicalTransformer model(rc.model());
  const auto count = count_parameters(*model);
  if (as_json) {
    out << nlohmann::json{{"task", task}, {"total", count.total}, {"breakdown", count.breakdown}}.dump(2) << "\n";
  } else {
    out << count.total << "\n";
    for (const auto& [group, n] : count.breakdown) out << "  " << group << " " << n << "\n";
  }
  return 0;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"medvit: multi-view slice transformer for volumetric images"};
  app.name("medvit");
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  Common common;
  std::int64_t count = 10;
  std::optional<std::int64_t> grid, channels;
  auto* gen = app.add_subcommand("gen-phantoms", "Write a synthetic phantom dataset");
  add_common(gen, common);
  gen->add_option("--count", count, "Number of subjects")->capture_default_str();
  gen->add_option("--grid", grid, "Cubic grid size")->check(CLI::PositiveNumber);
  gen->add_option("--channels", channels, "Image channels")->check(CLI::PositiveNumber);

  std::string data_dir;
  auto* pre1 = app.add_subcommand("pretrain-encoder", "Triplet pre-training of the slice encoders");
  add_common(pre1, common);
  pre1->add_option("--data", data_dir, "Dataset directory")->required();

  std::string encoder_ckpt;
  bool force = false;
  auto* pre2 = app.add_subcommand("pretrain-transformer", "Masked-prediction pre-training of the transformer");
  add_common(pre2, common);
  pre2->add_option("--data", data_dir, "Dataset directory")->required();
  pre2->add_option("--encoder,--from", encoder_ckpt, "Stage-1 checkpoint")->required();
  pre2->add_flag("--force", force, "Load despite a backbone fingerprint mismatch");

  FinetuneArgs ft;
  auto* fine = app.add_subcommand("finetune", "Fine-tune on one fold rotation");
  add_common(fine, common);
  add_finetune_options(fine, ft, true);

  auto* cv = app.add_subcommand("run-cv", "Fine-tune and evaluate every fold rotation");
  add_common(cv, common);
  add_finetune_options(cv, ft, false);

  std::string pred_dir, truth_dir, eval_task;
  auto* eval = app.add_subcommand("evaluate", "Score saved predictions against a dataset");
  add_common(eval, common, false);
  eval->add_option("--pred", pred_dir, "Predictions directory")->required();
  eval->add_option("--truth", truth_dir, "Dataset directory with ground truth")->required();
  eval->add_option("--task", eval_task, "cls, reg or seg")->check(CLI::IsMember({"cls", "reg", "seg"}))->required();
  eval->add_option("--out", common.out, "Report directory (default: the predictions directory)");

  std::string count_task = "cls";
  bool as_json = false, count_no_transformer = false;
  auto* params = app.add_subcommand("count-params", "Print the trainable parameter count");
  add_common(params, common, false);
  params->add_option("--task", count_task, "cls, reg or seg")->check(CLI::IsMember({"cls", "reg", "seg"}));
  params->add_flag("--json", as_json, "JSON output");
  params->add_flag("--no-transformer", count_no_transformer, "Count without the transformer");

  std::vector<std::string> argv_store{"medvit"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return 2;
  }

  try {
    if (gen->parsed()) return gen_phantoms(common, count, grid, channels, out);
    if (pre1->parsed()) return pretrain_encoder_cmd(common, data_dir, out);
    if (pre2->parsed()) return pretrain_transformer_cmd(common, data_dir, encoder_ckpt, force, out);
    if (fine->parsed()) return finetune_cmd(common, ft, out);
    if (cv->parsed()) return run_cv_cmd(common, ft, out);
    if (eval->parsed()) return evaluate_cmd(common, pred_dir, truth_dir, eval_task, out);
    if (params->parsed()) return count_params_cmd(common, count_task, count_no_transformer, as_json, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  err << app.help();
  return 2;
}

}  // namespace medvit::cli
