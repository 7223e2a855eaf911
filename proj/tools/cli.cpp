#include "tapir/cli.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "tapir/data.hpp"
#include "tapir/errors.hpp"
#include "tapir/training.hpp"

namespace tapir {

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config;
  std::string task;
  int fold = -1;
  std::string format = "table";
  bool quiet = false;
};

void summarize(const DatasetIndex& index, std::ostream& out) {
  size_t box_kfs = 0, instances = 0;
  for (const auto& kf : index.keyframes) {
    box_kfs += kf.has_box_annotations;
    instances += kf.instances.size();
  }
  const FoldSplit f = build_folds(index, default_fold_assignment(index));
  out << "videos: " << index.videos.size() << "\n"
      << "keyframes: " << index.keyframes.size() << " (" << box_kfs << " with boxes)\n"
      << "instances: " << instances << "\n"
      << "folds: " << f.folds[0].size() << " + " << f.folds[1].size() << " videos\n";
}

// Renders the dataset unless an identical one is already on disk.
DatasetIndex ensure_dataset(const ExperimentConfig& cfg, std::ostream& out) {
  if (dataset_matches_manifest(cfg.generator, cfg.dataset_dir)) {
    out << "dataset exists, checksums match: " << cfg.dataset_dir << "\n";
    return load_dataset((fs::path(cfg.dataset_dir) / "annotations.json").string());
  }
  if (fs::exists(fs::path(cfg.dataset_dir) / "manifest.json"))
    out << "dataset at " << cfg.dataset_dir << " is stale or modified, regenerating\n";
  const RenderedDataset d = render_dataset(cfg.generator, cfg.dataset_dir);
  out << "wrote " << cfg.dataset_dir << "\n";
  return d.index;
}

DatasetIndex existing_dataset(const ExperimentConfig& cfg) {
  const fs::path ann = fs::path(cfg.dataset_dir) / "annotations.json";
  if (!fs::exists(ann)) throw ValidationError("no dataset at " + cfg.dataset_dir + "; run `tapir generate` first");
  return load_dataset(ann.string());
}

std::vector<Task> selected_tasks(const ExperimentConfig& cfg, const Options& o) {
  if (o.task.empty()) return cfg.tasks;
  return {parse_task(o.task)};
}

std::vector<int> selected_folds(const Options& o) {
  if (o.fold >= 0) return {o.fold};
  return {0, 1};
}

int cmd_generate(const Options& o, std::ostream& out) {
  const ExperimentConfig cfg = load_experiment_config(o.config);
  const DatasetIndex index = ensure_dataset(cfg, out);
  const ValidationReport report = validate_dataset(index);
  for (const auto& v : report) out << format_violation(v) << "\n";
  if (!report.empty()) throw ValidationError(std::to_string(report.size()) + " schema violations in generated data");
  summarize(index, out);
  return exit_code::kOk;
}

int cmd_validate(const Options& o, std::ostream& out) {
  const ExperimentConfig cfg = load_experiment_config(o.config);
  const fs::path ann = fs::path(cfg.dataset_dir) / "annotations.json";
  if (!fs::exists(ann)) throw ValidationError("no dataset at " + cfg.dataset_dir);
  const ValidationReport report = validate_annotation_file(ann.string());
  for (const auto& v : report) out << format_violation(v) << "\n";
  out << report.size() << " violations\n";
  return report.empty() ? exit_code::kOk : exit_code::kValidation;
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& log) {
  const ExperimentConfig cfg = load_experiment_config(o.config);
  const DatasetIndex index = existing_dataset(cfg);
  FrameStore store(directory_source(cfg.dataset_dir), index);
  Pipeline p(cfg, index, store, cfg.output_dir, o.quiet ? nullptr : &log);
  for (int fold : selected_folds(o)) {
    const RunRecord r = o.task == "detector" ? p.train_detector(fold) : p.train(parse_task(o.task), fold);
    out << r.task << " fold " << fold << ": " << r.epoch_losses.size() << " epochs, final loss " << r.epoch_losses.back()
        << "\n  " << r.checkpoint << "\n";
  }
  return exit_code::kOk;
}

void print_summaries(const std::vector<TaskSummary>& s, const std::string& format, std::ostream& out) {
  if (format == "csv") out << format_csv(s);
  else out << format_table("TAPIR", s);
}

int cmd_eval(const Options& o, std::ostream& out, std::ostream& log) {
  const ExperimentConfig cfg = load_experiment_config(o.config);
  const DatasetIndex index = existing_dataset(cfg);
  FrameStore store(directory_source(cfg.dataset_dir), index);
  Pipeline p(cfg, index, store, cfg.output_dir, o.quiet ? nullptr : &log);
  p.set_train_missing(false);
  std::vector<TaskSummary> summaries;
  for (Task t : selected_tasks(cfg, o)) {
    std::vector<EvalReport> reports;
    for (int fold : selected_folds(o)) reports.push_back(p.evaluate(t, fold));
    summaries.push_back(summarize_folds(task_name(t), std::move(reports)));
  }
  if (p.leakage_violations() != 0)
    throw ValidationError(std::to_string(p.leakage_violations()) + " evaluation keyframes come from training videos");
  nlohmann::json j = nlohmann::json::array();
  for (const auto& s : summaries) j.push_back(to_json(s));
  fs::create_directories(cfg.output_dir);
  std::ofstream(fs::path(cfg.output_dir) / "eval_summary.json") << j.dump(2) << "\n";
  print_summaries(summaries, o.format, out);
  return exit_code::kOk;
}

int cmd_reproduce_all(const Options& o, std::ostream& out, std::ostream& log) {
  const ExperimentConfig cfg = load_experiment_config(o.config);
  const DatasetIndex index = ensure_dataset(cfg, out);
  if (const auto report = validate_dataset(index); !report.empty())
    throw ValidationError(std::to_string(report.size()) + " schema violations in " + cfg.dataset_dir);
  FrameStore store(directory_source(cfg.dataset_dir), index);
  Pipeline p(cfg, index, store, cfg.output_dir, o.quiet ? nullptr : &log);
  const nlohmann::json report = p.reproduce_all();
  std::vector<TaskSummary> summaries;
  for (const auto& t : report.at("tasks")) {
    TaskSummary s;
    s.task = t.at("task").get<std::string>();
    s.map.mean = t.at("map_mean").get<double>();
    s.map.std = t.at("map_std").get<double>();
    for (const auto& f : t.at("folds")) {
      EvalReport r;
      r.task = s.task;
      r.fold = f.at("fold").get<int>();
      r.map = f.at("map").get<double>();
      s.folds.push_back(r);
    }
    summaries.push_back(std::move(s));
  }
  print_summaries(summaries, o.format, out);
  out << "leakage violations: " << report.at("leakage_violations").get<int>() << "\n"
      << "report: " << (fs::path(cfg.output_dir) / "final_report.json").string() << "\n";
  return report.at("leakage_violations").get<int>() == 0 ? exit_code::kOk : exit_code::kValidation;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Surgical video understanding on synthetic data", "tapir"};
  app.require_subcommand(1);
  Options o;
  const std::set<std::string> tasks{"phase", "step", "instrument", "action"};
  std::set<std::string> train_tasks = tasks;
  train_tasks.insert("detector");

  auto* gen = app.add_subcommand("generate", "render the synthetic dataset named by the config");
  auto* val = app.add_subcommand("validate", "check the dataset against the annotation schema");
  auto* train = app.add_subcommand("train", "train one task (dependencies included)");
  auto* eval = app.add_subcommand("eval", "evaluate trained runs on their held-out folds");
  auto* all = app.add_subcommand("reproduce-all", "generate, train and evaluate every task on both folds");
  for (auto* c : {gen, val, train, eval, all})
    c->add_option("-c,--config", o.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("-t,--task", o.task, "phase, step, instrument, action or detector")
      ->required()
      ->check(CLI::IsMember(train_tasks));
  eval->add_option("-t,--task", o.task, "task to evaluate (default: all configured)")->check(CLI::IsMember(tasks));
  for (auto* c : {train, eval}) c->add_option("-f,--fold", o.fold, "0 or 1 (default: both)")->check(CLI::Range(0, 1));
  for (auto* c : {eval, all})
    c->add_option("--format", o.format, "table or csv")->check(CLI::IsMember({"table", "csv"}));
  for (auto* c : {train, eval, all}) c->add_flag("-q,--quiet", o.quiet, "no progress log");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o_, e_;
    const int rc = app.exit(e, o_, e_);
    out << o_.str();
    err << e_.str();
    return rc == 0 ? exit_code::kOk : exit_code::kUsage;
  }

  try {
    if (gen->parsed()) return cmd_generate(o, out);
    if (val->parsed()) return cmd_validate(o, out);
    if (train->parsed()) return cmd_train(o, out, err);
    if (eval->parsed()) return cmd_eval(o, out, err);
    return cmd_reproduce_all(o, out, err);
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return exit_code::kNumeric;
  } catch (const ValidationError& e) {
    err << "validation failure: " << e.what() << "\n";
    return exit_code::kValidation;
  } catch (const std::invalid_argument& e) {
    err << "invalid config: " << e.what() << "\n";
    return exit_code::kValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::kValidation;
  }
}

}  // namespace tapir
