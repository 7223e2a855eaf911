#pragma once

// Training and evaluation of the four tasks under two-fold cross-validation.
// Every run lives in its own directory:
//   <run>/config.json           experiment config echo plus run identity
//   <run>/checkpoints/epoch_<k> weights and optimizer state after k epochs
//   <run>/metrics.csv           epoch, loss, lr
//   <run>/final_report.json     written once training has finished
// A run whose final report exists is not retrained; a run with checkpoints
// resumes after the newest one.

#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tapir/annotation.hpp"
#include "tapir/data.hpp"
#include "tapir/detector.hpp"
#include "tapir/encoder.hpp"
#include "tapir/evaluation.hpp"
#include "tapir/heads.hpp"
#include "tapir/optim.hpp"
#include "tapir/synthetic.hpp"

namespace tapir {

struct OptimConfig {
  std::string optimizer = "sgd";  // "sgd" or "adamw"
  double base_lr = 0.0125;
  double weight_decay = 1e-4;
  double momentum = 0.9;  // sgd only
  int epochs = 30;
  int warmup_epochs = 5;
  int batch_size = 4;
  double grad_clip = 0.0;  // global norm; 0 disables

  void validate() const;  // throws std::invalid_argument
};

// Linear warmup to base_lr over the first warmup_epochs/epochs of training,
// then half-cosine decay to zero. progress is clamped to [0, 1].
double lr_at(double progress, const OptimConfig& cfg);

// AdamW, lr 2e-3, one warmup epoch, gradient clipping at 0.1.
OptimConfig default_detector_optim();

struct ExperimentConfig {
  uint64_t seed = 0;  // required in config files
  std::string dataset_dir = "data";  // generated dataset location
  std::string output_dir = "runs";   // run directories and the final report
  GeneratorConfig generator;
  EncoderConfig encoder = EncoderConfig::toy();
  int clip_stride = 1;
  DetectorConfig detector;
  OptimConfig optim;           // encoder and heads
  OptimConfig detector_optim = default_detector_optim();
  double detection_threshold = 0.75;
  // A detector query stands in for a ground-truth box during box-head
  // training only if its box overlaps the ground truth at least this much.
  double match_iou = 0.5;
  bool step_init = true;      // box tasks start from the step-task encoder
  bool box_features = true;   // false trains the video-only ablation head
  std::vector<Task> tasks{Task::kPhase, Task::kStep, Task::kInstrument, Task::kAction};
  int keep_checkpoints = 2;   // newest checkpoints kept per run (0 keeps all)

  // Detector and encoder image sizes follow the generator.
  void validate() const;  // throws std::invalid_argument
};

nlohmann::json to_json(const OptimConfig& c);
OptimConfig optim_config_from_json(const nlohmann::json& j, OptimConfig defaults = {});
nlohmann::json to_json(const ExperimentConfig& c);
// Absent keys keep their defaults except "seed", which is required;
// unknown keys are rejected. Relative paths in a loaded file are taken
// relative to the file's directory.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::string& path);

struct RunRecord {
  std::string run_dir;
  std::string task;  // "detector" or a task name
  int fold = 0;
  std::vector<double> epoch_losses;
  std::vector<double> epoch_lrs;  // learning rate at the start of each epoch
  std::string checkpoint;         // final checkpoint path
  std::vector<std::string> training_videos;
};

// One box-head training target: a ground-truth instance and the feature of
// the detector query matched to it.
struct BoxSample {
  size_t keyframe = 0;  // position in the keyframe list it was collected from
  std::vector<double> feature;
  int instrument = 0;
  std::vector<int> actions;
};

// Detector forward passes are batched; the detector is frozen.
std::vector<BoxSample> collect_box_samples(const Detector& detector, FrameStore& store,
                                           const std::vector<const KeyframeAnnotation*>& keyframes,
                                           double match_iou, int batch_size = 8);

// Copies the encoder parameters of a step-task checkpoint into `params`.
// Throws ValidationError listing missing or mismatched parameters.
void transfer_init(const std::string& step_checkpoint, nn::ParamStore& params);

// Encoder plus one head, with its own parameter store.
class TaskModel {
 public:
  TaskModel(const ExperimentConfig& cfg, Task task, uint64_t seed);

  Task task() const { return task_; }
  nn::ParamStore& params() { return params_; }
  const VideoEncoder& encoder() const { return *encoder_; }

  // clips [B, T, H, W, 3] -> [B, classes]
  Tensor frame_logits(const Tensor& clips) const;
  // Logits for every box; box_clip[i] indexes the clip the box belongs to.
  Tensor box_logits(const Tensor& clips, const std::vector<int64_t>& box_clip, const Tensor& box_features) const;

 private:
  Task task_;
  nn::ParamStore params_;
  std::unique_ptr<VideoEncoder> encoder_;
  std::optional<FrameHead> frame_head_;
  std::optional<BoxHead> box_head_;
};

// Orchestrates the staged runs of one experiment on one dataset:
// detector first, then the frame tasks, then the box tasks (encoder from
// the step run when step_init is set, detector frozen).
class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, DatasetIndex index, FrameStore& store, std::string output_root,
           std::ostream* log = nullptr);

  const FoldSplit& folds() const { return folds_; }
  const ExperimentConfig& config() const { return cfg_; }
  std::string run_dir(const std::string& task, int fold) const;

  // Keyframes of the given videos: all of them for frame tasks, the
  // box-annotated ones for box tasks and the detector.
  std::vector<const KeyframeAnnotation*> keyframes(const std::vector<std::string>& videos, bool boxes) const;
  std::vector<std::string> training_videos(int fold) const { return folds_.folds[static_cast<size_t>(fold)]; }
  std::vector<std::string> held_out_videos(int fold) const { return folds_.folds[static_cast<size_t>(1 - fold)]; }

  RunRecord train_detector(int fold);
  RunRecord train(Task task, int fold);

  // Held-out evaluation; writes predictions.json and eval_report.json into
  // the run directory and counts fold-leakage violations.
  EvalReport evaluate(Task task, int fold);
  // Detector instrument mAP over the given videos; threshold 0 keeps every query.
  EvalReport evaluate_detector(int fold, const std::vector<std::string>& videos, double threshold = 0.0);
  // Top-1 accuracy of a frame task on its own training fold.
  double training_accuracy(Task task, int fold);

  TaskSummary cross_validate(Task task);
  // Trains and evaluates every configured task on both folds and writes
  // <output>/final_report.json (returned).
  nlohmann::json reproduce_all();

  int leakage_violations() const { return leakage_violations_; }
  // When off, a run that has not finished training raises ValidationError
  // instead of being trained.
  void set_train_missing(bool on) { train_missing_ = on; }

 private:
  std::unique_ptr<Detector> load_detector(int fold, nn::ParamStore& ps);
  std::unique_ptr<TaskModel> load_model(Task task, int fold);
  void say(const std::string& msg) const;

  ExperimentConfig cfg_;
  DatasetIndex index_;
  FrameStore& store_;
  std::string root_;
  std::ostream* log_;
  FoldSplit folds_;
  int leakage_violations_ = 0;
  bool train_missing_ = true;
};

}  // namespace tapir
