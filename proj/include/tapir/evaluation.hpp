#pragma once

// Frame-level mAP for phase/step recognition and mAP at an IoU threshold for
// instrument detection and action recognition, plus fold summaries and the
// report formats.

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tapir/annotation.hpp"

namespace tapir {

double iou(const BoundingBox& a, const BoundingBox& b);

// All-points AP: rank by score (descending, ties keep input order) and
// average the precision at every relevant rank over `total_positives`
// (defaults to the number of relevant entries; pass more to count misses).
// Returns nullopt when there is no positive at all.
std::optional<double> average_precision(const std::vector<double>& scores, const std::vector<bool>& relevant,
                                        int64_t total_positives = -1);

struct FramePrediction {
  std::string video_id;
  int64_t frame_index = 0;
  std::vector<double> scores;
};

struct DetectionPrediction {
  std::string video_id;
  int64_t frame_index = 0;
  BoundingBox box;
  std::vector<double> scores;  // instrument (7) or action (16) scores
};

enum class LabelMode { kInstrument, kAction };

struct ClassResult {
  int class_id = 0;
  std::optional<double> ap;  // absent when the class has no ground truth
  int64_t ground_truth = 0, true_positives = 0, false_positives = 0, missed = 0;
};

struct EvalReport {
  std::string task;
  int fold = -1;
  std::vector<ClassResult> per_class;
  double map = 0;
  int classes_evaluated = 0;
};

// Ranks the keyframes by each class score; the label of a keyframe is its
// phase ("phase") or step ("step"). Throws ValidationError listing keyframes
// without a prediction.
EvalReport frame_map(const std::vector<FramePrediction>& preds, const std::vector<KeyframeAnnotation>& keyframes,
                     const std::string& task);

// Greedy per-class matching in score order against the unmatched ground
// truth of the same frame with the highest IoU (>= threshold). In action mode
// every action label of a ground-truth box is a separate target.
EvalReport detection_map(const std::vector<DetectionPrediction>& preds,
                         const std::vector<KeyframeAnnotation>& keyframes, LabelMode mode,
                         double iou_threshold = 0.5);

struct MeanStd {
  double mean = 0, std = 0;  // population standard deviation
};
MeanStd mean_std(const std::vector<double>& values);

struct TaskSummary {
  std::string task;
  std::vector<EvalReport> folds;
  MeanStd map;
};

TaskSummary summarize_folds(const std::string& task, std::vector<EvalReport> folds);

nlohmann::json to_json(const EvalReport& r);
nlohmann::json to_json(const TaskSummary& s);

// Method x task table of mAP (percent) with "mean ± std" cells.
std::string format_table(const std::string& method, const std::vector<TaskSummary>& tasks);
// One row per (task, fold) plus mean and std rows.
std::string format_csv(const std::vector<TaskSummary>& tasks);

nlohmann::json to_json(const std::vector<FramePrediction>& preds);
nlohmann::json to_json(const std::vector<DetectionPrediction>& preds);
std::vector<FramePrediction> frame_predictions_from_json(const nlohmann::json& j);
std::vector<DetectionPrediction> detection_predictions_from_json(const nlohmann::json& j);

}  // namespace tapir
