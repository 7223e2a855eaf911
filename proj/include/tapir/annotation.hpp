#pragma once

// Multi-level surgical annotation schema: taxonomy, keyframes with one
// phase-step pair and optional instrument instances, dataset validation,
// two-fold splits and keyframe-centered clip windows.

#include <array>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

namespace tapir {

inline constexpr const char* kSchemaVersion = "psiava-schema/1";

inline constexpr int kNumPhases = 11;
inline constexpr int kNumSteps = 20;
inline constexpr int kNumInstruments = 7;
inline constexpr int kNumActions = 16;
inline constexpr int kMaxActionsPerInstance = 3;

struct Taxonomy {
  std::vector<std::string> phases;
  std::vector<std::string> steps;
  std::vector<std::string> instruments;
  std::vector<std::string> actions;
  std::vector<std::set<int>> phase_to_steps;  // indexed by phase id
  int idle_phase_id = 0;
  int idle_step_id = 0;

  // The vocabulary used by the synthetic generator. Category names and the
  // phase -> step partonomy are invented; only the cardinalities are fixed.
  static Taxonomy standard();

  bool step_in_phase(int phase_id, int step_id) const;
  // Phase whose partonomy lists the step first, or -1.
  int parent_phase(int step_id) const;
  // Position of the step among its phase's children (0-based), or -1.
  int sibling_index(int phase_id, int step_id) const;
};

// Normalized corner form, 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1.
struct BoundingBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  bool valid() const;
  double area() const { return (x2 - x1) * (y2 - y1); }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

// Center form (cx, cy, w, h) used inside the detector.
struct CenterBox {
  double cx = 0, cy = 0, w = 0, h = 0;
};

CenterBox to_center(const BoundingBox& b);
BoundingBox to_corners(const CenterBox& c);

struct InstrumentInstance {
  BoundingBox box;
  int instrument_id = 0;
  std::vector<int> action_ids;  // 1..3 distinct ids
};

struct KeyframeAnnotation {
  std::string video_id;
  int64_t frame_index = 0;
  int phase_id = 0;
  int step_id = 0;
  std::vector<InstrumentInstance> instances;
  bool has_box_annotations = false;
};

struct VideoInfo {
  std::string video_id;
  int64_t frame_count = 0;
  int frames_per_second = 1;
};

struct DatasetIndex {
  std::vector<VideoInfo> videos;
  std::vector<KeyframeAnnotation> keyframes;
  Taxonomy taxonomy;

  const VideoInfo& video(const std::string& id) const;
};

struct Violation {
  std::string video_id;
  int64_t frame_index = -1;
  std::string rule;
  std::string detail;
};

using ValidationReport = std::vector<Violation>;

// Rule names reported by validate_dataset.
namespace rules {
inline constexpr const char* kTaxonomy = "taxonomy";
inline constexpr const char* kDuplicateVideo = "duplicate video id";
inline constexpr const char* kVideoFrames = "video frame count";
inline constexpr const char* kUnknownVideo = "unknown video";
inline constexpr const char* kFrameRange = "frame index range";
inline constexpr const char* kDuplicateKeyframe = "one phase-step pair per keyframe";
inline constexpr const char* kPhaseRange = "phase id range";
inline constexpr const char* kStepRange = "step id range";
inline constexpr const char* kStepNotInPhase = "step not in phase";
inline constexpr const char* kBoxFlag = "instances require box annotation flag";
inline constexpr const char* kInstrumentRange = "instrument id range";
inline constexpr const char* kActionCardinality = "action cardinality";
inline constexpr const char* kActionRange = "action id range";
inline constexpr const char* kBoxBounds = "box bounds";
inline constexpr const char* kMalformed = "malformed record";
}  // namespace rules

ValidationReport validate_dataset(const DatasetIndex& index);

struct FoldSplit {
  std::array<std::vector<std::string>, 2> folds;
  int fold_of(const std::string& video_id) const;  // -1 when absent
};

// Throws ValidationError naming the offending video when the assignment is
// incomplete, names unknown videos, or uses a fold outside {0, 1}.
FoldSplit build_folds(const DatasetIndex& index, const std::map<std::string, int>& assignment);
// First half of the videos (by id) in fold 0, the rest in fold 1.
std::map<std::string, int> default_fold_assignment(const DatasetIndex& index);

// Frame indices of a T-frame window centered on the keyframe: position
// floor(T/2) holds the keyframe, neighbours are `stride` frames apart and
// indices are clamped to [0, frame_count - 1].
std::vector<int64_t> clip_window(const KeyframeAnnotation& keyframe, int64_t frame_count, int T, int stride);

// ---- JSON document ---------------------------------------------------------

nlohmann::json to_json(const Taxonomy& t);
nlohmann::json to_json(const DatasetIndex& index);

struct ParsedDataset {
  DatasetIndex index;
  ValidationReport malformed;  // records that could not be decoded
};

// Decodes an annotation document. Missing schema version or top-level
// sections raise ValidationError; individual malformed records become
// violations and are skipped.
ParsedDataset parse_dataset(const nlohmann::json& doc);
ParsedDataset read_dataset_file(const std::string& path);
// Parse + validate; the union of both reports.
ValidationReport validate_annotation_file(const std::string& path);
// Loads a dataset and throws ValidationError unless it is fully valid.
DatasetIndex load_dataset(const std::string& path);
void save_dataset(const DatasetIndex& index, const std::string& path);

std::string format_violation(const Violation& v);

}  // namespace tapir
