#pragma once

// Procedural toy surgery videos: textured backgrounds tinted by phase, a
// target blob placed by step, and moving geometric instruments whose shape
// and hue encode the instrument class and whose motion encodes the actions.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tapir/annotation.hpp"
#include "tapir/image_io.hpp"

namespace tapir {

struct GeneratorConfig {
  int n_videos = 8;
  int frames_per_video = 140;
  int fps = 1;
  int image_height = 64;
  int image_width = 64;
  int keyframe_stride_dense = 0;   // 0 selects fps (one keyframe per second)
  int keyframe_stride_sparse = 0;  // 0 selects 35 * fps
  int segment_min_frames = 0;      // 0 selects 20 * fps
  int segment_max_frames = 0;      // 0 selects 40 * fps
  int max_instruments = 3;
  double instrument_scale = 0.25;  // short side of a square instrument, fraction of min(H, W)
  double speed_min = 0.6;          // pixels per frame
  double speed_max = 1.2;
  // Empty priors mean uniform. The step prior is renormalised over the
  // children of the drawn phase; the first three action weights select the
  // motion pattern (still, horizontal, vertical).
  std::vector<double> phase_prior, step_prior, instrument_prior, action_prior;
  uint64_t seed = 0;

  int dense_stride() const { return keyframe_stride_dense > 0 ? keyframe_stride_dense : fps; }
  int sparse_stride() const { return keyframe_stride_sparse > 0 ? keyframe_stride_sparse : 35 * fps; }
  int min_segment() const { return segment_min_frames > 0 ? segment_min_frames : 20 * fps; }
  int max_segment() const { return segment_max_frames > 0 ? segment_max_frames : 40 * fps; }

  // Throws ValidationError describing the first bad field.
  void validate() const;
};

nlohmann::json to_json(const GeneratorConfig& c);
// Keys absent from the document keep their defaults; unknown keys are rejected.
GeneratorConfig generator_config_from_json(const nlohmann::json& j);

enum Motion : int { kStill = 0, kHorizontal = 1, kVertical = 2 };

// Half-open pixel rectangle [x1, x2) x [y1, y2).
struct PixelBox {
  int x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  bool intersects(const PixelBox& o) const { return x1 < o.x2 && o.x1 < x2 && y1 < o.y2 && o.y1 < y2; }
  friend bool operator==(const PixelBox&, const PixelBox&) = default;
};

struct InstrumentTrack {
  int instrument_id = 0;
  int motion = kStill;
  int box_w = 1, box_h = 1;
  double x0 = 0, y0 = 0;  // top-left corner at the segment start
  double speed = 0;       // signed, along the motion axis, bouncing at the borders

  PixelBox box_at(int64_t frames_since_start, int height, int width) const;
};

struct Segment {
  int phase_id = 0;
  int step_id = 0;
  int64_t start_frame = 0, end_frame = 0;  // [start, end)
  std::vector<InstrumentTrack> tracks;
  std::optional<PixelBox> target;  // absent for Idle
};

struct SceneScript {
  uint64_t seed = 0;
  int height = 0, width = 0;
  std::vector<Segment> segments;

  const Segment& segment_at(int64_t frame) const;
  // Ground-truth instances visible at a frame, with their derived actions.
  std::vector<InstrumentInstance> instances_at(int64_t frame) const;
  std::vector<PixelBox> pixel_boxes_at(int64_t frame) const;
};

nlohmann::json to_json(const SceneScript& s);

// Per-video seed derived from the dataset seed and the video position.
uint64_t video_seed(uint64_t dataset_seed, int video_index);
std::string video_name(int video_index);

SceneScript script_procedure(const GeneratorConfig& config, uint64_t video_seed);

// Action ids of an instrument given its motion and target contact.
std::vector<int> derive_actions(int instrument_id, int motion, bool touches_target);

// Fixed flat colour of each instrument class.
std::array<uint8_t, 3> instrument_color(int instrument_id);

Image render_frame(const SceneScript& script, int64_t frame);

// Keyframe annotations for one scripted video: dense keyframes carry the
// phase-step pair, sparse ones add the instrument instances.
std::vector<KeyframeAnnotation> script_keyframes(const GeneratorConfig& config, const SceneScript& script,
                                                 const std::string& video_id);

// Scripts every video and assembles the annotation index without rendering.
DatasetIndex build_dataset_index(const GeneratorConfig& config, std::vector<SceneScript>* scripts = nullptr);

struct RenderedDataset {
  DatasetIndex index;
  std::string root;
};

// Writes <root>/videos/<video_id>/<frame>.png, <root>/annotations.json and
// <root>/manifest.json. `threads` <= 0 reads TAPIR_BENCH_THREADS (default 1).
// Throws std::runtime_error when the output location is not writable.
RenderedDataset render_dataset(const GeneratorConfig& config, const std::string& root, int threads = 0);

// True when <root>/manifest.json echoes `config` and every listed file still
// has its recorded checksum.
bool dataset_matches_manifest(const GeneratorConfig& config, const std::string& root);

int worker_threads_from_env();

}  // namespace tapir
