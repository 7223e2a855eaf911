#pragma once

// A scaled-down experiment that trains in seconds on one core.

#include <filesystem>
#include <map>
#include <random>
#include <string>

#include "tapir/training.hpp"

namespace tapir::testing {

inline ExperimentConfig tiny_experiment(int videos = 4, int frames = 40) {
  ExperimentConfig c;
  c.seed = 5;
  c.generator.n_videos = videos;
  c.generator.frames_per_video = frames;
  c.generator.image_height = c.generator.image_width = 32;
  c.generator.keyframe_stride_dense = 4;
  c.generator.keyframe_stride_sparse = 8;
  c.generator.segment_min_frames = 10;
  c.generator.segment_max_frames = 20;
  c.generator.max_instruments = 2;
  c.generator.instrument_scale = 0.3;
  c.generator.seed = 11;

  c.encoder.clip_length = 4;
  c.encoder.image_height = c.encoder.image_width = 32;
  c.encoder.patch = {2, 8, 8};
  c.encoder.embed_dim = 16;
  c.encoder.mlp_ratio = 2;
  c.encoder.stages = {StageConfig{1, 2, {1, 1, 1}, {1, 2, 2}, 1.0}, StageConfig{1, 2, {1, 2, 2}, {1, 1, 1}, 2.0}};
  c.clip_stride = 2;

  c.detector.image_height = c.detector.image_width = 32;
  c.detector.backbone_factors = {4, 2};
  c.detector.backbone_channels = {16, 16};
  c.detector.d_model = 16;
  c.detector.ffn_dim = 32;
  c.detector.num_queries = 8;
  c.detector.dec_layers = 1;

  c.optim.epochs = 3;
  c.optim.warmup_epochs = 1;
  c.detector_optim.epochs = 2;
  c.detector_optim.warmup_epochs = 0;
  return c;
}

// In-memory dataset rendered on demand from the scene scripts.
inline FrameSource tiny_source(const GeneratorConfig& g, DatasetIndex& index) {
  std::vector<SceneScript> scripts;
  index = build_dataset_index(g, &scripts);
  std::map<std::string, SceneScript> by_id;
  for (size_t i = 0; i < scripts.size(); ++i) by_id[index.videos[i].video_id] = scripts[i];
  return script_source(std::move(by_id));
}

struct TinyData {
  DatasetIndex index;
  FrameStore store;
  explicit TinyData(const GeneratorConfig& g) : store(tiny_source(g, index), index) {}
};

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() / ("tapir_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string str(const std::string& sub = "") const { return (path / sub).string(); }
};

}  // namespace tapir::testing
