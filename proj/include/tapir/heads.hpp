#pragma once

// Classification heads. Frame tasks read the encoder's class embedding;
// box tasks read the average-pooled video grid concatenated (video first)
// with the detector's per-box feature.

#include <random>
#include <string>

#include "tapir/encoder.hpp"
#include "tapir/nn/params.hpp"

namespace tapir {

enum class Task { kPhase, kStep, kInstrument, kAction };

const char* task_name(Task t);
// Throws std::invalid_argument listing the valid names.
Task parse_task(const std::string& name);
int task_classes(Task t);
inline bool is_frame_task(Task t) { return t == Task::kPhase || t == Task::kStep; }
// Actions are multi-label (sigmoid + binary cross-entropy); the rest are softmax.
inline bool is_multi_label(Task t) { return t == Task::kAction; }

struct FrameHead {
  Task task = Task::kPhase;
  nn::Linear linear;
  // [B, C] -> [B, classes]
  Tensor operator()(const Tensor& class_embedding) const;
};

FrameHead make_frame_head(nn::ParamStore& ps, const std::string& name, int64_t dim, Task task, std::mt19937_64& rng);

// Mean of the grid tokens (class token excluded): [B, C].
Tensor pool_video_features(const TokenGrid& final_grid);

struct BoxHead {
  Task task = Task::kInstrument;
  int64_t video_dim = 0, box_dim = 0;  // box_dim == 0: video features only
  nn::Linear linear;
  // pooled [M, video_dim], box_feature [M, box_dim] (ignored when box_dim == 0)
  Tensor operator()(const Tensor& pooled, const Tensor& box_feature) const;
  bool uses_box_features() const { return box_dim > 0; }
};

BoxHead make_box_head(nn::ParamStore& ps, const std::string& name, int64_t video_dim, int64_t box_dim, Task task,
                      std::mt19937_64& rng);
// Same head without the per-box features.
BoxHead make_box_head_ablation(nn::ParamStore& ps, const std::string& name, int64_t video_dim, Task task,
                               std::mt19937_64& rng);

}  // namespace tapir
