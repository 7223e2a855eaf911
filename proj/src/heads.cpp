#include "tapir/heads.hpp"

#include <stdexcept>

#include "tapir/annotation.hpp"

namespace tapir {

const char* task_name(Task t) {
  switch (t) {
    case Task::kPhase: return "phase";
    case Task::kStep: return "step";
    case Task::kInstrument: return "instrument";
    case Task::kAction: return "action";
  }
  return "?";
}

Task parse_task(const std::string& name) {
  for (Task t : {Task::kPhase, Task::kStep, Task::kInstrument, Task::kAction})
    if (name == task_name(t)) return t;
  throw std::invalid_argument("unknown task '" + name + "' (expected phase, step, instrument or action)");
}

int task_classes(Task t) {
  switch (t) {
    case Task::kPhase: return kNumPhases;
    case Task::kStep: return kNumSteps;
    case Task::kInstrument: return kNumInstruments;
    case Task::kAction: return kNumActions;
  }
  return 0;
}

Tensor FrameHead::operator()(const Tensor& class_embedding) const {
  if (class_embedding.rank() != 2 || class_embedding.dim(1) != linear.in())
    throw std::invalid_argument("frame head: expected [B, " + std::to_string(linear.in()) + "] embedding, got " +
                                nn::shape_str(class_embedding.shape()));
  return linear(class_embedding);
}

FrameHead make_frame_head(nn::ParamStore& ps, const std::string& name, int64_t dim, Task task, std::mt19937_64& rng) {
  if (!is_frame_task(task)) throw std::invalid_argument(std::string("frame head: not a frame task: ") + task_name(task));
  return {task, nn::make_linear(ps, name, dim, task_classes(task), rng)};
}

Tensor pool_video_features(const TokenGrid& final_grid) {
  if (final_grid.grid.volume() < 1) throw std::invalid_argument("pool_video_features: empty grid");
  return nn::mean_axis(final_grid.grid_tokens(), 1);
}

Tensor BoxHead::operator()(const Tensor& pooled, const Tensor& box_feature) const {
  if (pooled.rank() != 2 || pooled.dim(1) != video_dim)
    throw std::invalid_argument("box head: expected pooled [M, " + std::to_string(video_dim) + "], got " +
                                nn::shape_str(pooled.shape()));
  if (box_dim == 0) return linear(pooled);
  if (box_feature.rank() != 2 || box_feature.dim(1) != box_dim || box_feature.dim(0) != pooled.dim(0))
    throw std::invalid_argument("box head: expected box features [" + std::to_string(pooled.dim(0)) + ", " +
                                std::to_string(box_dim) + "], got " + nn::shape_str(box_feature.shape()));
  return linear(nn::concat({pooled, box_feature}, 1));
}

BoxHead make_box_head(nn::ParamStore& ps, const std::string& name, int64_t video_dim, int64_t box_dim, Task task,
                      std::mt19937_64& rng) {
  if (is_frame_task(task)) throw std::invalid_argument(std::string("box head: not a box task: ") + task_name(task));
  if (box_dim < 1) throw std::invalid_argument("box head: box feature length must be positive");
  return {task, video_dim, box_dim, nn::make_linear(ps, name, video_dim + box_dim, task_classes(task), rng)};
}

BoxHead make_box_head_ablation(nn::ParamStore& ps, const std::string& name, int64_t video_dim, Task task,
                               std::mt19937_64& rng) {
  if (is_frame_task(task)) throw std::invalid_argument(std::string("box head: not a box task: ") + task_name(task));
  return {task, video_dim, 0, nn::make_linear(ps, name, video_dim, task_classes(task), rng)};
}

}  // namespace tapir
