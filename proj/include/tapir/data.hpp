#pragma once

// Frame access for training and evaluation: decoded frames are normalised
// once and cached, then stacked into image and clip batches.

#include <functional>
#include <map>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include "tapir/annotation.hpp"
#include "tapir/image_io.hpp"
#include "tapir/nn/tensor.hpp"
#include "tapir/synthetic.hpp"

namespace tapir {

using FrameSource = std::function<Image(const std::string& video_id, int64_t frame)>;

// Reads <root>/videos/<video_id>/<frame>.png.
FrameSource directory_source(const std::string& root);
// Renders frames from scene scripts keyed by video id.
FrameSource script_source(std::map<std::string, SceneScript> scripts);

class FrameStore {
 public:
  FrameStore(FrameSource source, const DatasetIndex& index);

  // Normalised pixels of one frame. Throws ValidationError for unknown
  // videos, out-of-range frames or frames whose size differs from the first.
  const std::vector<double>& frame(const std::string& video_id, int64_t frame);

  // [B, H, W, 3] keyframe images.
  nn::Tensor images(const std::vector<const KeyframeAnnotation*>& keyframes);
  // [B, T, H, W, 3] clips centred on the keyframes.
  nn::Tensor clips(const std::vector<const KeyframeAnnotation*>& keyframes, int T, int stride);

  int height() const { return height_; }
  int width() const { return width_; }

 private:
  FrameSource source_;
  std::map<std::string, int64_t> frame_counts_;
  std::map<std::pair<std::string, int64_t>, std::vector<double>> cache_;
  std::mutex mu_;
  int height_ = 0, width_ = 0;
};

}  // namespace tapir
