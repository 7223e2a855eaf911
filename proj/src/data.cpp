#include "tapir/data.hpp"

#include <filesystem>

#include "tapir/errors.hpp"

namespace tapir {

FrameSource directory_source(const std::string& root) {
  return [root](const std::string& video_id, int64_t frame) {
    const auto path = std::filesystem::path(root) / "videos" / video_id / (std::to_string(frame) + ".png");
    if (!std::filesystem::exists(path)) throw ValidationError("missing frame file " + path.string());
    return read_png(path.string());
  };
}

FrameSource script_source(std::map<std::string, SceneScript> scripts) {
  return [scripts = std::move(scripts)](const std::string& video_id, int64_t frame) {
    auto it = scripts.find(video_id);
    if (it == scripts.end()) throw ValidationError("no script for video " + video_id);
    return render_frame(it->second, frame);
  };
}

FrameStore::FrameStore(FrameSource source, const DatasetIndex& index) : source_(std::move(source)) {
  for (const auto& v : index.videos) frame_counts_[v.video_id] = v.frame_count;
}

const std::vector<double>& FrameStore::frame(const std::string& video_id, int64_t frame) {
  std::lock_guard<std::mutex> lock(mu_);
  const auto key = std::make_pair(video_id, frame);
  if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  auto fc = frame_counts_.find(video_id);
  if (fc == frame_counts_.end()) throw ValidationError("unknown video " + video_id);
  if (frame < 0 || frame >= fc->second)
    throw ValidationError("frame " + std::to_string(frame) + " outside video " + video_id + " (" +
                          std::to_string(fc->second) + " frames)");
  const Image img = source_(video_id, frame);
  if (height_ == 0) {
    height_ = img.height;
    width_ = img.width;
  } else if (img.height != height_ || img.width != width_) {
    throw ValidationError("frame " + video_id + ":" + std::to_string(frame) + " is " + std::to_string(img.height) +
                          "x" + std::to_string(img.width) + ", expected " + std::to_string(height_) + "x" +
                          std::to_string(width_));
  }
  std::vector<double> px;
  append_normalized(img, px);
  return cache_.emplace(key, std::move(px)).first->second;
}

nn::Tensor FrameStore::images(const std::vector<const KeyframeAnnotation*>& keyframes) {
  nn::Buffer data;
  for (const auto* kf : keyframes) {
    const auto& px = frame(kf->video_id, kf->frame_index);
    data.insert(data.end(), px.begin(), px.end());
  }
  return nn::Tensor::from({static_cast<int64_t>(keyframes.size()), height_, width_, 3}, std::move(data));
}

nn::Tensor FrameStore::clips(const std::vector<const KeyframeAnnotation*>& keyframes, int T, int stride) {
  nn::Buffer data;
  for (const auto* kf : keyframes) {
    auto fc = frame_counts_.find(kf->video_id);
    if (fc == frame_counts_.end()) throw ValidationError("unknown video " + kf->video_id);
    for (int64_t f : clip_window(*kf, fc->second, T, stride)) {
      const auto& px = frame(kf->video_id, f);
      data.insert(data.end(), px.begin(), px.end());
    }
  }
  return nn::Tensor::from({static_cast<int64_t>(keyframes.size()), T, height_, width_, 3}, std::move(data));
}

}  // namespace tapir
