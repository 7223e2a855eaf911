#include "tapir/synthetic.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>

#include "tapir/errors.hpp"

namespace tapir {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Library-independent sampling helpers so scripts are identical across
// standard library implementations.
double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

int uniform_int(std::mt19937_64& rng, int lo, int hi) {  // inclusive
  return lo + static_cast<int>(rng() % static_cast<uint64_t>(hi - lo + 1));
}

// Index drawn proportionally to weights; -1 if all weights are zero.
int categorical(std::mt19937_64& rng, const std::vector<double>& w) {
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  if (total <= 0) return -1;
  double u = uniform01(rng) * total;
  int last = -1;
  for (size_t i = 0; i < w.size(); ++i) {
    if (w[i] <= 0) continue;
    last = static_cast<int>(i);
    if (u < w[i]) return last;
    u -= w[i];
  }
  return last;
}

std::vector<double> prior_or_uniform(const std::vector<double>& p, int n) {
  return p.empty() ? std::vector<double>(static_cast<size_t>(n), 1.0 / n) : p;
}

uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::array<uint8_t, 3> hsv(double h, double s, double v) {
  const double hh = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(hh);
  const double f = hh - i, p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double r = v, g = t, b = p;
  switch (i) {
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    case 5: r = v, g = p, b = q; break;
    default: break;
  }
  auto c = [](double x) { return static_cast<uint8_t>(std::lround(std::clamp(x, 0.0, 1.0) * 255.0)); };
  return {c(r), c(g), c(b)};
}

// Reflects a coordinate into [0, span].
double bounce(double p, double span) {
  if (span <= 0) return 0;
  double m = std::fmod(p, 2 * span);
  if (m < 0) m += 2 * span;
  return m <= span ? m : 2 * span - m;
}

bool inside_shape(int instrument_id, int px, int py, const PixelBox& b) {
  const int w = b.x2 - b.x1, h = b.y2 - b.y1;
  const double u = 2.0 * (px - b.x1 + 0.5) / w - 1.0;  // [-1, 1] across the box
  const double v = 2.0 * (py - b.y1 + 0.5) / h - 1.0;
  const double sx = 2.0 / w, sy = 2.0 / h;  // one pixel in u, v units
  switch (instrument_id) {
    case 0: return true;                                   // filled rectangle
    case 1: return u * u + v * v <= 1.0;                   // ellipse
    case 2: return std::abs(u) <= (v + 1.0) / 2.0 + sx / 2;  // triangle, apex up
    case 3: return std::abs(u) <= 1.0 / 3 + sx / 2 || std::abs(v) <= 1.0 / 3 + sy / 2;  // cross
    case 4: {                                              // ring
      const double r = u * u + v * v;
      return r <= 1.0 && r >= 0.3;
    }
    case 5: return std::abs(u) + std::abs(v) <= 1.0 + sx / 2 + sy / 2;  // diamond
    default: {                                             // hollow frame
      const int t = std::max(1, std::min(w, h) / 5);
      return px - b.x1 < t || b.x2 - 1 - px < t || py - b.y1 < t || b.y2 - 1 - py < t;
    }
  }
}

const std::array<uint8_t, 3> kTargetColor{214, 206, 188};

void check_prior(const std::vector<double>& p, size_t n, const char* name) {
  if (p.empty()) return;
  if (p.size() != n)
    throw ValidationError(std::string(name) + " has " + std::to_string(p.size()) + " entries, expected " + std::to_string(n));
  double s = 0;
  for (double x : p) {
    if (!(x >= 0)) throw ValidationError(std::string(name) + " has a negative entry");
    s += x;
  }
  if (std::abs(s - 1.0) > 1e-6) throw ValidationError(std::string(name) + " sums to " + std::to_string(s) + ", expected 1");
}

int square_side(int height, int width, double scale) {
  return std::max(2, static_cast<int>(std::lround(scale * std::min(height, width))));
}

}  // namespace

void GeneratorConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ValidationError("generator config: " + msg);
  };
  need(n_videos >= 1, "n_videos must be >= 1");
  need(frames_per_video >= 1, "frames_per_video must be >= 1");
  need(fps >= 1, "fps must be >= 1");
  need(image_height >= 8 && image_width >= 8, "image size must be at least 8x8");
  need(keyframe_stride_dense >= 0 && keyframe_stride_sparse >= 0, "keyframe strides must be >= 1 (0 selects the default)");
  need(segment_min_frames >= 0 && segment_max_frames >= 0, "segment lengths must be >= 1 (0 selects the default)");
  need(min_segment() <= max_segment(), "segment_min_frames exceeds segment_max_frames");
  need(max_instruments >= 1 && max_instruments <= kNumInstruments, "max_instruments must lie in [1, 7]");
  need(instrument_scale > 0 && instrument_scale <= 0.5, "instrument_scale must lie in (0, 0.5]");
  need(speed_min >= 0 && speed_min <= speed_max, "need 0 <= speed_min <= speed_max");
  const int side = square_side(image_height, image_width, instrument_scale);
  need(static_cast<int>(std::lround(1.5 * side)) <= std::min(image_height, image_width), "instruments do not fit the image");
  check_prior(phase_prior, kNumPhases, "phase_prior");
  check_prior(step_prior, kNumSteps, "step_prior");
  check_prior(instrument_prior, kNumInstruments, "instrument_prior");
  check_prior(action_prior, kNumActions, "action_prior");
}

json to_json(const GeneratorConfig& c) {
  return {{"n_videos", c.n_videos},
          {"frames_per_video", c.frames_per_video},
          {"fps", c.fps},
          {"image_height", c.image_height},
          {"image_width", c.image_width},
          {"keyframe_stride_dense", c.keyframe_stride_dense},
          {"keyframe_stride_sparse", c.keyframe_stride_sparse},
          {"segment_min_frames", c.segment_min_frames},
          {"segment_max_frames", c.segment_max_frames},
          {"max_instruments", c.max_instruments},
          {"instrument_scale", c.instrument_scale},
          {"speed_min", c.speed_min},
          {"speed_max", c.speed_max},
          {"phase_prior", c.phase_prior},
          {"step_prior", c.step_prior},
          {"instrument_prior", c.instrument_prior},
          {"action_prior", c.action_prior},
          {"seed", c.seed}};
}

GeneratorConfig generator_config_from_json(const json& j) {
  GeneratorConfig c;
  if (!j.is_object()) throw ValidationError("generator config must be a JSON object");
  const json defaults = to_json(c);
  for (const auto& [key, _] : j.items())
    if (!defaults.contains(key)) throw ValidationError("generator config: unknown key '" + key + "'");
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("n_videos", c.n_videos);
    get("frames_per_video", c.frames_per_video);
    get("fps", c.fps);
    get("image_height", c.image_height);
    get("image_width", c.image_width);
    get("keyframe_stride_dense", c.keyframe_stride_dense);
    get("keyframe_stride_sparse", c.keyframe_stride_sparse);
    get("segment_min_frames", c.segment_min_frames);
    get("segment_max_frames", c.segment_max_frames);
    get("max_instruments", c.max_instruments);
    get("instrument_scale", c.instrument_scale);
    get("speed_min", c.speed_min);
    get("speed_max", c.speed_max);
    get("phase_prior", c.phase_prior);
    get("step_prior", c.step_prior);
    get("instrument_prior", c.instrument_prior);
    get("action_prior", c.action_prior);
    get("seed", c.seed);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("generator config: ") + e.what());
  }
  return c;
}

PixelBox InstrumentTrack::box_at(int64_t frames_since_start, int height, int width) const {
  double x = x0, y = y0;
  const double travel = speed * static_cast<double>(frames_since_start);
  if (motion == kHorizontal) x = bounce(x0 + travel, width - box_w);
  if (motion == kVertical) y = bounce(y0 + travel, height - box_h);
  const int ix = std::clamp(static_cast<int>(std::lround(x)), 0, width - box_w);
  const int iy = std::clamp(static_cast<int>(std::lround(y)), 0, height - box_h);
  return {ix, iy, ix + box_w, iy + box_h};
}

const Segment& SceneScript::segment_at(int64_t frame) const {
  for (const auto& s : segments)
    if (frame >= s.start_frame && frame < s.end_frame) return s;
  throw std::out_of_range("frame " + std::to_string(frame) + " outside the scripted video");
}

std::vector<PixelBox> SceneScript::pixel_boxes_at(int64_t frame) const {
  const Segment& s = segment_at(frame);
  std::vector<PixelBox> out;
  for (const auto& t : s.tracks) out.push_back(t.box_at(frame - s.start_frame, height, width));
  return out;
}

std::vector<InstrumentInstance> SceneScript::instances_at(int64_t frame) const {
  const Segment& s = segment_at(frame);
  std::vector<InstrumentInstance> out;
  for (const auto& t : s.tracks) {
    const PixelBox b = t.box_at(frame - s.start_frame, height, width);
    InstrumentInstance inst;
    inst.box = {static_cast<double>(b.x1) / width, static_cast<double>(b.y1) / height,
                static_cast<double>(b.x2) / width, static_cast<double>(b.y2) / height};
    inst.instrument_id = t.instrument_id;
    inst.action_ids = derive_actions(t.instrument_id, t.motion, s.target && b.intersects(*s.target));
    out.push_back(std::move(inst));
  }
  return out;
}

json to_json(const SceneScript& s) {
  json segs = json::array();
  for (const auto& g : s.segments) {
    json tracks = json::array();
    for (const auto& t : g.tracks)
      tracks.push_back({{"instrument_id", t.instrument_id},
                        {"motion", t.motion},
                        {"box_w", t.box_w},
                        {"box_h", t.box_h},
                        {"x0", t.x0},
                        {"y0", t.y0},
                        {"speed", t.speed}});
    json seg = {{"phase_id", g.phase_id},
                {"step_id", g.step_id},
                {"start_frame", g.start_frame},
                {"end_frame", g.end_frame},
                {"tracks", tracks}};
    if (g.target) seg["target"] = {g.target->x1, g.target->y1, g.target->x2, g.target->y2};
    segs.push_back(seg);
  }
  return {{"seed", s.seed}, {"height", s.height}, {"width", s.width}, {"segments", segs}};
}

uint64_t video_seed(uint64_t dataset_seed, int video_index) {
  return splitmix64(splitmix64(dataset_seed) + static_cast<uint64_t>(video_index));
}

std::string video_name(int video_index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "video_%02d", video_index);
  return buf;
}

std::vector<int> derive_actions(int instrument_id, int motion, bool touches_target) {
  std::vector<int> a{motion};
  if (motion != kStill) a.push_back(3 + (instrument_id * 2 + motion - 1) % 12);
  if (touches_target) a.push_back(kNumActions - 1);
  return a;
}

std::array<uint8_t, 3> instrument_color(int instrument_id) {
  return hsv(static_cast<double>(instrument_id) / kNumInstruments, 0.95, 0.95);
}

namespace {

std::vector<InstrumentTrack> sample_tracks(const GeneratorConfig& cfg, std::mt19937_64& rng, bool idle,
                                           int64_t length) {
  const int H = cfg.image_height, W = cfg.image_width;
  const int side = square_side(H, W, cfg.instrument_scale);
  const int long_side = static_cast<int>(std::lround(1.5 * side));
  const int short_side = std::max(2, static_cast<int>(std::lround(0.75 * side)));
  const auto instr_prior = prior_or_uniform(cfg.instrument_prior, kNumInstruments);
  std::vector<double> motion_w(3, 1.0);
  if (!cfg.action_prior.empty()) {
    motion_w.assign(cfg.action_prior.begin(), cfg.action_prior.begin() + 3);
    if (std::accumulate(motion_w.begin(), motion_w.end(), 0.0) <= 0) motion_w.assign(3, 1.0);
  }
  const int available = static_cast<int>(std::count_if(instr_prior.begin(), instr_prior.end(), [](double p) { return p > 0; }));
  const int wanted = std::min(uniform_int(rng, 1, cfg.max_instruments), available);

  for (int n = wanted; n >= 1; --n) {
    for (int attempt = 0; attempt < 64; ++attempt) {
      std::vector<InstrumentTrack> tracks;
      std::vector<double> w = instr_prior;
      for (int i = 0; i < n; ++i) {
        InstrumentTrack t;
        t.instrument_id = categorical(rng, w);
        w[static_cast<size_t>(t.instrument_id)] = 0;
        t.motion = idle ? kStill : categorical(rng, motion_w);
        t.box_w = t.motion == kHorizontal ? long_side : t.motion == kVertical ? short_side : side;
        t.box_h = t.motion == kHorizontal ? short_side : t.motion == kVertical ? long_side : side;
        t.x0 = uniform(rng, 0, W - t.box_w);
        t.y0 = uniform(rng, 0, H - t.box_h);
        if (t.motion != kStill) {
          t.speed = uniform(rng, cfg.speed_min, cfg.speed_max);
          if (rng() & 1) t.speed = -t.speed;
        }
        tracks.push_back(t);
      }
      bool clear = true;
      for (int64_t f = 0; f < length && clear; ++f)
        for (size_t a = 0; a < tracks.size() && clear; ++a)
          for (size_t b = a + 1; b < tracks.size() && clear; ++b)
            clear = !tracks[a].box_at(f, H, W).intersects(tracks[b].box_at(f, H, W));
      if (clear) return tracks;
    }
  }
  return {};  // unreachable: a single track never collides
}

}  // namespace

SceneScript script_procedure(const GeneratorConfig& cfg, uint64_t seed) {
  cfg.validate();
  const Taxonomy tax = Taxonomy::standard();
  std::mt19937_64 rng(seed);
  SceneScript script;
  script.seed = seed;
  script.height = cfg.image_height;
  script.width = cfg.image_width;
  const auto phase_prior = prior_or_uniform(cfg.phase_prior, kNumPhases);
  const auto step_prior = prior_or_uniform(cfg.step_prior, kNumSteps);
  const int min_side = std::min(cfg.image_height, cfg.image_width);
  const int half = std::max(1, static_cast<int>(std::lround(0.14 * min_side)));

  for (int64_t start = 0; start < cfg.frames_per_video;) {
    Segment seg;
    seg.start_frame = start;
    seg.end_frame = std::min<int64_t>(cfg.frames_per_video, start + uniform_int(rng, cfg.min_segment(), cfg.max_segment()));
    seg.phase_id = categorical(rng, phase_prior);
    const auto& children = tax.phase_to_steps[static_cast<size_t>(seg.phase_id)];
    std::vector<double> w(static_cast<size_t>(kNumSteps), 0.0);
    for (int s : children) w[static_cast<size_t>(s)] = step_prior[static_cast<size_t>(s)];
    if (std::accumulate(w.begin(), w.end(), 0.0) <= 0)
      for (int s : children) w[static_cast<size_t>(s)] = 1.0;
    seg.step_id = categorical(rng, w);
    const bool idle = seg.phase_id == tax.idle_phase_id;
    if (!idle) {
      const int sib = tax.sibling_index(seg.phase_id, seg.step_id);
      const double fx = sib == 0 ? 0.3 : 0.7, fy = sib == 0 ? 0.3 : 0.7;
      const int cx = static_cast<int>(std::lround(fx * cfg.image_width));
      const int cy = static_cast<int>(std::lround(fy * cfg.image_height));
      seg.target = PixelBox{cx - half, cy - half, cx + half, cy + half};
    }
    seg.tracks = sample_tracks(cfg, rng, idle, seg.end_frame - seg.start_frame);
    start = seg.end_frame;
    script.segments.push_back(std::move(seg));
  }
  return script;
}

Image render_frame(const SceneScript& script, int64_t frame) {
  const Segment& seg = script.segment_at(frame);
  const int H = script.height, W = script.width;
  Image img(H, W);
  const auto tint = hsv(static_cast<double>(seg.phase_id) / kNumPhases, 0.35, 0.6);
  std::mt19937_64 noise(splitmix64(script.seed ^ 0x7E47'7E47ULL));  // static per-video texture
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      uint8_t* p = img.at(y, x);
      for (int c = 0; c < 3; ++c) p[c] = static_cast<uint8_t>(std::clamp<int>(tint[static_cast<size_t>(c)] + static_cast<int>(noise() % 21) - 10, 0, 255));
    }
  if (seg.target) {
    const PixelBox& t = *seg.target;
    for (int y = std::max(0, t.y1); y < std::min(H, t.y2); ++y)
      for (int x = std::max(0, t.x1); x < std::min(W, t.x2); ++x) std::copy(kTargetColor.begin(), kTargetColor.end(), img.at(y, x));
  }
  for (const auto& track : seg.tracks) {
    const PixelBox b = track.box_at(frame - seg.start_frame, H, W);
    const auto color = instrument_color(track.instrument_id);
    for (int y = b.y1; y < b.y2; ++y)
      for (int x = b.x1; x < b.x2; ++x)
        if (inside_shape(track.instrument_id, x, y, b)) std::copy(color.begin(), color.end(), img.at(y, x));
  }
  return img;
}

std::vector<KeyframeAnnotation> script_keyframes(const GeneratorConfig& cfg, const SceneScript& script,
                                                 const std::string& video_id) {
  std::map<int64_t, KeyframeAnnotation> frames;
  auto base = [&](int64_t f) {
    KeyframeAnnotation kf;
    kf.video_id = video_id;
    kf.frame_index = f;
    const Segment& s = script.segment_at(f);
    kf.phase_id = s.phase_id;
    kf.step_id = s.step_id;
    return kf;
  };
  for (int64_t f = 0; f < cfg.frames_per_video; f += cfg.dense_stride()) frames.emplace(f, base(f));
  // Sparse keyframes sit mid-stride, snapped onto the dense grid.
  const int sparse = cfg.sparse_stride(), dense = cfg.dense_stride();
  for (int64_t f = sparse / 2 / dense * dense; f < cfg.frames_per_video; f += sparse) {
    auto it = frames.try_emplace(f, base(f)).first;
    it->second.has_box_annotations = true;
    it->second.instances = script.instances_at(f);
  }
  std::vector<KeyframeAnnotation> out;
  for (auto& [_, kf] : frames) out.push_back(std::move(kf));
  return out;
}

DatasetIndex build_dataset_index(const GeneratorConfig& cfg, std::vector<SceneScript>* scripts) {
  cfg.validate();
  DatasetIndex index;
  index.taxonomy = Taxonomy::standard();
  if (scripts) scripts->clear();
  for (int v = 0; v < cfg.n_videos; ++v) {
    const std::string id = video_name(v);
    SceneScript s = script_procedure(cfg, video_seed(cfg.seed, v));
    index.videos.push_back({id, cfg.frames_per_video, cfg.fps});
    for (auto& kf : script_keyframes(cfg, s, id)) index.keyframes.push_back(std::move(kf));
    if (scripts) scripts->push_back(std::move(s));
  }
  return index;
}

int worker_threads_from_env() {
  if (const char* env = std::getenv("TAPIR_BENCH_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return 1;
}

RenderedDataset render_dataset(const GeneratorConfig& cfg, const std::string& root, int threads) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(fs::path(root) / "videos", ec);
  if (ec) throw std::runtime_error("cannot create output directory " + root + ": " + ec.message());

  std::vector<SceneScript> scripts;
  RenderedDataset out;
  out.root = root;
  out.index = build_dataset_index(cfg, &scripts);

  std::map<std::string, std::string> checksums;
  std::mutex mu;
  std::atomic<int> next{0};
  std::exception_ptr failure;
  auto work = [&] {
    for (int v = next++; v < cfg.n_videos; v = next++) {
      try {
        const std::string id = video_name(v);
        const fs::path dir = fs::path(root) / "videos" / id;
        std::error_code dir_ec;
        fs::create_directories(dir, dir_ec);
        if (dir_ec) throw std::runtime_error("cannot create " + dir.string() + ": " + dir_ec.message());
        std::map<std::string, std::string> local;
        for (int64_t f = 0; f < cfg.frames_per_video; ++f) {
          const std::string rel = "videos/" + id + "/" + std::to_string(f) + ".png";
          const fs::path path = fs::path(root) / rel;
          write_png(path.string(), render_frame(scripts[static_cast<size_t>(v)], f));
          local[rel] = sha256_file(path.string());
        }
        std::lock_guard<std::mutex> lock(mu);
        checksums.merge(local);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int n_threads = std::clamp(threads > 0 ? threads : worker_threads_from_env(), 1, cfg.n_videos);
  std::vector<std::thread> pool;
  for (int i = 1; i < n_threads; ++i) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  const std::string ann = (fs::path(root) / "annotations.json").string();
  save_dataset(out.index, ann);
  checksums["annotations.json"] = sha256_file(ann);
  const json manifest = {{"config", to_json(cfg)}, {"files", checksums}};
  std::ofstream os(fs::path(root) / "manifest.json", std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write manifest in " + root);
  os << manifest.dump(1) << '\n';
  return out;
}

bool dataset_matches_manifest(const GeneratorConfig& cfg, const std::string& root) {
  std::ifstream is(fs::path(root) / "manifest.json");
  if (!is) return false;
  json manifest;
  try {
    manifest = json::parse(is);
    if (manifest.at("config") != to_json(cfg)) return false;
    for (const auto& [rel, sum] : manifest.at("files").items()) {
      const fs::path p = fs::path(root) / rel;
      if (!fs::exists(p) || sha256_file(p.string()) != sum.get<std::string>()) return false;
    }
  } catch (const std::exception&) {
    return false;
  }
  return true;
}

}  // namespace tapir
