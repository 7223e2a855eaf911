#include "tapir/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "tapir/errors.hpp"

namespace tapir {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// The identity of a run: the parts of the experiment that can change its
// result. Paths, the task list and checkpoint retention are left out, so
// runs can be shared between experiments that differ only elsewhere.
json run_echo(const ExperimentConfig& cfg, const std::string& task, int fold, const std::vector<std::string>& videos) {
  const json full = to_json(cfg);
  std::vector<std::string> keys{"seed", "generator"};
  if (task == "detector") {
    keys.insert(keys.end(), {"detector", "detector_optim"});
  } else if (is_frame_task(parse_task(task))) {
    keys.insert(keys.end(), {"encoder", "clip_stride", "optim"});
  } else {
    for (const auto& [k, v] : full.items())
      if (k != "seed" && k != "generator" && k != "dataset_dir" && k != "output_dir" && k != "tasks" &&
          k != "keep_checkpoints")
        keys.push_back(k);
  }
  json e = json::object();
  for (const auto& k : keys) e[k] = full.at(k);
  return {{"experiment", e}, {"task", task}, {"fold", fold}, {"training_videos", videos}};
}

uint64_t mix(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

uint64_t run_seed(uint64_t seed, const std::string& what, int fold) {
  uint64_t h = mix(seed);
  for (char c : what) h = mix(h ^ static_cast<uint8_t>(c));
  return mix(h + static_cast<uint64_t>(fold));
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << text;
    if (!os) throw std::runtime_error("cannot write " + path.string());
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return json::parse(is);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<double> softmax(const double* x, size_t n) {
  std::vector<double> p(x, x + n);
  const double mx = *std::max_element(p.begin(), p.end());
  double z = 0;
  for (auto& v : p) z += (v = std::exp(v - mx));
  for (auto& v : p) v /= z;
  return p;
}

std::vector<double> sigmoid(const double* x, size_t n) {
  std::vector<double> p(n);
  for (size_t i = 0; i < n; ++i) p[i] = 1.0 / (1.0 + std::exp(-x[i]));
  return p;
}

// ---- the epoch loop shared by every run --------------------------------------

struct LoopSpec {
  fs::path dir;
  json echo;
  std::string task;
  int fold = 0;
  OptimConfig optim;
  uint64_t seed = 0;
  size_t samples = 0;
  std::function<nn::Tensor(const std::vector<size_t>&)> batch_loss;
  nn::ParamStore* params = nullptr;
  NamedParams trainable;
  int keep = 2;
  std::vector<std::string> videos;
  std::ostream* log = nullptr;
  bool may_train = true;
};

std::unique_ptr<Optimizer> make_optimizer(const OptimConfig& c, NamedParams p) {
  if (c.optimizer == "adamw") return std::make_unique<AdamW>(std::move(p), c.weight_decay);
  return std::make_unique<Sgd>(std::move(p), c.momentum, c.weight_decay);
}

int checkpoint_epoch(const fs::path& p) {
  const std::string n = p.filename().string();
  if (n.rfind("epoch_", 0) != 0) return -1;
  try {
    size_t used = 0;
    const int k = std::stoi(n.substr(6), &used);
    return used == n.size() - 6 ? k : -1;
  } catch (const std::exception&) {
    return -1;
  }
}

std::vector<int> saved_epochs(const fs::path& dir) {
  std::vector<int> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (int k = checkpoint_epoch(e.path()); k > 0) out.push_back(k);
  std::sort(out.begin(), out.end());
  return out;
}

void write_metrics(const fs::path& dir, const std::vector<double>& losses, const std::vector<double>& lrs) {
  std::string s = "epoch,loss,lr\n";
  for (size_t e = 0; e < losses.size(); ++e) s += std::to_string(e + 1) + "," + fmt(losses[e]) + "," + fmt(lrs[e]) + "\n";
  write_text(dir / "metrics.csv", s);
}

RunRecord record_from_report(const fs::path& dir, const json& r) {
  RunRecord rec;
  rec.run_dir = dir.string();
  rec.task = r.at("task").get<std::string>();
  rec.fold = r.at("fold").get<int>();
  rec.epoch_losses = r.at("epoch_losses").get<std::vector<double>>();
  rec.epoch_lrs = r.at("epoch_lrs").get<std::vector<double>>();
  rec.checkpoint = (dir / r.at("checkpoint").get<std::string>()).string();
  rec.training_videos = r.at("training_videos").get<std::vector<std::string>>();
  return rec;
}

RunRecord run_training(LoopSpec& spec) {
  if (!spec.may_train && !fs::exists(spec.dir / "final_report.json"))
    throw ValidationError("run " + spec.dir.string() + " has not finished training; train " + spec.task + " fold " +
                          std::to_string(spec.fold) + " first");
  const fs::path ckdir = spec.dir / "checkpoints";
  fs::create_directories(ckdir);
  const fs::path cfg_path = spec.dir / "config.json";
  if (fs::exists(cfg_path) && read_json(cfg_path) != spec.echo)
    throw ValidationError("run directory " + spec.dir.string() + " holds a run with a different config");
  write_text(cfg_path, spec.echo.dump(2) + "\n");

  const fs::path report = spec.dir / "final_report.json";
  if (fs::exists(report)) {
    RunRecord rec = record_from_report(spec.dir, read_json(report));
    nn::load_params(nn::Checkpoint::load(rec.checkpoint), *spec.params);
    return rec;
  }

  auto opt = make_optimizer(spec.optim, spec.trainable);
  std::vector<double> losses, lrs;
  int start = 0;
  if (const auto saved = saved_epochs(ckdir); !saved.empty()) {
    const auto ck = nn::Checkpoint::load((ckdir / ("epoch_" + std::to_string(saved.back()))).string());
    nn::load_params(ck, *spec.params);
    opt->load_state(ck, "optim/");
    losses = ck.meta.at("epoch_losses").get<std::vector<double>>();
    lrs = ck.meta.at("epoch_lrs").get<std::vector<double>>();
    start = saved.back();
    if (spec.log) *spec.log << "  resuming " << spec.dir.string() << " after epoch " << start << "\n";
  }
  if (spec.samples == 0) throw ValidationError("no training samples for " + spec.task + " fold " + std::to_string(spec.fold));

  const int epochs = spec.optim.epochs;
  const size_t bs = static_cast<size_t>(spec.optim.batch_size);
  const size_t iters = (spec.samples + bs - 1) / bs;
  for (int e = start; e < epochs; ++e) {
    std::vector<size_t> order(spec.samples);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix(spec.seed + static_cast<uint64_t>(e)));
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0;
    for (size_t it = 0; it < iters; ++it) {
      const double progress = (static_cast<double>(e) + static_cast<double>(it) / static_cast<double>(iters)) / epochs;
      const double lr = lr_at(progress, spec.optim);
      const std::vector<size_t> batch(order.begin() + static_cast<long>(it * bs),
                                      order.begin() + static_cast<long>(std::min(spec.samples, (it + 1) * bs)));
      opt->zero_grad();
      nn::Tensor loss = spec.batch_loss(batch);
      const double v = loss.item();
      if (!std::isfinite(v))
        throw NumericError("non-finite loss (" + fmt(v) + ") in " + spec.task + " fold " + std::to_string(spec.fold) +
                           " at epoch " + std::to_string(e + 1) + ", step " + std::to_string(it + 1));
      loss.backward();
      if (spec.optim.grad_clip > 0) clip_grad_norm(opt->params(), spec.optim.grad_clip);
      opt->step(lr);
      sum += v;
    }
    losses.push_back(sum / static_cast<double>(iters));
    lrs.push_back(lr_at(static_cast<double>(e) / epochs, spec.optim));
    if (spec.log) *spec.log << "  " << spec.task << " fold " << spec.fold << " epoch " << e + 1 << "/" << epochs
                            << " loss " << losses.back() << "\n";

    nn::Checkpoint ck;
    ck.meta = {{"task", spec.task}, {"fold", spec.fold}, {"epoch", e + 1}, {"epoch_losses", losses}, {"epoch_lrs", lrs}};
    nn::store_params(ck, *spec.params);
    opt->save_state(ck, "optim/");
    const fs::path ck_path = ckdir / ("epoch_" + std::to_string(e + 1));
    ck.save(ck_path.string() + ".tmp");
    fs::rename(ck_path.string() + ".tmp", ck_path);
    write_metrics(spec.dir, losses, lrs);
    if (spec.keep > 0) {
      const auto saved = saved_epochs(ckdir);
      for (size_t i = 0; i + static_cast<size_t>(spec.keep) < saved.size(); ++i)
        fs::remove(ckdir / ("epoch_" + std::to_string(saved[i])));
    }
  }
  if (losses.empty()) throw ValidationError("run " + spec.dir.string() + " configured with zero epochs");

  const std::string final_ck = "checkpoints/epoch_" + std::to_string(epochs);
  const json r = {{"task", spec.task},
                  {"fold", spec.fold},
                  {"epochs", epochs},
                  {"epoch_losses", losses},
                  {"epoch_lrs", lrs},
                  {"checkpoint", final_ck},
                  {"training_videos", spec.videos}};
  write_text(report, r.dump(2) + "\n");
  return record_from_report(spec.dir, r);
}

}  // namespace

// ---- config ----------------------------------------------------------------

void OptimConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("optim config: " + m); };
  if (optimizer != "sgd" && optimizer != "adamw") fail("optimizer must be sgd or adamw, got '" + optimizer + "'");
  if (!(base_lr > 0)) fail("base_lr must be positive");
  if (weight_decay < 0) fail("weight_decay must be non-negative");
  if (momentum < 0 || momentum >= 1) fail("momentum must lie in [0, 1)");
  if (epochs < 1) fail("epochs must be positive");
  if (warmup_epochs < 0 || warmup_epochs >= epochs) fail("warmup_epochs must lie in [0, epochs)");
  if (batch_size < 1) fail("batch_size must be positive");
  if (grad_clip < 0) fail("grad_clip must be non-negative");
}

double lr_at(double progress, const OptimConfig& cfg) {
  progress = std::clamp(progress, 0.0, 1.0);
  const double w = static_cast<double>(cfg.warmup_epochs) / static_cast<double>(cfg.epochs);
  if (progress < w) return cfg.base_lr * (progress / w);
  return cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * (progress - w) / (1.0 - w)));
}

void ExperimentConfig::validate() const {
  generator.validate();
  encoder.validate();
  detector.validate();
  optim.validate();
  detector_optim.validate();
  auto fail = [](const std::string& m) { throw std::invalid_argument("experiment config: " + m); };
  if (encoder.image_height != generator.image_height || encoder.image_width != generator.image_width)
    fail("encoder image size must match the generator's");
  if (detector.image_height != generator.image_height || detector.image_width != generator.image_width)
    fail("detector image size must match the generator's");
  if (detector.num_classes != kNumInstruments) fail("detector must predict the 7 instrument classes");
  if (clip_stride < 1) fail("clip_stride must be positive");
  if (detection_threshold < 0 || detection_threshold > 1) fail("detection_threshold must lie in [0, 1]");
  if (match_iou < 0 || match_iou > 1) fail("match_iou must lie in [0, 1]");
  if (tasks.empty()) fail("no tasks");
  if (keep_checkpoints < 0) fail("keep_checkpoints must be non-negative");
  if (dataset_dir.empty() || output_dir.empty()) fail("dataset_dir and output_dir must be set");
}

json to_json(const OptimConfig& c) {
  return {{"optimizer", c.optimizer},     {"base_lr", c.base_lr},   {"weight_decay", c.weight_decay},
          {"momentum", c.momentum},       {"epochs", c.epochs},     {"warmup_epochs", c.warmup_epochs},
          {"batch_size", c.batch_size},   {"grad_clip", c.grad_clip}};
}

OptimConfig optim_config_from_json(const json& j, OptimConfig c) {
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "optimizer") c.optimizer = v.get<std::string>();
      else if (k == "base_lr") c.base_lr = v.get<double>();
      else if (k == "weight_decay") c.weight_decay = v.get<double>();
      else if (k == "momentum") c.momentum = v.get<double>();
      else if (k == "epochs") c.epochs = v.get<int>();
      else if (k == "warmup_epochs") c.warmup_epochs = v.get<int>();
      else if (k == "batch_size") c.batch_size = v.get<int>();
      else if (k == "grad_clip") c.grad_clip = v.get<double>();
      else throw std::invalid_argument("optim config: unknown key '" + k + "'");
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("optim config: ") + e.what());
  }
  c.validate();
  return c;
}

OptimConfig default_detector_optim() {
  OptimConfig c;
  c.optimizer = "adamw";
  c.base_lr = 2e-3;
  c.weight_decay = 1e-4;
  c.warmup_epochs = 1;
  c.grad_clip = 0.1;
  return c;
}

json to_json(const ExperimentConfig& c) {
  json tasks = json::array();
  for (Task t : c.tasks) tasks.push_back(task_name(t));
  return {{"seed", c.seed},
          {"dataset_dir", c.dataset_dir},
          {"output_dir", c.output_dir},
          {"generator", to_json(c.generator)},
          {"encoder", to_json(c.encoder)},
          {"clip_stride", c.clip_stride},
          {"detector", to_json(c.detector)},
          {"optim", to_json(c.optim)},
          {"detector_optim", to_json(c.detector_optim)},
          {"detection_threshold", c.detection_threshold},
          {"match_iou", c.match_iou},
          {"step_init", c.step_init},
          {"box_features", c.box_features},
          {"tasks", tasks},
          {"keep_checkpoints", c.keep_checkpoints}};
}

ExperimentConfig experiment_config_from_json(const json& j) {
  ExperimentConfig c;
  if (!j.is_object()) throw std::invalid_argument("experiment config: expected a JSON object");
  if (!j.contains("seed")) throw std::invalid_argument("experiment config: \"seed\" is required");
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "seed") c.seed = v.get<uint64_t>();
      else if (k == "dataset_dir") c.dataset_dir = v.get<std::string>();
      else if (k == "output_dir") c.output_dir = v.get<std::string>();
      else if (k == "generator") c.generator = generator_config_from_json(v);
      else if (k == "encoder") c.encoder = encoder_config_from_json(v);
      else if (k == "clip_stride") c.clip_stride = v.get<int>();
      else if (k == "detector") c.detector = detector_config_from_json(v);
      else if (k == "optim") c.optim = optim_config_from_json(v, c.optim);
      else if (k == "detector_optim") c.detector_optim = optim_config_from_json(v, c.detector_optim);
      else if (k == "detection_threshold") c.detection_threshold = v.get<double>();
      else if (k == "match_iou") c.match_iou = v.get<double>();
      else if (k == "step_init") c.step_init = v.get<bool>();
      else if (k == "box_features") c.box_features = v.get<bool>();
      else if (k == "keep_checkpoints") c.keep_checkpoints = v.get<int>();
      else if (k == "tasks") {
        c.tasks.clear();
        for (const auto& t : v) c.tasks.push_back(parse_task(t.get<std::string>()));
      } else {
        throw std::invalid_argument("experiment config: unknown key '" + k + "'");
      }
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("experiment config: ") + e.what());
  } catch (const ValidationError& e) {
    throw std::invalid_argument(e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot read config " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config " + path + ": " + e.what());
  }
  ExperimentConfig c = experiment_config_from_json(j);
  const fs::path base = fs::path(path).parent_path();
  for (std::string* p : {&c.dataset_dir, &c.output_dir})
    if (fs::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
  return c;
}

// ---- models ----------------------------------------------------------------

TaskModel::TaskModel(const ExperimentConfig& cfg, Task task, uint64_t seed) : task_(task) {
  std::mt19937_64 rng(seed);
  encoder_ = std::make_unique<VideoEncoder>(cfg.encoder, params_, "encoder.", rng);
  const int64_t dim = cfg.encoder.output_dim();
  if (is_frame_task(task)) {
    frame_head_ = make_frame_head(params_, "head.frame", dim, task, rng);
  } else if (cfg.box_features) {
    box_head_ = make_box_head(params_, "head.box", dim, cfg.detector.d_model, task, rng);
  } else {
    box_head_ = make_box_head_ablation(params_, "head.box", dim, task, rng);
  }
}

Tensor TaskModel::frame_logits(const Tensor& clips) const {
  if (!frame_head_) throw std::logic_error("frame_logits on a box-task model");
  return (*frame_head_)(encoder_->encode(clips).class_embedding);
}

Tensor TaskModel::box_logits(const Tensor& clips, const std::vector<int64_t>& box_clip,
                             const Tensor& box_features) const {
  if (!box_head_) throw std::logic_error("box_logits on a frame-task model");
  const Tensor pooled = pool_video_features(encoder_->encode(clips).final_grid);
  return (*box_head_)(nn::index_rows(pooled, box_clip), box_features);
}

void transfer_init(const std::string& step_checkpoint, nn::ParamStore& params) {
  const auto ck = nn::Checkpoint::load(step_checkpoint);
  if (ck.meta.contains("task") && ck.meta["task"] != "step")
    throw ValidationError("transfer source " + step_checkpoint + " is a " + ck.meta["task"].get<std::string>() +
                          " checkpoint, expected step");
  try {
    nn::load_params(ck, params, "encoder.");
  } catch (const std::invalid_argument& e) {
    throw ValidationError(std::string("transfer from ") + step_checkpoint + ": " + e.what());
  }
}

std::vector<BoxSample> collect_box_samples(const Detector& detector, FrameStore& store,
                                           const std::vector<const KeyframeAnnotation*>& keyframes,
                                           double match_iou, int batch_size) {
  nn::NoGradGuard guard;
  const auto& c = detector.config();
  std::vector<BoxSample> out;
  for (size_t s = 0; s < keyframes.size(); s += static_cast<size_t>(batch_size)) {
    const std::vector<const KeyframeAnnotation*> batch(
        keyframes.begin() + static_cast<long>(s),
        keyframes.begin() + static_cast<long>(std::min(keyframes.size(), s + static_cast<size_t>(batch_size))));
    const DetectorOutput o = detector.forward(store.images(batch));
    const int64_t N = c.num_queries, K1 = c.num_classes + 1, D = c.d_model;
    for (size_t b = 0; b < batch.size(); ++b) {
      const GroundTruth gt = ground_truth_of(*batch[b]);
      if (gt.classes.empty()) continue;
      const auto& lv = o.logits.back().values();
      const auto& bv = o.boxes.back().values();
      const std::vector<double> lg(lv.begin() + static_cast<long>(b) * N * K1, lv.begin() + static_cast<long>(b + 1) * N * K1);
      const std::vector<double> bx(bv.begin() + static_cast<long>(b) * N * 4, bv.begin() + static_cast<long>(b + 1) * N * 4);
      for (const auto& [g, q] : hungarian_match(lg, bx, static_cast<int>(N), c.num_classes, gt, c.cost)) {
        const double* p = bx.data() + q * 4;
        const auto& inst = batch[b]->instances[static_cast<size_t>(g)];
        if (iou(to_corners({p[0], p[1], p[2], p[3]}), inst.box) < match_iou) continue;
        const double* f = o.features.values().data() + (static_cast<int64_t>(b) * N + q) * D;
        out.push_back({s + b, std::vector<double>(f, f + D), inst.instrument_id, inst.action_ids});
      }
    }
  }
  return out;
}

// ---- pipeline --------------------------------------------------------------

Pipeline::Pipeline(ExperimentConfig cfg, DatasetIndex index, FrameStore& store, std::string output_root,
                   std::ostream* log)
    : cfg_(std::move(cfg)), index_(std::move(index)), store_(store), root_(std::move(output_root)), log_(log) {
  cfg_.validate();
  folds_ = build_folds(index_, default_fold_assignment(index_));
}

void Pipeline::say(const std::string& msg) const {
  if (log_) *log_ << msg << "\n";
}

std::string Pipeline::run_dir(const std::string& task, int fold) const {
  return (fs::path(root_) / ("fold_" + std::to_string(fold)) / task).string();
}

std::vector<const KeyframeAnnotation*> Pipeline::keyframes(const std::vector<std::string>& videos, bool boxes) const {
  const std::set<std::string> wanted(videos.begin(), videos.end());
  std::vector<const KeyframeAnnotation*> out;
  for (const auto& kf : index_.keyframes)
    if (wanted.count(kf.video_id) && (!boxes || kf.has_box_annotations)) out.push_back(&kf);
  return out;
}

RunRecord Pipeline::train_detector(int fold) {
  say("detector fold " + std::to_string(fold));
  nn::ParamStore ps;
  std::mt19937_64 rng(run_seed(cfg_.seed, "detector", fold));
  Detector det(cfg_.detector, ps, "detector.", rng);
  const auto kfs = keyframes(training_videos(fold), true);
  std::vector<GroundTruth> gts;
  for (const auto* kf : kfs) gts.push_back(ground_truth_of(*kf));

  LoopSpec spec;
  spec.dir = run_dir("detector", fold);
  spec.echo = run_echo(cfg_, "detector", fold, training_videos(fold));
  spec.task = "detector";
  spec.fold = fold;
  spec.optim = cfg_.detector_optim;
  spec.seed = run_seed(cfg_.seed, "detector-order", fold);
  spec.samples = kfs.size();
  spec.params = &ps;
  spec.trainable = select_params(ps, {""});
  spec.keep = cfg_.keep_checkpoints;
  spec.videos = training_videos(fold);
  spec.log = log_;
  spec.may_train = train_missing_;
  spec.batch_loss = [&](const std::vector<size_t>& batch) {
    std::vector<const KeyframeAnnotation*> b;
    std::vector<GroundTruth> g;
    for (size_t i : batch) {
      b.push_back(kfs[i]);
      g.push_back(gts[i]);
    }
    return detection_loss(det.forward(store_.images(b)), g, cfg_.detector).total;
  };
  return run_training(spec);
}

std::unique_ptr<Detector> Pipeline::load_detector(int fold, nn::ParamStore& ps) {
  const RunRecord rec = train_detector(fold);
  std::mt19937_64 rng(run_seed(cfg_.seed, "detector", fold));
  auto det = std::make_unique<Detector>(cfg_.detector, ps, "detector.", rng);
  nn::load_params(nn::Checkpoint::load(rec.checkpoint), ps);
  return det;
}

RunRecord Pipeline::train(Task task, int fold) {
  const std::string name = task_name(task);
  auto model = std::make_unique<TaskModel>(cfg_, task, run_seed(cfg_.seed, name, fold));
  LoopSpec spec;
  spec.dir = run_dir(name, fold);
  spec.task = name;
  spec.fold = fold;
  spec.optim = cfg_.optim;
  spec.seed = run_seed(cfg_.seed, name + "-order", fold);
  spec.params = &model->params();
  spec.trainable = select_params(model->params(), {""});
  spec.keep = cfg_.keep_checkpoints;
  spec.videos = training_videos(fold);
  spec.log = log_;
  spec.may_train = train_missing_;
  spec.echo = run_echo(cfg_, name, fold, spec.videos);

  const int T = cfg_.encoder.clip_length, stride = cfg_.clip_stride;
  if (is_frame_task(task)) {
    say(name + " fold " + std::to_string(fold));
    const auto kfs = keyframes(training_videos(fold), false);
    spec.samples = kfs.size();
    spec.batch_loss = [&, task](const std::vector<size_t>& batch) {
      std::vector<const KeyframeAnnotation*> b;
      std::vector<int> labels;
      for (size_t i : batch) {
        b.push_back(kfs[i]);
        labels.push_back(task == Task::kPhase ? kfs[i]->phase_id : kfs[i]->step_id);
      }
      return nn::cross_entropy(model->frame_logits(store_.clips(b, T, stride)), labels);
    };
    return run_training(spec);
  }

  // box tasks: dependencies first
  std::string step_ck;
  if (cfg_.step_init) step_ck = train(Task::kStep, fold).checkpoint;
  nn::ParamStore det_ps;
  const auto det = load_detector(fold, det_ps);
  say(name + " fold " + std::to_string(fold));
  if (!step_ck.empty()) transfer_init(step_ck, model->params());

  const auto kfs = keyframes(training_videos(fold), true);
  const auto samples = collect_box_samples(*det, store_, kfs, cfg_.match_iou);
  // group the samples by keyframe; a keyframe is one training item
  std::vector<size_t> items;
  std::vector<std::vector<size_t>> of_item;
  for (size_t i = 0; i < samples.size(); ++i) {
    if (items.empty() || items.back() != samples[i].keyframe) {
      items.push_back(samples[i].keyframe);
      of_item.emplace_back();
    }
    of_item.back().push_back(i);
  }
  spec.samples = items.size();
  const int64_t D = cfg_.detector.d_model;
  spec.batch_loss = [&, task](const std::vector<size_t>& batch) {
    std::vector<const KeyframeAnnotation*> b;
    std::vector<int64_t> box_clip;
    nn::Buffer feats;
    std::vector<int> classes;
    std::vector<double> multi_hot;
    for (size_t k = 0; k < batch.size(); ++k) {
      b.push_back(kfs[items[batch[k]]]);
      for (size_t si : of_item[batch[k]]) {
        const auto& s = samples[si];
        box_clip.push_back(static_cast<int64_t>(k));
        feats.insert(feats.end(), s.feature.begin(), s.feature.end());
        classes.push_back(s.instrument);
        std::vector<double> h(kNumActions, 0.0);
        for (int a : s.actions) h[static_cast<size_t>(a)] = 1.0;
        multi_hot.insert(multi_hot.end(), h.begin(), h.end());
      }
    }
    const Tensor f = Tensor::from({static_cast<int64_t>(box_clip.size()), D}, std::move(feats));
    const Tensor logits = model->box_logits(store_.clips(b, T, stride), box_clip, f);
    return task == Task::kAction ? nn::bce_with_logits(logits, multi_hot) : nn::cross_entropy(logits, classes);
  };
  spec.echo["step_init"] = cfg_.step_init;
  return run_training(spec);
}

std::unique_ptr<TaskModel> Pipeline::load_model(Task task, int fold) {
  const RunRecord rec = train(task, fold);
  auto model = std::make_unique<TaskModel>(cfg_, task, run_seed(cfg_.seed, task_name(task), fold));
  nn::load_params(nn::Checkpoint::load(rec.checkpoint), model->params());
  return model;
}

EvalReport Pipeline::evaluate(Task task, int fold) {
  const std::string name = task_name(task);
  const RunRecord rec = train(task, fold);
  const auto model = load_model(task, fold);
  const auto videos = held_out_videos(fold);
  const std::set<std::string> trained(rec.training_videos.begin(), rec.training_videos.end());
  const int T = cfg_.encoder.clip_length, stride = cfg_.clip_stride;
  const size_t bs = static_cast<size_t>(cfg_.optim.batch_size);
  nn::NoGradGuard guard;

  EvalReport report;
  json preds_json;
  const auto kfs = keyframes(videos, !is_frame_task(task));
  for (const auto* kf : kfs)
    if (trained.count(kf->video_id)) ++leakage_violations_;

  if (is_frame_task(task)) {
    std::vector<FramePrediction> preds;
    for (size_t s = 0; s < kfs.size(); s += bs) {
      const std::vector<const KeyframeAnnotation*> b(kfs.begin() + static_cast<long>(s),
                                                     kfs.begin() + static_cast<long>(std::min(kfs.size(), s + bs)));
      const Tensor logits = model->frame_logits(store_.clips(b, T, stride));
      const size_t C = static_cast<size_t>(logits.dim(1));
      for (size_t i = 0; i < b.size(); ++i)
        preds.push_back({b[i]->video_id, b[i]->frame_index, softmax(logits.values().data() + i * C, C)});
    }
    std::vector<KeyframeAnnotation> gt;
    for (const auto* kf : kfs) gt.push_back(*kf);
    report = frame_map(preds, gt, name);
    preds_json = to_json(preds);
  } else {
    nn::ParamStore det_ps;
    const auto det = load_detector(fold, det_ps);
    std::vector<DetectionPrediction> preds;
    for (size_t s = 0; s < kfs.size(); s += bs) {
      const std::vector<const KeyframeAnnotation*> b(kfs.begin() + static_cast<long>(s),
                                                     kfs.begin() + static_cast<long>(std::min(kfs.size(), s + bs)));
      const DetectorOutput out = det->forward(store_.images(b));
      std::vector<int64_t> box_clip;
      std::vector<const KeyframeAnnotation*> owner;
      std::vector<BoundingBox> boxes;
      nn::Buffer feats;
      for (size_t i = 0; i < b.size(); ++i)
        for (const auto& d : select_detections(out, static_cast<int>(i), cfg_.detection_threshold)) {
          box_clip.push_back(static_cast<int64_t>(i));
          owner.push_back(b[i]);
          boxes.push_back(d.box);
          feats.insert(feats.end(), d.box_feature.begin(), d.box_feature.end());
        }
      if (box_clip.empty()) continue;
      const Tensor f = Tensor::from({static_cast<int64_t>(box_clip.size()), cfg_.detector.d_model}, std::move(feats));
      const Tensor logits = model->box_logits(store_.clips(b, T, stride), box_clip, f);
      const size_t C = static_cast<size_t>(logits.dim(1));
      for (size_t r = 0; r < box_clip.size(); ++r) {
        const double* row = logits.values().data() + r * C;
        preds.push_back({owner[r]->video_id, owner[r]->frame_index, boxes[r],
                         task == Task::kAction ? sigmoid(row, C) : softmax(row, C)});
      }
    }
    std::vector<KeyframeAnnotation> gt;
    for (const auto* kf : kfs) gt.push_back(*kf);
    report = detection_map(preds, gt, task == Task::kAction ? LabelMode::kAction : LabelMode::kInstrument);
    preds_json = to_json(preds);
  }
  report.fold = fold;
  const fs::path dir = rec.run_dir;
  write_text(dir / "predictions.json", preds_json.dump(1) + "\n");
  write_text(dir / "eval_report.json", to_json(report).dump(2) + "\n");
  return report;
}

EvalReport Pipeline::evaluate_detector(int fold, const std::vector<std::string>& videos, double threshold) {
  nn::ParamStore ps;
  const auto det = load_detector(fold, ps);
  nn::NoGradGuard guard;
  const auto kfs = keyframes(videos, true);
  std::vector<DetectionPrediction> preds;
  const size_t bs = static_cast<size_t>(cfg_.detector_optim.batch_size);
  for (size_t s = 0; s < kfs.size(); s += bs) {
    const std::vector<const KeyframeAnnotation*> b(kfs.begin() + static_cast<long>(s),
                                                   kfs.begin() + static_cast<long>(std::min(kfs.size(), s + bs)));
    const DetectorOutput out = det->forward(store_.images(b));
    for (size_t i = 0; i < b.size(); ++i)
      for (const auto& d : select_detections(out, static_cast<int>(i), threshold))
        preds.push_back({b[i]->video_id, b[i]->frame_index, d.box,
                         std::vector<double>(d.class_scores.begin(), d.class_scores.end())});
  }
  std::vector<KeyframeAnnotation> gt;
  for (const auto* kf : kfs) gt.push_back(*kf);
  EvalReport r = detection_map(preds, gt, LabelMode::kInstrument);
  r.task = "detector";
  r.fold = fold;
  return r;
}

double Pipeline::training_accuracy(Task task, int fold) {
  if (!is_frame_task(task)) throw std::invalid_argument("training_accuracy: frame tasks only");
  const auto model = load_model(task, fold);
  nn::NoGradGuard guard;
  const auto kfs = keyframes(training_videos(fold), false);
  const size_t bs = static_cast<size_t>(cfg_.optim.batch_size);
  size_t correct = 0;
  for (size_t s = 0; s < kfs.size(); s += bs) {
    const std::vector<const KeyframeAnnotation*> b(kfs.begin() + static_cast<long>(s),
                                                   kfs.begin() + static_cast<long>(std::min(kfs.size(), s + bs)));
    const Tensor logits = model->frame_logits(store_.clips(b, cfg_.encoder.clip_length, cfg_.clip_stride));
    const int64_t C = logits.dim(1);
    for (size_t i = 0; i < b.size(); ++i) {
      const double* row = logits.values().data() + static_cast<int64_t>(i) * C;
      const int pred = static_cast<int>(std::max_element(row, row + C) - row);
      correct += pred == (task == Task::kPhase ? b[i]->phase_id : b[i]->step_id);
    }
  }
  return kfs.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(kfs.size());
}

TaskSummary Pipeline::cross_validate(Task task) {
  std::vector<EvalReport> folds;
  for (int f = 0; f < 2; ++f) folds.push_back(evaluate(task, f));
  return summarize_folds(task_name(task), std::move(folds));
}

json Pipeline::reproduce_all() {
  std::vector<TaskSummary> summaries;
  // frame tasks before box tasks so the step encoders exist when needed
  std::vector<Task> order;
  for (Task t : cfg_.tasks)
    if (is_frame_task(t)) order.push_back(t);
  for (Task t : cfg_.tasks)
    if (!is_frame_task(t)) order.push_back(t);
  std::map<Task, TaskSummary> by_task;
  for (Task t : order) by_task[t] = cross_validate(t);
  for (Task t : cfg_.tasks) summaries.push_back(by_task[t]);

  std::vector<EvalReport> det_folds;
  for (int f = 0; f < 2; ++f) det_folds.push_back(evaluate_detector(f, held_out_videos(f), cfg_.detection_threshold));
  const TaskSummary det = summarize_folds("detector", std::move(det_folds));

  json tasks = json::array();
  for (const auto& s : summaries) tasks.push_back(to_json(s));
  const json report = {{"seed", cfg_.seed},
                       {"folds", {folds_.folds[0], folds_.folds[1]}},
                       {"tasks", tasks},
                       {"detector", to_json(det)},
                       {"leakage_violations", leakage_violations_},
                       {"table", format_table("TAPIR (desk scale)", summaries)}};
  fs::create_directories(root_);
  write_text(fs::path(root_) / "final_report.json", report.dump(2) + "\n");
  return report;
}

}  // namespace tapir
