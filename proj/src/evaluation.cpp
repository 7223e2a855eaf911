#include "tapir/evaluation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "tapir/errors.hpp"

namespace tapir {

using json = nlohmann::json;

namespace {

using FrameKey = std::pair<std::string, int64_t>;

std::vector<size_t> rank_order(const std::vector<double>& scores) {
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  return order;
}

void finish(EvalReport& r) {
  double sum = 0;
  r.classes_evaluated = 0;
  for (const auto& c : r.per_class)
    if (c.ap) {
      sum += *c.ap;
      ++r.classes_evaluated;
    }
  r.map = r.classes_evaluated ? sum / r.classes_evaluated : 0.0;
}

json box_json(const BoundingBox& b) { return {{"x1", b.x1}, {"y1", b.y1}, {"x2", b.x2}, {"y2", b.y2}}; }

}  // namespace

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

std::optional<double> average_precision(const std::vector<double>& scores, const std::vector<bool>& relevant,
                                        int64_t total_positives) {
  if (scores.size() != relevant.size()) throw std::invalid_argument("average_precision: size mismatch");
  if (total_positives < 0) total_positives = std::count(relevant.begin(), relevant.end(), true);
  if (total_positives == 0) return std::nullopt;
  // long double so short hand cases round like the exact fraction (5/6, not 5/6 - 1ulp)
  long double sum = 0;
  int64_t hits = 0, rank = 0;
  for (size_t i : rank_order(scores)) {
    ++rank;
    if (relevant[i]) sum += static_cast<long double>(++hits) / static_cast<long double>(rank);
  }
  return static_cast<double>(sum / static_cast<long double>(total_positives));
}

EvalReport frame_map(const std::vector<FramePrediction>& preds, const std::vector<KeyframeAnnotation>& keyframes,
                     const std::string& task) {
  if (task != "phase" && task != "step") throw std::invalid_argument("frame_map: task must be phase or step");
  const int classes = task == "phase" ? kNumPhases : kNumSteps;
  std::map<FrameKey, const FramePrediction*> lookup;
  for (const auto& p : preds) {
    if (static_cast<int>(p.scores.size()) != classes)
      throw ValidationError("frame prediction for " + p.video_id + ":" + std::to_string(p.frame_index) + " has " +
                            std::to_string(p.scores.size()) + " scores, expected " + std::to_string(classes));
    lookup[{p.video_id, p.frame_index}] = &p;
  }
  std::vector<const FramePrediction*> row;
  std::vector<std::string> missing;
  for (const auto& kf : keyframes) {
    auto it = lookup.find({kf.video_id, kf.frame_index});
    if (it == lookup.end()) missing.push_back(kf.video_id + ":" + std::to_string(kf.frame_index));
    row.push_back(it == lookup.end() ? nullptr : it->second);
  }
  if (!missing.empty()) {
    std::string msg = "missing frame predictions for " + std::to_string(missing.size()) + " keyframe(s):";
    for (size_t i = 0; i < std::min<size_t>(missing.size(), 10); ++i) msg += " " + missing[i];
    if (missing.size() > 10) msg += " ...";
    throw ValidationError(msg);
  }
  EvalReport r;
  r.task = task;
  for (int c = 0; c < classes; ++c) {
    std::vector<double> scores;
    std::vector<bool> rel;
    for (size_t i = 0; i < keyframes.size(); ++i) {
      scores.push_back(row[i]->scores[static_cast<size_t>(c)]);
      rel.push_back((task == "phase" ? keyframes[i].phase_id : keyframes[i].step_id) == c);
    }
    ClassResult cr;
    cr.class_id = c;
    cr.ground_truth = std::count(rel.begin(), rel.end(), true);
    cr.ap = average_precision(scores, rel);
    // top-1 bookkeeping for the counts
    for (size_t i = 0; i < keyframes.size(); ++i) {
      const auto& s = row[i]->scores;
      const bool predicted = std::max_element(s.begin(), s.end()) - s.begin() == c;
      if (predicted && rel[i]) ++cr.true_positives;
      else if (predicted) ++cr.false_positives;
      else if (rel[i]) ++cr.missed;
    }
    r.per_class.push_back(cr);
  }
  finish(r);
  return r;
}

EvalReport detection_map(const std::vector<DetectionPrediction>& preds,
                         const std::vector<KeyframeAnnotation>& keyframes, LabelMode mode, double iou_threshold) {
  const int classes = mode == LabelMode::kInstrument ? kNumInstruments : kNumActions;
  // ground truth boxes per (frame, class)
  std::map<FrameKey, std::vector<std::vector<BoundingBox>>> gt;
  for (const auto& kf : keyframes) {
    auto& per_class = gt[{kf.video_id, kf.frame_index}];
    per_class.resize(static_cast<size_t>(classes));
    for (const auto& inst : kf.instances) {
      if (mode == LabelMode::kInstrument) {
        per_class[static_cast<size_t>(inst.instrument_id)].push_back(inst.box);
      } else {
        for (int a : inst.action_ids) per_class[static_cast<size_t>(a)].push_back(inst.box);
      }
    }
  }
  for (const auto& p : preds)
    if (static_cast<int>(p.scores.size()) != classes)
      throw ValidationError("detection prediction for " + p.video_id + ":" + std::to_string(p.frame_index) +
                            " has " + std::to_string(p.scores.size()) + " scores, expected " +
                            std::to_string(classes));

  EvalReport r;
  r.task = mode == LabelMode::kInstrument ? "instrument" : "action";
  for (int c = 0; c < classes; ++c) {
    ClassResult cr;
    cr.class_id = c;
    for (const auto& [_, per_class] : gt) cr.ground_truth += static_cast<int64_t>(per_class[static_cast<size_t>(c)].size());
    std::vector<double> scores;
    for (const auto& p : preds) scores.push_back(p.scores[static_cast<size_t>(c)]);
    std::map<FrameKey, std::vector<bool>> used;
    std::vector<double> ranked;
    std::vector<bool> tp;
    for (size_t i : rank_order(scores)) {
      const auto& p = preds[i];
      const FrameKey key{p.video_id, p.frame_index};
      bool hit = false;
      auto g = gt.find(key);
      if (g != gt.end()) {
        const auto& boxes = g->second[static_cast<size_t>(c)];
        auto& u = used[key];
        u.resize(boxes.size(), false);
        int best = -1;
        double best_iou = -1;
        for (size_t k = 0; k < boxes.size(); ++k) {
          if (u[k]) continue;
          const double v = iou(p.box, boxes[k]);
          if (v > best_iou) {
            best_iou = v;
            best = static_cast<int>(k);
          }
        }
        if (best >= 0 && best_iou >= iou_threshold) {
          u[static_cast<size_t>(best)] = true;
          hit = true;
        }
      }
      ranked.push_back(scores[i]);
      tp.push_back(hit);
      hit ? ++cr.true_positives : ++cr.false_positives;
    }
    cr.missed = cr.ground_truth - cr.true_positives;
    if (cr.ground_truth > 0) cr.ap = ranked.empty() ? 0.0 : *average_precision(ranked, tp, cr.ground_truth);
    r.per_class.push_back(cr);
  }
  finish(r);
  return r;
}

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd m;
  if (values.empty()) return m;
  for (double v : values) m.mean += v;
  m.mean /= static_cast<double>(values.size());
  double var = 0;
  for (double v : values) var += (v - m.mean) * (v - m.mean);
  m.std = std::sqrt(var / static_cast<double>(values.size()));
  return m;
}

TaskSummary summarize_folds(const std::string& task, std::vector<EvalReport> folds) {
  TaskSummary s;
  s.task = task;
  std::vector<double> maps;
  for (const auto& f : folds) maps.push_back(f.map);
  s.map = mean_std(maps);
  s.folds = std::move(folds);
  return s;
}

json to_json(const EvalReport& r) {
  json classes = json::array();
  for (const auto& c : r.per_class)
    classes.push_back({{"class_id", c.class_id},
                       {"ap", c.ap ? json(*c.ap) : json(nullptr)},
                       {"ground_truth", c.ground_truth},
                       {"true_positives", c.true_positives},
                       {"false_positives", c.false_positives},
                       {"missed", c.missed}});
  return {{"task", r.task}, {"fold", r.fold}, {"map", r.map}, {"classes_evaluated", r.classes_evaluated},
          {"per_class", classes}};
}

json to_json(const TaskSummary& s) {
  json folds = json::array();
  for (const auto& f : s.folds) folds.push_back(to_json(f));
  return {{"task", s.task}, {"map_mean", s.map.mean}, {"map_std", s.map.std}, {"folds", folds}};
}

std::string format_table(const std::string& method, const std::vector<TaskSummary>& tasks) {
  auto title = [](std::string t) {
    t[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(t[0])));
    return t + "s";
  };
  std::vector<std::string> head{"Method"}, cells{method};
  for (const auto& t : tasks) {
    head.push_back(title(t.task));
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f \xC2\xB1 %.2f", 100.0 * t.map.mean, 100.0 * t.map.std);
    cells.push_back(buf);
  }
  std::vector<size_t> width;
  for (size_t i = 0; i < head.size(); ++i) {
    // the plus-minus sign is two bytes, one column
    const size_t cw = cells[i].size() - (cells[i].find("\xC2\xB1") != std::string::npos ? 1 : 0);
    width.push_back(std::max(head[i].size(), cw));
  }
  std::ostringstream os;
  auto row = [&](const std::vector<std::string>& r) {
    for (size_t i = 0; i < r.size(); ++i) {
      const size_t cw = r[i].size() - (r[i].find("\xC2\xB1") != std::string::npos ? 1 : 0);
      os << (i ? " | " : "") << r[i] << std::string(width[i] - cw, ' ');
    }
    os << '\n';
  };
  row(head);
  for (size_t i = 0; i < width.size(); ++i) os << (i ? "-+-" : "") << std::string(width[i], '-');
  os << '\n';
  row(cells);
  return os.str();
}

std::string format_csv(const std::vector<TaskSummary>& tasks) {
  std::ostringstream os;
  os << "task,fold,map\n";
  char buf[64];
  for (const auto& t : tasks) {
    for (const auto& f : t.folds) {
      std::snprintf(buf, sizeof buf, "%.6f", f.map);
      os << t.task << ',' << f.fold << ',' << buf << '\n';
    }
    std::snprintf(buf, sizeof buf, "%.6f", t.map.mean);
    os << t.task << ",mean," << buf << '\n';
    std::snprintf(buf, sizeof buf, "%.6f", t.map.std);
    os << t.task << ",std," << buf << '\n';
  }
  return os.str();
}

json to_json(const std::vector<FramePrediction>& preds) {
  json out = json::array();
  for (const auto& p : preds)
    out.push_back({{"video_id", p.video_id}, {"frame_index", p.frame_index}, {"scores", p.scores}});
  return out;
}

json to_json(const std::vector<DetectionPrediction>& preds) {
  json out = json::array();
  for (const auto& p : preds)
    out.push_back({{"video_id", p.video_id},
                   {"frame_index", p.frame_index},
                   {"box", box_json(p.box)},
                   {"class_scores", p.scores},
                   {"confidence", p.scores.empty() ? 0.0 : *std::max_element(p.scores.begin(), p.scores.end())}});
  return out;
}

std::vector<FramePrediction> frame_predictions_from_json(const json& j) {
  std::vector<FramePrediction> out;
  try {
    for (const auto& r : j)
      out.push_back({r.at("video_id").get<std::string>(), r.at("frame_index").get<int64_t>(),
                     r.at("scores").get<std::vector<double>>()});
  } catch (const json::exception& e) {
    throw ValidationError(std::string("frame predictions: ") + e.what());
  }
  return out;
}

std::vector<DetectionPrediction> detection_predictions_from_json(const json& j) {
  std::vector<DetectionPrediction> out;
  try {
    for (const auto& r : j) {
      DetectionPrediction p;
      p.video_id = r.at("video_id").get<std::string>();
      p.frame_index = r.at("frame_index").get<int64_t>();
      const auto& b = r.at("box");
      p.box = {b.at("x1").get<double>(), b.at("y1").get<double>(), b.at("x2").get<double>(), b.at("y2").get<double>()};
      p.scores = r.at("class_scores").get<std::vector<double>>();
      out.push_back(std::move(p));
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("detection predictions: ") + e.what());
  }
  return out;
}

}  // namespace tapir
