#include "tapir/annotation.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "tapir/errors.hpp"

namespace tapir {

using nlohmann::json;

Taxonomy Taxonomy::standard() {
  Taxonomy t;
  t.phases = {"Idle",
              "Left pelvic lymphadenectomy",
              "Right pelvic lymphadenectomy",
              "Retzius space development",
              "Dorsal venous complex ligation",
              "Bladder neck transection",
              "Seminal vesicle dissection",
              "Posterior plane development",
              "Prostatic pedicle control",
              "Urethral division",
              "Vesicourethral anastomosis"};
  t.steps = {"Idle",
             "Left iliac vessel exposure",
             "Left lymph node packet removal",
             "Right iliac vessel exposure",
             "Right lymph node packet removal",
             "Peritoneal incision",
             "Prevesical fat clearing",
             "Endopelvic fascia incision",
             "Venous complex suturing",
             "Anterior bladder neck opening",
             "Posterior bladder neck division",
             "Vas deferens division",
             "Seminal vesicle release",
             "Denonvilliers fascia incision",
             "Rectal plane development",
             "Left pedicle clipping",
             "Right pedicle clipping",
             "Apical dissection",
             "Urethral transection",
             "Running anastomosis suture"};
  t.instruments = {"Bipolar forceps",    "Prograsp forceps",   "Large needle driver", "Monopolar curved scissors",
                   "Suction instrument", "Clip applier",       "Laparoscopic grasper"};
  t.actions = {"Still", "Travel horizontal", "Travel vertical", "Cauterize", "Close", "Cut", "Grasp", "Hold",
               "Open",  "Pull",              "Push",            "Release",   "Suction", "Staple", "Retract",
               "Touch target"};
  t.phase_to_steps.assign(kNumPhases, {});
  t.phase_to_steps[0] = {0};
  int step = 1;
  for (int p = 1; p < kNumPhases; ++p) {
    const int n = p < kNumPhases - 1 ? 2 : 1;
    for (int k = 0; k < n; ++k) t.phase_to_steps[static_cast<size_t>(p)].insert(step++);
  }
  t.idle_phase_id = 0;
  t.idle_step_id = 0;
  return t;
}

bool Taxonomy::step_in_phase(int phase_id, int step_id) const {
  if (phase_id < 0 || phase_id >= static_cast<int>(phase_to_steps.size())) return false;
  return phase_to_steps[static_cast<size_t>(phase_id)].count(step_id) != 0;
}

int Taxonomy::parent_phase(int step_id) const {
  for (size_t p = 0; p < phase_to_steps.size(); ++p)
    if (phase_to_steps[p].count(step_id)) return static_cast<int>(p);
  return -1;
}

int Taxonomy::sibling_index(int phase_id, int step_id) const {
  if (!step_in_phase(phase_id, step_id)) return -1;
  const auto& s = phase_to_steps[static_cast<size_t>(phase_id)];
  return static_cast<int>(std::distance(s.begin(), s.find(step_id)));
}

bool BoundingBox::valid() const { return 0.0 <= x1 && x1 < x2 && x2 <= 1.0 && 0.0 <= y1 && y1 < y2 && y2 <= 1.0; }

CenterBox to_center(const BoundingBox& b) {
  return {(b.x1 + b.x2) / 2, (b.y1 + b.y2) / 2, b.x2 - b.x1, b.y2 - b.y1};
}

BoundingBox to_corners(const CenterBox& c) {
  return {c.cx - c.w / 2, c.cy - c.h / 2, c.cx + c.w / 2, c.cy + c.h / 2};
}

const VideoInfo& DatasetIndex::video(const std::string& id) const {
  for (const auto& v : videos)
    if (v.video_id == id) return v;
  throw ValidationError("unknown video " + id);
}

namespace {

void taxonomy_violations(const Taxonomy& t, ValidationReport& out) {
  auto add = [&](const std::string& detail) { out.push_back({"", -1, rules::kTaxonomy, detail}); };
  auto check_size = [&](const char* what, size_t got, size_t want) {
    if (got != want) add(std::string(what) + ": " + std::to_string(got) + " categories, expected " + std::to_string(want));
  };
  check_size("phases", t.phases.size(), kNumPhases);
  check_size("steps", t.steps.size(), kNumSteps);
  check_size("instruments", t.instruments.size(), kNumInstruments);
  check_size("actions", t.actions.size(), kNumActions);
  check_size("phase_to_steps", t.phase_to_steps.size(), t.phases.size());
  std::vector<bool> covered(t.steps.size(), false);
  for (const auto& children : t.phase_to_steps)
    for (int s : children) {
      if (s < 0 || s >= static_cast<int>(t.steps.size()))
        add("phase_to_steps lists unknown step " + std::to_string(s));
      else
        covered[static_cast<size_t>(s)] = true;
    }
  for (size_t s = 0; s < covered.size(); ++s)
    if (!covered[s]) add("step " + std::to_string(s) + " belongs to no phase");
  if (t.idle_phase_id < 0 || t.idle_phase_id >= static_cast<int>(t.phases.size())) add("idle_phase_id out of range");
  if (t.idle_step_id < 0 || t.idle_step_id >= static_cast<int>(t.steps.size())) add("idle_step_id out of range");
}

}  // namespace

ValidationReport validate_dataset(const DatasetIndex& index) {
  ValidationReport out;
  const Taxonomy& tax = index.taxonomy;
  taxonomy_violations(tax, out);

  std::map<std::string, int64_t> frames;
  for (const auto& v : index.videos) {
    if (frames.count(v.video_id)) {
      out.push_back({v.video_id, -1, rules::kDuplicateVideo, "video listed more than once"});
      continue;
    }
    if (v.frame_count < 1 || v.frames_per_second < 1)
      out.push_back({v.video_id, -1, rules::kVideoFrames,
                     "frame_count " + std::to_string(v.frame_count) + ", fps " + std::to_string(v.frames_per_second)});
    frames[v.video_id] = v.frame_count;
  }

  const int n_phases = static_cast<int>(tax.phases.size()), n_steps = static_cast<int>(tax.steps.size());
  const int n_instr = static_cast<int>(tax.instruments.size()), n_actions = static_cast<int>(tax.actions.size());
  std::set<std::pair<std::string, int64_t>> seen;
  for (const auto& kf : index.keyframes) {
    auto add = [&](const char* rule, const std::string& detail) { out.push_back({kf.video_id, kf.frame_index, rule, detail}); };
    auto it = frames.find(kf.video_id);
    if (it == frames.end()) {
      add(rules::kUnknownVideo, "keyframe references an unlisted video");
    } else if (kf.frame_index < 0 || kf.frame_index >= it->second) {
      add(rules::kFrameRange, "frame " + std::to_string(kf.frame_index) + " outside [0, " + std::to_string(it->second) + ")");
    }
    if (!seen.insert({kf.video_id, kf.frame_index}).second) add(rules::kDuplicateKeyframe, "keyframe annotated twice");

    const bool phase_ok = kf.phase_id >= 0 && kf.phase_id < n_phases;
    const bool step_ok = kf.step_id >= 0 && kf.step_id < n_steps;
    if (!phase_ok) add(rules::kPhaseRange, "phase_id " + std::to_string(kf.phase_id));
    if (!step_ok) add(rules::kStepRange, "step_id " + std::to_string(kf.step_id));
    if (phase_ok && step_ok && !tax.step_in_phase(kf.phase_id, kf.step_id))
      add(rules::kStepNotInPhase,
          "step " + std::to_string(kf.step_id) + " is not a child of phase " + std::to_string(kf.phase_id));
    if (!kf.instances.empty() && !kf.has_box_annotations)
      add(rules::kBoxFlag, std::to_string(kf.instances.size()) + " instances on a frame without box annotations");

    for (size_t i = 0; i < kf.instances.size(); ++i) {
      const auto& inst = kf.instances[i];
      const std::string where = "instance " + std::to_string(i) + ": ";
      if (inst.instrument_id < 0 || inst.instrument_id >= n_instr)
        add(rules::kInstrumentRange, where + "instrument_id " + std::to_string(inst.instrument_id));
      const std::set<int> distinct(inst.action_ids.begin(), inst.action_ids.end());
      if (distinct.size() != inst.action_ids.size() || distinct.empty() ||
          distinct.size() > static_cast<size_t>(kMaxActionsPerInstance))
        add(rules::kActionCardinality, where + std::to_string(inst.action_ids.size()) + " action ids (" +
                                           std::to_string(distinct.size()) + " distinct), expected 1 to 3 distinct");
      const bool actions_ok = std::all_of(distinct.begin(), distinct.end(), [&](int a) { return a >= 0 && a < n_actions; });
      if (!actions_ok) add(rules::kActionRange, where + "action id outside [0, " + std::to_string(n_actions) + ")");
      if (!inst.box.valid()) {
        std::ostringstream os;
        os << where << "box (" << inst.box.x1 << "," << inst.box.y1 << "," << inst.box.x2 << "," << inst.box.y2 << ")";
        add(rules::kBoxBounds, os.str());
      }
    }
  }
  return out;
}

int FoldSplit::fold_of(const std::string& video_id) const {
  for (int f = 0; f < 2; ++f)
    if (std::find(folds[static_cast<size_t>(f)].begin(), folds[static_cast<size_t>(f)].end(), video_id) !=
        folds[static_cast<size_t>(f)].end())
      return f;
  return -1;
}

FoldSplit build_folds(const DatasetIndex& index, const std::map<std::string, int>& assignment) {
  std::set<std::string> known;
  for (const auto& v : index.videos) known.insert(v.video_id);
  for (const auto& [id, fold] : assignment) {
    if (!known.count(id)) throw ValidationError("fold assignment names unknown video " + id);
    if (fold != 0 && fold != 1) throw ValidationError("video " + id + " assigned to fold " + std::to_string(fold));
  }
  FoldSplit split;
  for (const auto& v : index.videos) {
    auto it = assignment.find(v.video_id);
    if (it == assignment.end()) throw ValidationError("video " + v.video_id + " missing from fold assignment");
    if (split.fold_of(v.video_id) >= 0) throw ValidationError("video " + v.video_id + " assigned twice");
    split.folds[static_cast<size_t>(it->second)].push_back(v.video_id);
  }
  for (auto& f : split.folds) std::sort(f.begin(), f.end());
  return split;
}

std::map<std::string, int> default_fold_assignment(const DatasetIndex& index) {
  std::vector<std::string> ids;
  for (const auto& v : index.videos) ids.push_back(v.video_id);
  std::sort(ids.begin(), ids.end());
  std::map<std::string, int> out;
  for (size_t i = 0; i < ids.size(); ++i) out[ids[i]] = i < (ids.size() + 1) / 2 ? 0 : 1;
  return out;
}

std::vector<int64_t> clip_window(const KeyframeAnnotation& keyframe, int64_t frame_count, int T, int stride) {
  if (T < 1 || stride < 1) throw std::invalid_argument("clip_window: T and stride must be >= 1");
  if (frame_count < 1) throw std::invalid_argument("clip_window: empty video");
  std::vector<int64_t> out(static_cast<size_t>(T));
  for (int k = 0; k < T; ++k)
    out[static_cast<size_t>(k)] =
        std::clamp<int64_t>(keyframe.frame_index + static_cast<int64_t>(stride) * (k - T / 2), 0, frame_count - 1);
  return out;
}

// ---- JSON ------------------------------------------------------------------

json to_json(const Taxonomy& t) {
  json p2s = json::array();
  for (const auto& s : t.phase_to_steps) p2s.push_back(std::vector<int>(s.begin(), s.end()));
  return {{"phases", t.phases},
          {"steps", t.steps},
          {"instruments", t.instruments},
          {"actions", t.actions},
          {"phase_to_steps", p2s},
          {"idle_phase_id", t.idle_phase_id},
          {"idle_step_id", t.idle_step_id}};
}

json to_json(const DatasetIndex& index) {
  json videos = json::array();
  for (const auto& v : index.videos)
    videos.push_back({{"video_id", v.video_id}, {"frame_count", v.frame_count}, {"frames_per_second", v.frames_per_second}});
  json keyframes = json::array();
  for (const auto& kf : index.keyframes) {
    json inst = json::array();
    for (const auto& i : kf.instances)
      inst.push_back({{"box", {{"x1", i.box.x1}, {"y1", i.box.y1}, {"x2", i.box.x2}, {"y2", i.box.y2}}},
                      {"instrument_id", i.instrument_id},
                      {"action_ids", i.action_ids}});
    keyframes.push_back({{"video_id", kf.video_id},
                         {"frame_index", kf.frame_index},
                         {"phase_id", kf.phase_id},
                         {"step_id", kf.step_id},
                         {"instances", inst},
                         {"has_box_annotations", kf.has_box_annotations}});
  }
  return {{"schema_version", kSchemaVersion}, {"taxonomy", to_json(index.taxonomy)}, {"videos", videos}, {"keyframes", keyframes}};
}

namespace {

Taxonomy taxonomy_from_json(const json& j) {
  Taxonomy t;
  t.phases = j.at("phases").get<std::vector<std::string>>();
  t.steps = j.at("steps").get<std::vector<std::string>>();
  t.instruments = j.at("instruments").get<std::vector<std::string>>();
  t.actions = j.at("actions").get<std::vector<std::string>>();
  for (const auto& children : j.at("phase_to_steps")) {
    const auto v = children.get<std::vector<int>>();
    t.phase_to_steps.emplace_back(v.begin(), v.end());
  }
  t.idle_phase_id = j.at("idle_phase_id").get<int>();
  t.idle_step_id = j.at("idle_step_id").get<int>();
  return t;
}

KeyframeAnnotation keyframe_from_json(const json& j) {
  KeyframeAnnotation kf;
  kf.video_id = j.at("video_id").get<std::string>();
  kf.frame_index = j.at("frame_index").get<int64_t>();
  kf.phase_id = j.at("phase_id").get<int>();
  kf.step_id = j.at("step_id").get<int>();
  kf.has_box_annotations = j.at("has_box_annotations").get<bool>();
  for (const auto& ij : j.at("instances")) {
    InstrumentInstance inst;
    const auto& b = ij.at("box");
    inst.box = {b.at("x1").get<double>(), b.at("y1").get<double>(), b.at("x2").get<double>(), b.at("y2").get<double>()};
    inst.instrument_id = ij.at("instrument_id").get<int>();
    inst.action_ids = ij.at("action_ids").get<std::vector<int>>();
    kf.instances.push_back(std::move(inst));
  }
  return kf;
}

}  // namespace

ParsedDataset parse_dataset(const json& doc) {
  if (!doc.is_object()) throw ValidationError("annotation document must be a JSON object");
  if (!doc.contains("schema_version") || !doc["schema_version"].is_string())
    throw ValidationError("annotation document lacks schema_version");
  if (doc["schema_version"].get<std::string>() != kSchemaVersion)
    throw ValidationError("unsupported schema_version " + doc["schema_version"].get<std::string>() + ", expected " +
                          kSchemaVersion);
  for (const char* key : {"taxonomy", "videos", "keyframes"})
    if (!doc.contains(key)) throw ValidationError(std::string("annotation document lacks '") + key + "'");
  if (!doc["videos"].is_array() || !doc["keyframes"].is_array())
    throw ValidationError("'videos' and 'keyframes' must be arrays");

  ParsedDataset out;
  try {
    out.index.taxonomy = taxonomy_from_json(doc["taxonomy"]);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed taxonomy: ") + e.what());
  }
  size_t n = 0;
  for (const auto& vj : doc["videos"]) {
    try {
      out.index.videos.push_back({vj.at("video_id").get<std::string>(), vj.at("frame_count").get<int64_t>(),
                                  vj.at("frames_per_second").get<int>()});
    } catch (const json::exception& e) {
      out.malformed.push_back({"", -1, rules::kMalformed, "videos[" + std::to_string(n) + "]: " + e.what()});
    }
    ++n;
  }
  n = 0;
  for (const auto& kj : doc["keyframes"]) {
    try {
      out.index.keyframes.push_back(keyframe_from_json(kj));
    } catch (const json::exception& e) {
      Violation v{"", -1, rules::kMalformed, "keyframes[" + std::to_string(n) + "]: " + e.what()};
      if (kj.is_object() && kj.contains("video_id") && kj["video_id"].is_string()) v.video_id = kj["video_id"];
      if (kj.is_object() && kj.contains("frame_index") && kj["frame_index"].is_number_integer()) v.frame_index = kj["frame_index"];
      out.malformed.push_back(std::move(v));
    }
    ++n;
  }
  return out;
}

ParsedDataset read_dataset_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open annotation file " + path);
  json doc;
  try {
    doc = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ValidationError("annotation file " + path + " is not valid JSON: " + e.what());
  }
  return parse_dataset(doc);
}

ValidationReport validate_annotation_file(const std::string& path) {
  ParsedDataset parsed = read_dataset_file(path);
  ValidationReport report = std::move(parsed.malformed);
  for (auto& v : validate_dataset(parsed.index)) report.push_back(std::move(v));
  return report;
}

DatasetIndex load_dataset(const std::string& path) {
  ParsedDataset parsed = read_dataset_file(path);
  ValidationReport report = std::move(parsed.malformed);
  for (auto& v : validate_dataset(parsed.index)) report.push_back(std::move(v));
  if (!report.empty()) {
    std::ostringstream os;
    os << path << ": " << report.size() << " schema violation(s)";
    for (size_t i = 0; i < std::min<size_t>(report.size(), 10); ++i) os << "\n  " << format_violation(report[i]);
    throw ValidationError(os.str());
  }
  return std::move(parsed.index);
}

void save_dataset(const DatasetIndex& index, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << to_json(index).dump(1) << '\n';
}

std::string format_violation(const Violation& v) {
  std::ostringstream os;
  os << "[" << v.rule << "]";
  if (!v.video_id.empty()) os << " " << v.video_id;
  if (v.frame_index >= 0) os << "@" << v.frame_index;
  if (!v.detail.empty()) os << ": " << v.detail;
  return os.str();
}

}  // namespace tapir
