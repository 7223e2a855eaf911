#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "support/fault_injection.hpp"
#include "tapir/errors.hpp"
#include "tapir/synthetic.hpp"

using namespace tapir;
namespace fs = std::filesystem;

namespace {

GeneratorConfig tiny_config() {
  GeneratorConfig c;
  c.n_videos = 4;
  c.frames_per_video = 40;
  c.image_height = c.image_width = 32;
  c.keyframe_stride_sparse = 5;
  c.segment_min_frames = 8;
  c.segment_max_frames = 16;
  c.seed = 11;
  return c;
}

double box_iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("scripts are deterministic in (config, seed)") {
  const GeneratorConfig c = tiny_config();
  CHECK(to_json(script_procedure(c, 5)).dump() == to_json(script_procedure(c, 5)).dump());
  CHECK(to_json(script_procedure(c, 5)).dump() != to_json(script_procedure(c, 6)).dump());
}

TEST_CASE("segments tile the video and respect the partonomy") {
  const GeneratorConfig c = tiny_config();
  const Taxonomy tax = Taxonomy::standard();
  for (uint64_t seed = 0; seed < 20; ++seed) {
    const SceneScript s = script_procedure(c, seed);
    int64_t cursor = 0;
    for (const auto& seg : s.segments) {
      CHECK(seg.start_frame == cursor);
      CHECK(seg.end_frame > seg.start_frame);
      CHECK(tax.step_in_phase(seg.phase_id, seg.step_id));
      CHECK(!seg.tracks.empty());
      cursor = seg.end_frame;
    }
    CHECK(cursor == c.frames_per_video);
    for (int64_t f = 0; f < c.frames_per_video; ++f) {
      const auto boxes = s.pixel_boxes_at(f);
      for (size_t a = 0; a < boxes.size(); ++a)
        for (size_t b = a + 1; b < boxes.size(); ++b) CHECK_FALSE(boxes[a].intersects(boxes[b]));
      for (const auto& inst : s.instances_at(f)) {
        CHECK(inst.box.valid());
        CHECK(inst.action_ids.size() >= 1);
        CHECK(inst.action_ids.size() <= 3);
      }
    }
  }
}

TEST_CASE("degenerate prior labels every segment Idle") {
  GeneratorConfig c = tiny_config();
  c.phase_prior.assign(kNumPhases, 0.0);
  c.phase_prior[0] = 1.0;
  c.step_prior.assign(kNumSteps, 0.0);
  c.step_prior[0] = 1.0;
  const SceneScript s = script_procedure(c, 3);
  for (const auto& seg : s.segments) {
    CHECK(seg.phase_id == 0);
    CHECK(seg.step_id == 0);
    CHECK_FALSE(seg.target.has_value());
  }
}

TEST_CASE("phase histogram of 10000 segments tracks the prior") {
  GeneratorConfig c = tiny_config();
  c.frames_per_video = 10000;
  c.segment_min_frames = c.segment_max_frames = 1;
  c.max_instruments = 1;
  c.phase_prior = {0.02, 0.2, 0.05, 0.13, 0.1, 0.05, 0.15, 0.05, 0.1, 0.1, 0.05};
  const SceneScript s = script_procedure(c, 99);
  REQUIRE(s.segments.size() == 10000);
  std::vector<double> hist(kNumPhases, 0.0);
  for (const auto& seg : s.segments) hist[static_cast<size_t>(seg.phase_id)] += 1.0 / 10000;
  double tv = 0;
  for (int p = 0; p < kNumPhases; ++p) tv += 0.5 * std::abs(hist[static_cast<size_t>(p)] - c.phase_prior[static_cast<size_t>(p)]);
  CHECK(tv <= 0.05);
}

TEST_CASE("70 s videos with a 35 s sparse stride have two box keyframes") {
  for (int fps : {1, 2, 5}) {
    GeneratorConfig c = tiny_config();
    c.fps = fps;
    c.frames_per_video = 70 * fps;
    c.keyframe_stride_sparse = 0;
    c.segment_min_frames = c.segment_max_frames = 0;
    const DatasetIndex d = build_dataset_index(c);
    for (const auto& v : d.videos) {
      int boxes = 0, dense = 0;
      for (const auto& kf : d.keyframes)
        if (kf.video_id == v.video_id) {
          boxes += kf.has_box_annotations;
          ++dense;
        }
      CHECK(boxes == 2);
      CHECK(dense == 70);
    }
  }
}

TEST_CASE("generated datasets validate and foldable 4/4") {
  GeneratorConfig c = tiny_config();
  c.n_videos = 8;
  for (uint64_t seed : {0u, 1u, 2u}) {
    c.seed = seed;
    const DatasetIndex d = build_dataset_index(c);
    CHECK(d.videos.size() == 8);
    CHECK(validate_dataset(d).empty());
    const FoldSplit f = build_folds(d, default_fold_assignment(d));
    CHECK(f.folds[0].size() == 4);
    CHECK(f.folds[1].size() == 4);
  }
}

TEST_CASE("fault injection yields exactly the injected violations") {
  GeneratorConfig c = tiny_config();
  for (int n : {1, 5, 17}) {
    DatasetIndex d = build_dataset_index(c);
    const auto faults = testing::inject_faults(d, n, static_cast<uint64_t>(n));
    REQUIRE(static_cast<int>(faults.size()) == n);
    const auto report = validate_dataset(d);
    CHECK(static_cast<int>(report.size()) == n);
    std::multiset<std::string> want, got;
    for (const auto& f : faults) want.insert(f.rule);
    for (const auto& v : report) got.insert(v.rule);
    CHECK(want == got);
  }
}

TEST_CASE("annotated boxes match the rendered instrument pixels") {
  GeneratorConfig c = tiny_config();
  std::vector<SceneScript> scripts;
  const DatasetIndex d = build_dataset_index(c, &scripts);
  int checked = 0;
  for (const auto& kf : d.keyframes) {
    if (!kf.has_box_annotations) continue;
    const int v = std::stoi(kf.video_id.substr(6));
    const Image img = render_frame(scripts[static_cast<size_t>(v)], kf.frame_index);
    for (const auto& inst : kf.instances) {
      const auto col = instrument_color(inst.instrument_id);
      int x1 = img.width, y1 = img.height, x2 = -1, y2 = -1;
      for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
          if (std::equal(col.begin(), col.end(), img.at(y, x))) {
            x1 = std::min(x1, x), y1 = std::min(y1, y), x2 = std::max(x2, x), y2 = std::max(y2, y);
          }
      REQUIRE(x2 >= 0);
      const BoundingBox measured{static_cast<double>(x1) / img.width, static_cast<double>(y1) / img.height,
                                 static_cast<double>(x2 + 1) / img.width, static_cast<double>(y2 + 1) / img.height};
      CHECK(box_iou(measured, inst.box) >= 0.95);
      CHECK(std::abs(measured.x1 - inst.box.x1) * img.width <= 1.0);
      CHECK(std::abs(measured.y2 - inst.box.y2) * img.height <= 1.0);
      ++checked;
    }
  }
  CHECK(checked > 20);
}

TEST_CASE("1-NN on mean box colour recognises instruments") {
  GeneratorConfig c = tiny_config();
  c.n_videos = 8;
  std::vector<SceneScript> scripts;
  const DatasetIndex d = build_dataset_index(c, &scripts);
  struct Sample {
    std::array<double, 3> color;
    int label;
    bool train;
  };
  std::vector<Sample> samples;
  for (const auto& kf : d.keyframes) {
    if (!kf.has_box_annotations) continue;
    const int v = std::stoi(kf.video_id.substr(6));
    const Image img = render_frame(scripts[static_cast<size_t>(v)], kf.frame_index);
    for (const auto& inst : kf.instances) {
      std::array<double, 3> m{0, 0, 0};
      int n = 0;
      for (int y = static_cast<int>(std::lround(inst.box.y1 * img.height)); y < std::lround(inst.box.y2 * img.height); ++y)
        for (int x = static_cast<int>(std::lround(inst.box.x1 * img.width)); x < std::lround(inst.box.x2 * img.width); ++x, ++n)
          for (int ch = 0; ch < 3; ++ch) m[static_cast<size_t>(ch)] += img.at(y, x)[ch];
      for (auto& x : m) x /= n;
      samples.push_back({m, inst.instrument_id, v < 4});
    }
  }
  int correct = 0, total = 0;
  for (const auto& q : samples) {
    if (q.train) continue;
    double best = 1e300;
    int label = -1;
    for (const auto& r : samples) {
      if (!r.train) continue;
      double dist = 0;
      for (int ch = 0; ch < 3; ++ch) dist += std::pow(q.color[static_cast<size_t>(ch)] - r.color[static_cast<size_t>(ch)], 2);
      if (dist < best) best = dist, label = r.label;
    }
    correct += label == q.label;
    ++total;
  }
  REQUIRE(total > 20);
  CHECK(static_cast<double>(correct) / total >= 0.9);
}

TEST_CASE("rendering twice gives byte-identical outputs; bad roots fail") {
  GeneratorConfig c = tiny_config();
  c.n_videos = 2;
  c.frames_per_video = 12;
  const fs::path base = fs::temp_directory_path() / "tapir_test_synthetic";
  fs::remove_all(base);
  render_dataset(c, (base / "a").string(), 1);
  render_dataset(c, (base / "b").string(), 2);
  CHECK(read_file(base / "a" / "manifest.json") == read_file(base / "b" / "manifest.json"));
  CHECK(read_file(base / "a" / "annotations.json") == read_file(base / "b" / "annotations.json"));
  CHECK(dataset_matches_manifest(c, (base / "a").string()));
  CHECK(load_dataset((base / "a" / "annotations.json").string()).keyframes.size() == 24);
  const Image img = read_png((base / "a" / "videos" / "video_01" / "7.png").string());
  CHECK(img.height == 32);
  CHECK(img.width == 32);

  c.seed += 1;
  CHECK_FALSE(dataset_matches_manifest(c, (base / "a").string()));

  { std::ofstream(base / "plain_file") << "x"; }
  CHECK_THROWS_AS(render_dataset(c, (base / "plain_file" / "out").string(), 1), std::runtime_error);
  fs::remove_all(base);
}

TEST_CASE("config json round trip and validation") {
  GeneratorConfig c = tiny_config();
  c.phase_prior.assign(kNumPhases, 1.0 / kNumPhases);
  const GeneratorConfig back = generator_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK_THROWS_AS(generator_config_from_json({{"bogus", 1}}), ValidationError);
  c.phase_prior[0] = 0.5;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  GeneratorConfig z = tiny_config();
  z.fps = 0;
  CHECK_THROWS_AS(z.validate(), ValidationError);
}
