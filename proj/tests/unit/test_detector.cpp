#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "tapir/detector.hpp"
#include "tapir/optim.hpp"
#include "tapir/synthetic.hpp"

using namespace tapir;
using namespace tapir::testing;

namespace {

DetectorConfig small_config() {
  DetectorConfig c;
  c.image_height = c.image_width = 16;
  c.backbone_factors = {4, 2};
  c.backbone_channels = {8, 8};
  c.d_model = 8;
  c.heads = 2;
  c.enc_points = 2;
  c.dec_points = 2;
  c.enc_layers = 1;
  c.dec_layers = 2;
  c.ffn_dim = 16;
  c.num_queries = 5;
  return c;
}

void randomize(nn::ParamStore& ps, std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (const auto& name : ps.names())
    for (auto& x : ps.get(name).values()) x += u(rng);
}

Mat rows_of(const nn::Tensor& t, int64_t b = 0) {
  const int64_t n = t.dim(1), c = t.dim(2);
  return to_mat(t.values(), n, c, b * n * c);
}

// Lexicographically smallest optimal assignment by enumeration.
std::vector<int> brute_force(const std::vector<std::vector<double>>& cost, double& best) {
  const size_t n = cost.size(), m = cost[0].size();
  std::vector<int> cols(m);
  std::iota(cols.begin(), cols.end(), 0);
  best = 1e300;
  std::vector<int> arg;
  // permutations of the columns enumerate every injective row->column map
  // (repeatedly, for n < m); keep the first minimal one in lexicographic order.
  do {
    double t = 0;
    for (size_t i = 0; i < n; ++i) t += cost[i][static_cast<size_t>(cols[i])];
    const std::vector<int> cand(cols.begin(), cols.begin() + static_cast<long>(n));
    if (t < best - 1e-12 || (std::abs(t - best) <= 1e-12 && cand < arg)) {
      best = t;
      arg = cand;
    }
  } while (std::next_permutation(cols.begin(), cols.end()));
  return arg;
}

}  // namespace

TEST_CASE("deformable attention matches the loop oracle for point and box references") {
  std::mt19937_64 rng(3);
  nn::ParamStore ps;
  const std::vector<nn::LevelShape> levels{{4, 5}, {2, 3}};
  const DeformAttnParams p = make_deform_attn(ps, "da", 8, 2, 2, 3, rng);
  randomize(ps, rng, 0.5);
  const int64_t S = 4 * 5 + 2 * 3, Nq = 7;
  const nn::Tensor input = random_tensor({2, S, 8}, rng);
  const nn::Tensor query = random_tensor({2, Nq, 8}, rng);
  for (int rd : {2, 4}) {
    nn::Tensor ref = random_tensor({2, Nq, rd}, rng, 0.05, 0.95);
    std::vector<double> weights;
    const nn::Tensor out = deformable_attention(query, ref, input, levels, p, &weights);
    REQUIRE(out.shape() == nn::Shape{2, Nq, 8});
    for (int64_t b = 0; b < 2; ++b) {
      const Mat expect = naive_deform_attn(rows_of(query, b), rows_of(ref, b), rows_of(input, b), levels, p);
      CHECK(max_abs_diff(expect, out.values(), b * Nq * 8) < 1e-12);
    }
    // weights [B, Nq, heads, L, K]: each head's weights sum to one
    REQUIRE(weights.size() == static_cast<size_t>(2 * Nq * 2 * 2 * 3));
    for (size_t g = 0; g < weights.size() / 6; ++g) {
      double s = 0;
      for (size_t i = 0; i < 6; ++i) s += weights[g * 6 + i];
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("samples outside every level contribute nothing") {
  std::mt19937_64 rng(4);
  nn::ParamStore ps;
  const std::vector<nn::LevelShape> levels{{3, 3}};
  DeformAttnParams p = make_deform_attn(ps, "da", 4, 1, 1, 1, rng);
  for (auto& v : ps.get("da.sampling_offsets.bias").values()) v = 0;
  // reference far outside the map
  const nn::Tensor ref = nn::Tensor::from({1, 1, 2}, {5.0, 5.0});
  const nn::Tensor out = deformable_attention(random_tensor({1, 1, 4}, rng), ref, random_tensor({1, 9, 4}, rng),
                                              levels, p);
  // only the output projection bias survives
  for (int c = 0; c < 4; ++c) CHECK(out.values()[static_cast<size_t>(c)] == doctest::Approx(0.0));
}

TEST_CASE("deformable attention gradients match finite differences") {
  std::mt19937_64 rng(5);
  nn::ParamStore ps;
  const std::vector<nn::LevelShape> levels{{3, 4}, {2, 2}};
  const DeformAttnParams p = make_deform_attn(ps, "da", 4, 2, 2, 2, rng);
  randomize(ps, rng, 0.3);
  const nn::Tensor input = random_tensor({1, 16, 4}, rng, -1, 1, true);
  const nn::Tensor query = random_tensor({1, 3, 4}, rng, -1, 1, true);
  const nn::Tensor ref = random_tensor({1, 3, 4}, rng, 0.2, 0.8, true);
  const nn::Tensor w = random_tensor({1, 3, 4}, rng);
  auto loss = [&] { return nn::sum(nn::mul(deformable_attention(query, ref, input, levels, p), w)); };
  auto groups = param_groups(ps);
  groups.emplace_back("input", input);
  groups.emplace_back("query", query);
  groups.emplace_back("reference", ref);
  for (const auto& e : check_gradients(loss, groups, 1e-5, 0)) {
    INFO(e.name << " rel " << e.rel_error);
    CHECK(e.rel_error < 1e-5);
  }
}

TEST_CASE("box refinement composes through logit space") {
  const nn::Tensor prev = nn::Tensor::from({1, 1, 4}, {0.5, 0.2, 0.9, 0.3});
  const nn::Tensor delta = nn::Tensor::from({1, 1, 4}, {0.0, 1.0, -2.0, 0.5});
  const nn::Tensor next = refine_boxes(prev, delta);
  auto expect = [](double p, double d) { return 1.0 / (1.0 + std::exp(-(std::log(p / (1 - p)) + d))); };
  const double pv[4] = {0.5, 0.2, 0.9, 0.3}, dv[4] = {0.0, 1.0, -2.0, 0.5};
  for (size_t i = 0; i < 4; ++i) CHECK(next.values()[i] == doctest::Approx(expect(pv[i], dv[i])).epsilon(1e-12));
  CHECK(next.values()[0] == doctest::Approx(0.5));
}

TEST_CASE("detector output shapes and ranges") {
  std::mt19937_64 rng(6);
  nn::ParamStore ps;
  const DetectorConfig c = small_config();
  Detector det(c, ps, "det.", rng);
  const nn::Tensor img = random_tensor({3, 16, 16, 3}, rng);
  const DetectorOutput out = det.forward(img);
  REQUIRE(out.logits.size() == 2);
  CHECK(out.logits[1].shape() == nn::Shape{3, 5, 8});
  CHECK(out.boxes[1].shape() == nn::Shape{3, 5, 4});
  CHECK(out.features.shape() == nn::Shape{3, 5, 8});
  for (double v : out.boxes[1].values()) CHECK((v > 0 && v < 1));
  const FeaturePyramid pyr = det.pyramid(img);
  CHECK(pyr.value.shape() == nn::Shape{3, 16 + 4, 8});
  CHECK(pyr.pos.shape() == nn::Shape{20, 8});
  CHECK_THROWS_AS(det.forward(random_tensor({1, 8, 16, 3}, rng)), std::invalid_argument);
  // images in a batch do not interact
  const DetectorOutput solo = det.forward(nn::slice(img, 0, 1, 2));
  CHECK(max_abs_diff(rows_of(solo.logits[1]), out.logits[1].values(), 5 * 8) < 1e-12);
}

TEST_CASE("assignment solver: small examples") {
  CHECK(linear_assignment({{1, 2}, {2, 1}}) == std::vector<int>{0, 1});
  CHECK(linear_assignment({{2, 1}, {1, 2}}) == std::vector<int>{1, 0});
  // all-equal costs: lowest (row, column) order
  CHECK(linear_assignment({{1, 1, 1}, {1, 1, 1}}) == std::vector<int>{0, 1});
  double total = 0;
  CHECK(linear_assignment({{4, 1, 3}, {2, 0, 5}, {3, 2, 2}}, &total) == std::vector<int>{1, 0, 2});
  CHECK(total == doctest::Approx(5.0));
  CHECK(linear_assignment({}).empty());
  CHECK_THROWS_AS(linear_assignment({{1}, {2}}), std::invalid_argument);
}

TEST_CASE("assignment solver agrees with enumeration on random and tied costs") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const size_t n = 1 + rng() % 4, m = n + rng() % 3;
    std::vector<std::vector<double>> cost(n, std::vector<double>(m));
    const bool ties = trial % 2 == 1;
    for (auto& row : cost)
      for (auto& v : row) v = ties ? static_cast<double>(rng() % 3) : std::uniform_real_distribution<double>(-2, 2)(rng);
    double bf = 0, got = 0;
    const auto expect = brute_force(cost, bf);
    const auto cols = linear_assignment(cost, &got);
    INFO("trial " << trial);
    CHECK(cols == expect);
    CHECK(got == doctest::Approx(bf).epsilon(1e-12));
    std::vector<int> sorted = cols;
    std::sort(sorted.begin(), sorted.end());
    CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
  }
}

TEST_CASE("matching cost combines class, L1 and GIoU terms") {
  // two queries, one class + no-object
  const std::vector<double> logits{2.0, 0.0, 0.0, 2.0};
  const std::vector<double> boxes{0.5, 0.5, 0.2, 0.2, 0.3, 0.3, 0.1, 0.1};
  GroundTruth gt{{0}, {{0.5, 0.5, 0.2, 0.2}}};
  const auto c = matching_cost(logits, boxes, 2, 1, gt, {});
  const double p0 = std::exp(2.0) / (std::exp(2.0) + 1.0), p1 = 1.0 / (1.0 + std::exp(2.0));
  CHECK(c[0][0] == doctest::Approx(-2.0 * p0 + 0.0 - 2.0 * 1.0));
  // second box: L1 = 0.2+0.2+0.1+0.1; GIoU of disjoint boxes from the corners
  const double inter = 0, uni = 0.04 + 0.01, hull = (0.6 - 0.25) * (0.6 - 0.25);
  CHECK(c[0][1] == doctest::Approx(-2.0 * p1 + 5.0 * 0.6 - 2.0 * (inter / uni - (hull - uni) / hull)));
  const auto m = hungarian_match(logits, boxes, 2, 1, gt, {});
  REQUIRE(m.size() == 1);
  CHECK(m[0] == std::pair<int, int>{0, 0});
  GroundTruth crowded{{0, 0, 0}, {{0.5, 0.5, 0.1, 0.1}, {0.5, 0.5, 0.1, 0.1}, {0.5, 0.5, 0.1, 0.1}}};
  CHECK_THROWS_AS(hungarian_match(logits, boxes, 2, 1, crowded, {}), std::invalid_argument);
}

TEST_CASE("detection loss recomposes from its parts") {
  std::mt19937_64 rng(8);
  nn::ParamStore ps;
  const DetectorConfig c = small_config();
  Detector det(c, ps, "", rng);
  randomize(ps, rng, 0.2);
  const DetectorOutput out = det.forward(random_tensor({2, 16, 16, 3}, rng));
  std::vector<GroundTruth> gts{{{1, 4}, {{0.3, 0.4, 0.2, 0.1}, {0.7, 0.6, 0.3, 0.2}}}, {{6}, {{0.5, 0.5, 0.4, 0.4}}}};
  const DetectionLoss loss = detection_loss(out, gts, c);
  CHECK(loss.total.item() == doctest::Approx(loss.classification + loss.l1 + loss.giou).epsilon(1e-12));

  // independent recomputation from raw outputs and the returned assignments
  double expect = 0;
  const int64_t N = 5, K1 = 8;
  for (size_t l = 0; l < 2; ++l) {
    std::vector<int> target(2 * N, 7);
    double l1 = 0, giou = 0;
    for (int b = 0; b < 2; ++b)
      for (auto [g, p] : loss.assignments[l][static_cast<size_t>(b)]) {
        target[static_cast<size_t>(b * N + p)] = gts[static_cast<size_t>(b)].classes[static_cast<size_t>(g)];
        const auto& t = gts[static_cast<size_t>(b)].boxes[static_cast<size_t>(g)];
        const double* pb = out.boxes[l].values().data() + (b * N + p) * 4;
        l1 += std::abs(pb[0] - t.cx) + std::abs(pb[1] - t.cy) + std::abs(pb[2] - t.w) + std::abs(pb[3] - t.h);
        giou += 1.0 - generalized_iou({pb[0], pb[1], pb[2], pb[3]}, t);
      }
    double ce = 0, wsum = 0;
    for (int64_t r = 0; r < 2 * N; ++r) {
      const double* lg = out.logits[l].values().data() + r * K1;
      double z = 0;
      for (int64_t k = 0; k < K1; ++k) z += std::exp(lg[k]);
      const int t = target[static_cast<size_t>(r)];
      const double w = t == 7 ? c.eos_coef : 1.0;
      ce -= w * (lg[t] - std::log(z));
      wsum += w;
    }
    expect += 2.0 * ce / wsum + 5.0 * l1 / 3.0 + 2.0 * giou / 3.0;
  }
  CHECK(loss.total.item() == doctest::Approx(expect).epsilon(1e-10));

  // no instances at all: only the classification term
  const DetectionLoss empty = detection_loss(out, {GroundTruth{}, GroundTruth{}}, c);
  CHECK(empty.l1 == 0.0);
  CHECK(empty.giou == 0.0);
  CHECK(empty.total.item() == doctest::Approx(empty.classification));
}

TEST_CASE("detector and loss gradients match finite differences") {
  std::mt19937_64 rng(9);
  nn::ParamStore ps;
  DetectorConfig c = small_config();
  c.num_queries = 3;
  // one decoder layer: later layers see the previous boxes through a
  // gradient stop, which finite differences would see through
  c.dec_layers = 1;
  Detector det(c, ps, "det.", rng);
  randomize(ps, rng, 0.2);
  const nn::Tensor img = random_tensor({1, 16, 16, 3}, rng);
  const std::vector<GroundTruth> gts{{{2, 5}, {{0.3, 0.4, 0.2, 0.3}, {0.6, 0.7, 0.3, 0.2}}}};
  // hold the matching fixed so the loss is smooth in the parameters
  const auto fixed = detection_loss(det.forward(img), gts, c).assignments;
  auto loss = [&] { return detection_loss(det.forward(img), gts, c, fixed).total; };
  for (const auto& e : check_gradients(loss, param_groups(ps), 1e-5, 12)) {
    INFO(e.name << " rel " << e.rel_error << " |a| " << e.analytic_norm);
    CHECK(e.rel_error < 1e-4);
  }
}

TEST_CASE("selection keeps detections at or above the confidence threshold") {
  DetectorOutput out;
  // query 0: class 2 at 0.9; query 1: class 5 at 0.74; query 2: class 1 at 0.8
  auto logit_row = [](int cls, double p) {
    std::vector<double> r(8, -1e3);
    r[static_cast<size_t>(cls)] = std::log(p);
    r[7] = std::log(1 - p);
    return r;
  };
  std::vector<double> lg;
  for (auto r : {logit_row(2, 0.9), logit_row(5, 0.74), logit_row(1, 0.8)}) lg.insert(lg.end(), r.begin(), r.end());
  out.logits = {nn::Tensor::from({1, 3, 8}, lg)};
  out.boxes = {nn::Tensor::from({1, 3, 4}, {0.5, 0.5, 0.2, 0.2, 0.1, 0.1, 0.4, 0.4, 0.9, 0.9, 0.1, 0.1})};
  out.features = nn::Tensor::from({1, 3, 2}, {1, 2, 3, 4, 5, 6});
  const auto dets = select_detections(out, 0, 0.75);
  REQUIRE(dets.size() == 2);
  CHECK(dets[0].confidence == doctest::Approx(0.9));
  CHECK(dets[0].class_scores[2] == doctest::Approx(0.9));
  CHECK(dets[0].box.x1 == doctest::Approx(0.4));
  CHECK(dets[0].box_feature == std::vector<double>{1, 2});
  CHECK(dets[1].query == 2);
  CHECK(select_detections(out, 0, 0.95).empty());
  // boxes leaving the image are clipped
  const auto all = select_detections(out, 0, 0.0);
  CHECK(all[1].box.x1 == 0.0);
  CHECK(all[1].box.valid());
  // the comparison is inclusive
  CHECK(select_detections(out, 0, all[2].confidence).size() == 2);
}

TEST_CASE("training on a few rendered frames drives the loss down") {
  GeneratorConfig g;
  g.image_height = g.image_width = 16;
  g.frames_per_video = 30;
  g.max_instruments = 2;
  g.segment_min_frames = 10;
  g.segment_max_frames = 15;
  g.seed = 3;
  const SceneScript script = script_procedure(g, 1);
  std::vector<double> pix;
  std::vector<GroundTruth> gts;
  for (int64_t f : {0, 7, 14, 21}) {
    append_normalized(render_frame(script, f), pix);
    GroundTruth gt;
    for (const auto& inst : script.instances_at(f)) {
      gt.classes.push_back(inst.instrument_id);
      gt.boxes.push_back(to_center(inst.box));
    }
    gts.push_back(gt);
  }
  const nn::Tensor images = nn::Tensor::from({4, 16, 16, 3}, pix);

  std::mt19937_64 rng(10);
  nn::ParamStore ps;
  const DetectorConfig c = small_config();
  Detector det(c, ps, "", rng);
  AdamW opt(param_groups(ps), 1e-4);
  double first = 0, last = 0;
  for (int step = 0; step < 200; ++step) {
    opt.zero_grad();
    DetectionLoss loss = detection_loss(det.forward(images), gts, c);
    loss.total.backward();
    clip_grad_norm(opt.params(), 1.0);
    opt.step(3e-3);
    if (step == 0) first = loss.total.item();
    last = loss.total.item();
  }
  INFO("first " << first << " last " << last);
  CHECK(last <= 0.5 * first);
}

TEST_CASE("detector config json round trip and validation") {
  const DetectorConfig c = small_config();
  CHECK(to_json(detector_config_from_json(to_json(c))) == to_json(c));
  auto j = to_json(c);
  j["extra"] = 1;
  CHECK_THROWS_AS(detector_config_from_json(j), std::invalid_argument);
  DetectorConfig bad = c;
  bad.backbone_factors = {3, 2};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.heads = 3;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
