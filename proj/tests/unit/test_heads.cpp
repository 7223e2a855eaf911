#include <doctest.h>

#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "tapir/heads.hpp"

using namespace tapir;
using namespace tapir::testing;

TEST_CASE("frame head sizes follow the taxonomy") {
  nn::ParamStore ps;
  std::mt19937_64 rng(1);
  CHECK(make_frame_head(ps, "phase", 16, Task::kPhase, rng)(nn::Tensor::zeros({2, 16})).shape() == nn::Shape{2, 11});
  CHECK(make_frame_head(ps, "step", 16, Task::kStep, rng)(nn::Tensor::zeros({2, 16})).shape() == nn::Shape{2, 20});
  CHECK_THROWS_AS(make_frame_head(ps, "x", 16, Task::kAction, rng), std::invalid_argument);
  const FrameHead h = make_frame_head(ps, "p2", 16, Task::kPhase, rng);
  CHECK_THROWS_AS(h(nn::Tensor::zeros({2, 15})), std::invalid_argument);
}

TEST_CASE("frame head is a single affine map") {
  nn::ParamStore ps;
  std::mt19937_64 rng(2);
  FrameHead h = make_frame_head(ps, "head", 12, Task::kStep, rng);
  for (auto& b : h.linear.bias.values()) b = 0.25;
  for (auto& w : h.linear.weight.values()) w = 0;
  CHECK(max_abs_diff(Mat{std::vector<double>(20, 0.25)}, h(nn::Tensor::zeros({1, 12})).values()) == 0.0);

  std::uniform_real_distribution<double> u(-1, 1);
  for (auto& w : h.linear.weight.values()) w = u(rng);
  for (auto& b : h.linear.bias.values()) b = u(rng);
  const nn::Tensor x = random_tensor({3, 12}, rng);
  CHECK(max_abs_diff(naive_linear(to_mat(x.values(), 3, 12), h.linear), h(x).values()) < 1e-12);

  // head(a x) - head(0) = a (head(x) - head(0))
  const auto y0 = h(nn::Tensor::zeros({3, 12})).to_vector();
  const auto y1 = h(x).to_vector();
  const auto y2 = h(nn::scale(x, -2.5)).to_vector();
  for (size_t i = 0; i < y0.size(); ++i) CHECK(std::abs((y2[i] - y0[i]) + 2.5 * (y1[i] - y0[i])) < 1e-12);
}

TEST_CASE("video pooling is the mean over grid positions") {
  std::mt19937_64 rng(3);
  TokenGrid g{nn::Tensor::full({2, 1 + 12, 5}, 0.7), Grid3{2, 3, 2}};
  g.tokens.values()[0] = 99;  // class token is excluded
  const nn::Tensor mean = pool_video_features(g);
  for (double v : mean.values()) CHECK(v == doctest::Approx(0.7));

  TokenGrid single{random_tensor({1, 2, 4}, rng), Grid3{1, 1, 1}};
  const auto p = pool_video_features(single);
  for (size_t c = 0; c < 4; ++c) CHECK(p.values()[c] == single.tokens.values()[4 + c]);

  TokenGrid r{random_tensor({2, 1 + 8, 3}, rng), Grid3{2, 2, 2}};
  const auto pooled = pool_video_features(r);
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t c = 0; c < 3; ++c) {
      double s = 0;
      for (int64_t n = 1; n <= 8; ++n) s += r.tokens.values()[static_cast<size_t>((b * 9 + n) * 3 + c)];
      CHECK(pooled.values()[static_cast<size_t>(b * 3 + c)] == doctest::Approx(s / 8).epsilon(1e-14));
    }
}

TEST_CASE("box head output sizes and bias-only case") {
  nn::ParamStore ps;
  std::mt19937_64 rng(4);
  const BoxHead inst = make_box_head(ps, "inst", 6, 4, Task::kInstrument, rng);
  BoxHead act = make_box_head(ps, "act", 6, 4, Task::kAction, rng);
  CHECK(inst(nn::Tensor::zeros({3, 6}), nn::Tensor::zeros({3, 4})).shape() == nn::Shape{3, 7});
  const auto scores = nn::sigmoid(act(random_tensor({3, 6}, rng), random_tensor({3, 4}, rng)));
  CHECK(scores.shape() == nn::Shape{3, 16});
  for (double s : scores.values()) CHECK((s > 0 && s < 1));
  for (auto& v : act.linear.bias.values()) v = -0.5;
  for (auto& v : act.linear.weight.values()) v = 0;
  const nn::Tensor bias_only = act(nn::Tensor::zeros({1, 6}), nn::Tensor::zeros({1, 4}));
  for (double v : bias_only.values()) CHECK(v == -0.5);
  CHECK_THROWS_AS(inst(nn::Tensor::zeros({3, 6}), nn::Tensor::zeros({3, 5})), std::invalid_argument);
  CHECK_THROWS_AS(inst(nn::Tensor::zeros({3, 5}), nn::Tensor::zeros({3, 4})), std::invalid_argument);
  CHECK_THROWS_AS(make_box_head(ps, "p", 6, 4, Task::kPhase, rng), std::invalid_argument);
}

TEST_CASE("fusion layout is video features then box features") {
  nn::ParamStore ps;
  std::mt19937_64 rng(5);
  const BoxHead h = make_box_head(ps, "h", 3, 2, Task::kAction, rng);
  const nn::Tensor v = random_tensor({2, 3}, rng), b = random_tensor({2, 2}, rng);
  const auto ref = h(v, b).to_vector();
  // a head with the input rows swapped into (box, video) order, fed swapped inputs
  nn::ParamStore ps2;
  BoxHead swapped = make_box_head(ps2, "s", 2, 3, Task::kAction, rng);
  const auto& w = h.linear.weight.values();
  auto& ws = swapped.linear.weight.values();
  for (int o = 0; o < 16; ++o) {
    for (int i = 0; i < 2; ++i) ws[static_cast<size_t>(i * 16 + o)] = w[static_cast<size_t>((3 + i) * 16 + o)];
    for (int i = 0; i < 3; ++i) ws[static_cast<size_t>((2 + i) * 16 + o)] = w[static_cast<size_t>(i * 16 + o)];
  }
  swapped.linear.bias.values() = h.linear.bias.values();
  const auto out = swapped(b, v).to_vector();
  for (size_t i = 0; i < ref.size(); ++i) CHECK(out[i] == doctest::Approx(ref[i]).epsilon(1e-14));
}

TEST_CASE("action scores are independent per class") {
  std::mt19937_64 rng(6);
  nn::Tensor logits = random_tensor({1, 16}, rng);
  const auto before = nn::sigmoid(logits).to_vector();
  logits.values()[5] += 1.0;
  const auto after = nn::sigmoid(logits).to_vector();
  for (size_t i = 0; i < 16; ++i) {
    if (i == 5) CHECK(after[i] > before[i]);
    else CHECK(after[i] == before[i]);
  }
}

TEST_CASE("ablation head reads only the pooled video features") {
  nn::ParamStore ps;
  std::mt19937_64 rng(7);
  const BoxHead h = make_box_head_ablation(ps, "abl", 6, Task::kAction, rng);
  CHECK(!h.uses_box_features());
  const nn::Tensor v = random_tensor({2, 6}, rng);
  CHECK(h(v, random_tensor({2, 4}, rng)).to_vector() == h(v, nn::Tensor()).to_vector());
  CHECK(h(v, nn::Tensor()).shape() == nn::Shape{2, 16});
  CHECK(make_box_head_ablation(ps, "abl2", 6, Task::kInstrument, rng)(v, {}).shape() == nn::Shape{2, 7});
}

TEST_CASE("head gradients match finite differences") {
  nn::ParamStore ps;
  std::mt19937_64 rng(8);
  const FrameHead fh = make_frame_head(ps, "frame", 5, Task::kPhase, rng);
  const BoxHead bh = make_box_head(ps, "box", 5, 3, Task::kAction, rng);
  const BoxHead ih = make_box_head(ps, "inst", 5, 3, Task::kInstrument, rng);
  const nn::Tensor e = random_tensor({2, 5}, rng, -1, 1, true);
  const nn::Tensor f = random_tensor({2, 3}, rng, -1, 1, true);
  std::vector<double> multi(32);
  for (size_t i = 0; i < multi.size(); ++i) multi[i] = (i * 7) % 3 == 0 ? 1.0 : 0.0;
  auto loss = [&] {
    return nn::add(nn::add(nn::cross_entropy(fh(e), {3, 9}), nn::bce_with_logits(bh(e, f), multi)),
                   nn::cross_entropy(ih(e, f), {0, 6}));
  };
  auto groups = param_groups(ps);
  groups.emplace_back("embedding", e);
  groups.emplace_back("box_feature", f);
  for (const auto& g : check_gradients(loss, groups, 1e-5, 0)) {
    INFO(g.name << " rel " << g.rel_error);
    CHECK(g.rel_error < 1e-6);
  }
}

TEST_CASE("task names") {
  CHECK(parse_task("step") == Task::kStep);
  CHECK(std::string(task_name(Task::kAction)) == "action");
  CHECK(task_classes(Task::kInstrument) == 7);
  CHECK_THROWS_AS(parse_task("tool"), std::invalid_argument);
}
