#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "support/gradcheck.hpp"
#include "tapir/nn/ops.hpp"
#include "tapir/nn/params.hpp"

using namespace tapir;
using namespace tapir::nn;
using tapir::testing::check_gradients;
using tapir::testing::random_tensor;

namespace {

void require_all_pass(const std::vector<tapir::testing::GroupError>& errs, double tol = 1e-2) {
  for (const auto& e : errs) {
    INFO(e.name << " rel=" << e.rel_error << " |a|=" << e.analytic_norm << " |n|=" << e.numeric_norm);
    CHECK(e.rel_error < tol);
  }
}

// A fixed random projection turns any tensor into a scalar with nontrivial
// upstream gradients.
Tensor probe(const Tensor& y, uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng)));
}

}  // namespace

TEST_CASE("dense ops gradients") {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({2, 3, 5}, rng, -1, 1, true);
  Tensor w = random_tensor({5, 4}, rng, -1, 1, true);
  Tensor b = random_tensor({4}, rng, -1, 1, true);
  Tensor g = random_tensor({4}, rng, 0.5, 1.5, true);
  Tensor be = random_tensor({4}, rng, -1, 1, true);
  auto loss = [&] {
    Tensor h = layer_norm(gelu(linear(x, w, b)), g, be);
    return add(probe(softmax_last(h)), probe(log_softmax_last(sigmoid(h)), 7));
  };
  require_all_pass(check_gradients(loss, {{"x", x}, {"w", w}, {"b", b}, {"gamma", g}, {"beta", be}}));
}

TEST_CASE("shape ops gradients") {
  std::mt19937_64 rng(4);
  Tensor a = random_tensor({2, 3, 4}, rng, -1, 1, true);
  Tensor c = random_tensor({2, 2, 4}, rng, -1, 1, true);
  Tensor r = random_tensor({3, 4}, rng, -1, 1, true);
  auto loss = [&] {
    Tensor cat = concat({a, c}, 1);                       // [2,5,4]
    Tensor sl = slice(cat, 1, 1, 4);                      // [2,3,4]
    Tensor rows = index_rows(sl, {0, 5, 2, 2});           // [4,4]
    Tensor rep = add(repeat_batch(r, 2), a);              // [2,3,4]
    Tensor m = mean_axis(rep, 1);                         // [2,4]
    Tensor rs = reshape(m, {4, 2});
    return add(add(probe(rows), probe(rs, 5)), probe(add_bcast(sl, r), 6));
  };
  require_all_pass(check_gradients(loss, {{"a", a}, {"c", c}, {"r", r}}, 1e-3, 0));
}

TEST_CASE("concat and slice values") {
  Tensor a = Tensor::from({1, 2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({1, 2, 1}, {9, 8});
  Tensor c = concat({a, b}, 2);
  CHECK(c.shape() == Shape{1, 2, 3});
  CHECK(c.to_vector() == std::vector<double>{1, 2, 9, 3, 4, 8});
  CHECK(slice(c, 2, 1, 3).to_vector() == std::vector<double>{2, 9, 4, 8});
  CHECK_THROWS(slice(c, 2, 2, 2));
}

TEST_CASE("patchify layout") {
  // [B=1, T=2, H=2, W=2, C=1], values = linear index
  std::vector<double> v(8);
  for (int i = 0; i < 8; ++i) v[static_cast<size_t>(i)] = i;
  Tensor x = Tensor::from({1, 2, 2, 2, 1}, v);
  Tensor p = patchify(x, {2, 1, 2});
  CHECK(p.shape() == Shape{1, 2, 4});
  // token (h=0): t0 (w0,w1), t1 (w0,w1)
  CHECK(p.to_vector() == std::vector<double>{0, 1, 4, 5, 2, 3, 6, 7});
  CHECK_THROWS_AS(patchify(x, {1, 3, 1}), std::invalid_argument);
}

TEST_CASE("pool_tokens matches a window-mean loop") {
  std::mt19937_64 rng(5);
  const Grid3 in{3, 5, 4}, stride{2, 2, 3};
  const int64_t C = 3;
  Tensor x = random_tensor({2, 1 + in.volume(), C}, rng, -1, 1, true);
  Tensor y = pool_tokens(x, in, stride, 1);
  const Grid3 og = pooled_grid(in, stride);
  CHECK(og == Grid3{2, 3, 2});
  REQUIRE(y.shape() == Shape{2, 1 + og.volume(), C});
  for (int64_t b = 0; b < 2; ++b) {
    for (int64_t c = 0; c < C; ++c) CHECK(y.values()[static_cast<size_t>(b * y.dim(1) * C + c)] == x.values()[static_cast<size_t>(b * x.dim(1) * C + c)]);
    for (int64_t ot = 0; ot < og.t; ++ot)
      for (int64_t oh = 0; oh < og.h; ++oh)
        for (int64_t ow = 0; ow < og.w; ++ow)
          for (int64_t c = 0; c < C; ++c) {
            double s = 0;
            int n = 0;
            for (int64_t t = ot * 2; t < std::min<int64_t>(ot * 2 + 2, in.t); ++t)
              for (int64_t h = oh * 2; h < std::min<int64_t>(oh * 2 + 2, in.h); ++h)
                for (int64_t w = ow * 3; w < std::min<int64_t>(ow * 3 + 3, in.w); ++w, ++n)
                  s += x.values()[static_cast<size_t>((b * x.dim(1) + 1 + (t * in.h + h) * in.w + w) * C + c)];
            const int64_t tok = 1 + (ot * og.h + oh) * og.w + ow;
            CHECK(y.values()[static_cast<size_t>((b * y.dim(1) + tok) * C + c)] == doctest::Approx(s / n).epsilon(1e-12));
          }
  }
  Tensor wts = random_tensor({stride.volume(), C}, rng, 0, 1, true);
  auto loss = [&] { return add(probe(pool_tokens(x, in, stride, 1)), probe(pool_tokens(x, in, stride, 1, &wts), 8)); };
  require_all_pass(check_gradients(loss, {{"x", x}, {"weights", wts}}));
  CHECK_THROWS_AS(pool_tokens(x, in, {4, 1, 1}, 1), std::invalid_argument);
}

TEST_CASE("attention gradients and normalization") {
  std::mt19937_64 rng(6);
  Tensor q = random_tensor({2, 3, 4}, rng, -1, 1, true);
  Tensor k = random_tensor({2, 5, 4}, rng, -1, 1, true);
  Tensor v = random_tensor({2, 5, 4}, rng, -1, 1, true);
  std::vector<double> probs;
  multi_head_attention(q, k, v, 2, &probs);
  REQUIRE(probs.size() == 2u * 2 * 3 * 5);
  for (size_t row = 0; row < probs.size() / 5; ++row) {
    double s = 0;
    for (size_t j = 0; j < 5; ++j) s += probs[row * 5 + j];
    CHECK(std::fabs(s - 1.0) < 1e-12);
  }
  auto loss = [&] { return probe(multi_head_attention(q, k, v, 2)); };
  require_all_pass(check_gradients(loss, {{"q", q}, {"k", k}, {"v", v}}, 1e-3, 0));
}

TEST_CASE("deformable sampling gradients") {
  std::mt19937_64 rng(7);
  const std::vector<LevelShape> levels{{4, 5}, {2, 3}};
  const int64_t S = 4 * 5 + 2 * 3;
  Tensor value = random_tensor({1, S, 4}, rng, -1, 1, true);
  Tensor ref2 = random_tensor({1, 3, 2}, rng, 0.2, 0.8, true);
  Tensor ref4 = random_tensor({1, 3, 4}, rng, 0.2, 0.6, true);
  Tensor off = random_tensor({1, 3, 2, 2, 2, 2}, rng, -0.7, 0.7, true);
  Tensor wraw = random_tensor({1, 3, 2, 4}, rng, -1, 1, true);
  auto loss = [&] {
    Tensor w = reshape(softmax_last(wraw), {1, 3, 2, 2, 2});
    Tensor a = ms_deform_sample(value, levels, deform_locations(ref2, off, levels), w);
    Tensor b = ms_deform_sample(value, levels, deform_locations(ref4, off, levels), w);
    return add(probe(a), probe(b, 3));
  };
  require_all_pass(check_gradients(loss, {{"value", value}, {"ref2", ref2}, {"ref4", ref4}, {"offsets", off}, {"weights", wraw}},
                                   1e-4, 0));
}

TEST_CASE("losses") {
  SUBCASE("cross entropy closed form") {
    Tensor logits = Tensor::from({2, 3}, {0, 0, 0, 1, 2, 3}, true);
    Tensor l = cross_entropy(logits, {1, 2});
    const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
    CHECK(l.item() == doctest::Approx((std::log(3.0) + (lse - 3.0)) / 2).epsilon(1e-12));
    Tensor lw = cross_entropy(logits, {1, 2}, {1.0, 1.0, 0.25});
    CHECK(lw.item() == doctest::Approx((std::log(3.0) + 0.25 * (lse - 3.0)) / 1.25).epsilon(1e-12));
    require_all_pass(check_gradients([&] { return cross_entropy(logits, {1, 2}, {1.0, 0.5, 0.25}); }, {{"logits", logits}}, 1e-4, 0));
  }
  SUBCASE("binary cross entropy closed form") {
    Tensor logits = Tensor::from({1, 2}, {0.0, 2.0}, true);
    Tensor l = bce_with_logits(logits, {1.0, 0.0});
    CHECK(l.item() == doctest::Approx((std::log(2.0) + std::log1p(std::exp(2.0))) / 2).epsilon(1e-12));
    require_all_pass(check_gradients([&] { return bce_with_logits(logits, {1.0, 0.0}); }, {{"logits", logits}}, 1e-4, 0));
  }
  SUBCASE("generalized iou") {
    Tensor a = Tensor::from({3, 4}, {0.5, 0.5, 0.2, 0.2, 0.3, 0.3, 0.2, 0.2, 0.4, 0.5, 0.3, 0.2}, true);
    Tensor b = Tensor::from({3, 4}, {0.5, 0.5, 0.2, 0.2, 0.7, 0.7, 0.2, 0.2, 0.5, 0.45, 0.2, 0.3}, true);
    Tensor g = generalized_iou(a, b);
    CHECK(g.values()[0] == doctest::Approx(1.0).epsilon(1e-12));
    // disjoint: iou 0, enclosing 0.6x0.6, union 0.08 -> -(0.36-0.08)/0.36
    CHECK(g.values()[1] == doctest::Approx(-(0.36 - 0.08) / 0.36).epsilon(1e-12));
    // identical boxes sit on a kink of min/max; check the smooth rows only
    Tensor a2 = Tensor::from({2, 4}, {0.3, 0.3, 0.2, 0.2, 0.4, 0.5, 0.3, 0.2}, true);
    Tensor b2 = Tensor::from({2, 4}, {0.7, 0.7, 0.2, 0.2, 0.5, 0.45, 0.2, 0.32}, true);
    require_all_pass(check_gradients([&] { return probe(generalized_iou(a2, b2)); }, {{"a", a2}, {"b", b2}}, 1e-5, 0));
  }
}

TEST_CASE("inverse sigmoid inverts sigmoid") {
  Tensor x = Tensor::from({4}, {-3.0, -0.2, 0.0, 4.0});
  Tensor y = inverse_sigmoid(sigmoid(x));
  for (size_t i = 0; i < 4; ++i) CHECK(y.values()[i] == doctest::Approx(x.values()[i]).epsilon(1e-9));
}

TEST_CASE("checkpoint save-load-save is byte stable") {
  std::mt19937_64 rng(11);
  ParamStore ps;
  make_linear(ps, "a.proj", 3, 2, rng);
  ps.add_normal("b.pos", {2, 2, 2}, 0.02, rng);
  Checkpoint ck;
  ck.meta = {{"config", {{"dim", 3}}}};
  store_params(ck, ps);
  const auto dir = std::filesystem::temp_directory_path() / "tapir_ckpt_test";
  std::filesystem::create_directories(dir);
  ck.save((dir / "one.ckpt").string());
  Checkpoint again = Checkpoint::load((dir / "one.ckpt").string());
  again.save((dir / "two.ckpt").string());
  auto bytes = [](const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
  };
  CHECK(bytes(dir / "one.ckpt") == bytes(dir / "two.ckpt"));

  ParamStore other;
  std::mt19937_64 rng2(12);
  make_linear(other, "a.proj", 3, 2, rng2);
  other.add_normal("b.pos", {2, 2, 2}, 0.02, rng2);
  load_params(again, other);
  CHECK(other.get("a.proj.weight").values() == ps.get("a.proj.weight").values());

  ParamStore wrong;
  make_linear(wrong, "a.proj", 4, 2, rng2);
  CHECK_THROWS_WITH_AS(load_params(again, wrong), doctest::Contains("a.proj.weight"), std::invalid_argument);
}
