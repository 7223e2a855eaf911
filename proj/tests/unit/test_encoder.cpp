#include <doctest.h>

#include <numeric>

#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "tapir/encoder.hpp"

using namespace tapir;
using namespace tapir::testing;

namespace {

EncoderConfig tiny_config(bool learnable = false) {
  EncoderConfig c;
  c.clip_length = 2;
  c.image_height = c.image_width = 8;
  c.patch = {1, 4, 4};
  c.embed_dim = 8;
  c.stages = {StageConfig{1, 1, {1, 1, 1}, {1, 1, 1}, 1.0}, StageConfig{1, 2, {1, 2, 2}, {1, 1, 1}, 2.0}};
  c.learnable_pooling = learnable;
  return c;
}

void randomize(nn::ParamStore& ps, std::mt19937_64& rng, double scale = 0.3) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (const auto& name : ps.names()) {
    auto& v = ps.get(name).values();
    for (auto& x : v) x += u(rng);
  }
}

TokenGrid random_grid(Grid3 g, int64_t C, std::mt19937_64& rng, int64_t B = 1) {
  return {random_tensor({B, 1 + g.volume(), C}, rng), g};
}

}  // namespace

TEST_CASE("embedding grid shape follows the patch stride") {
  EncoderConfig c = EncoderConfig::toy();
  c.clip_length = 16;
  c.image_height = c.image_width = 64;
  c.stages = {StageConfig{1, 2, {1, 1, 1}, {2, 4, 4}, 1.0}};
  nn::ParamStore ps;
  std::mt19937_64 rng(1);
  VideoEncoder enc(c, ps, "enc.", rng);
  const TokenGrid g = enc.embed_clip(nn::Tensor::zeros({1, 16, 64, 64, 3}));
  CHECK(g.grid == Grid3{8, 16, 16});
  CHECK(g.tokens.shape() == nn::Shape{1, 1 + 8 * 16 * 16, 32});
  CHECK_THROWS_AS(enc.embed_clip(nn::Tensor::zeros({1, 8, 64, 64, 3})), std::invalid_argument);
}

TEST_CASE("zero clip with zero projection gives bias plus positional terms") {
  nn::ParamStore ps;
  std::mt19937_64 rng(2);
  const EncoderConfig c = tiny_config();
  VideoEncoder enc(c, ps, "", rng);
  for (auto& w : ps.get("patch_embed.weight").values()) w = 0;
  auto& bias = ps.get("patch_embed.bias").values();
  for (size_t i = 0; i < bias.size(); ++i) bias[i] = 0.1 * static_cast<double>(i);
  const TokenGrid g = enc.embed_clip(nn::Tensor::zeros({1, 2, 8, 8, 3}));
  const auto& pos = ps.get("pos_embed").values();
  double err = 0;
  for (int64_t n = 0; n < 8; ++n)
    for (int64_t ch = 0; ch < 8; ++ch)
      err = std::max(err, std::abs(g.tokens.values()[static_cast<size_t>((1 + n) * 8 + ch)] -
                                   (bias[static_cast<size_t>(ch)] + pos[static_cast<size_t>(n * 8 + ch)])));
  CHECK(err < 1e-12);
}

TEST_CASE("cube embedding matches an explicit matrix multiply") {
  nn::ParamStore ps;
  std::mt19937_64 rng(3);
  EncoderConfig c = tiny_config();
  c.clip_length = 4;
  c.patch = {2, 2, 4};
  VideoEncoder enc(c, ps, "", rng);
  randomize(ps, rng);
  const nn::Tensor clip = random_tensor({2, 4, 8, 8, 3}, rng);
  const TokenGrid g = enc.embed_clip(clip);
  const auto& W = ps.get("patch_embed.weight").values();
  const auto& bias = ps.get("patch_embed.bias").values();
  const auto& pos = ps.get("pos_embed").values();
  const auto& cls = ps.get("cls_token").values();
  const auto& x = clip.values();
  const Grid3 grid = c.embed_grid();
  double err = 0;
  for (int64_t b = 0; b < 2; ++b) {
    for (int64_t ch = 0; ch < 8; ++ch)
      err = std::max(err, std::abs(g.tokens.values()[static_cast<size_t>(b * 17 * 8 + ch)] - cls[static_cast<size_t>(ch)]));
    for (int64_t t = 0; t < grid.t; ++t)
      for (int64_t h = 0; h < grid.h; ++h)
        for (int64_t w = 0; w < grid.w; ++w) {
          const int64_t n = (t * grid.h + h) * grid.w + w;
          for (int64_t o = 0; o < 8; ++o) {
            double s = bias[static_cast<size_t>(o)] + pos[static_cast<size_t>(n * 8 + o)];
            int64_t f = 0;
            for (int64_t dt = 0; dt < 2; ++dt)
              for (int64_t dh = 0; dh < 2; ++dh)
                for (int64_t dw = 0; dw < 4; ++dw)
                  for (int64_t ch = 0; ch < 3; ++ch, ++f) {
                    const int64_t src = (((b * 4 + t * 2 + dt) * 8 + h * 2 + dh) * 8 + w * 4 + dw) * 3 + ch;
                    s += x[static_cast<size_t>(src)] * W[static_cast<size_t>(f * 8 + o)];
                  }
            err = std::max(err, std::abs(s - g.tokens.values()[static_cast<size_t>((b * 17 + 1 + n) * 8 + o)]));
          }
        }
  }
  CHECK(err < 1e-5);
}

TEST_CASE("unit-stride single-head block equals plain softmax attention") {
  nn::ParamStore ps;
  std::mt19937_64 rng(4);
  const int64_t C = 6;
  BlockParams p = make_block(ps, "b", C, C, 1, {1, 1, 1}, {1, 1, 1}, 2, false, rng);
  randomize(ps, rng);
  auto& vw = ps.get("b.attn.v.weight").values();
  auto& pw = ps.get("b.attn.proj.weight").values();
  for (int64_t i = 0; i < C; ++i)
    for (int64_t j = 0; j < C; ++j) {
      vw[static_cast<size_t>(i * C + j)] = i == j;
      pw[static_cast<size_t>(i * C + j)] = i == j;
    }
  for (auto& b : ps.get("b.attn.proj.bias").values()) b = 0;
  const Grid3 g{2, 3, 2};
  const TokenGrid in = random_grid(g, C, rng);
  std::vector<double> probs;
  const TokenGrid out = mhpa(in, p, false, nullptr, 0.0, &probs);
  CHECK(out.grid == g);
  const Mat x = to_mat(in.tokens.values(), 13, C);
  CHECK(max_abs_diff(naive_block(x, g, p), out.tokens.values()) < 1e-5);
  for (size_t r = 0; r < 13; ++r)
    CHECK(std::accumulate(probs.begin() + static_cast<long>(r * 13), probs.begin() + static_cast<long>((r + 1) * 13), 0.0) ==
          doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("pooled multi-head block matches the loop oracle") {
  for (bool widen : {false, true}) {
    nn::ParamStore ps;
    std::mt19937_64 rng(5);
    const int64_t Cin = 8, Cout = widen ? 16 : 8;
    BlockParams p = make_block(ps, "b", Cin, Cout, 4, {1, 2, 2}, {2, 2, 1}, 4, false, rng);
    randomize(ps, rng);
    const Grid3 g{3, 5, 4};
    const TokenGrid in = random_grid(g, Cin, rng, 2);
    std::vector<double> probs;
    const TokenGrid out = mhpa(in, p, false, nullptr, 0.0, &probs);
    CHECK(out.grid == Grid3{3, 3, 2});
    for (int64_t b = 0; b < 2; ++b) {
      const Mat x = to_mat(in.tokens.values(), 61, Cin, b * 61 * Cin);
      CHECK(max_abs_diff(naive_block(x, g, p), out.tokens.values(), b * 19 * Cout) < 1e-5);
    }
    const size_t nk = 1 + 2 * 3 * 4;
    for (size_t r = 0; r < probs.size() / nk; ++r)
      CHECK(std::accumulate(probs.begin() + static_cast<long>(r * nk), probs.begin() + static_cast<long>((r + 1) * nk), 0.0) ==
            doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("query stride (1,2,2) halves an (8,16,16) grid; oversized strides fail") {
  nn::ParamStore ps;
  std::mt19937_64 rng(6);
  BlockParams p = make_block(ps, "b", 8, 8, 2, {1, 2, 2}, {1, 4, 4}, 1, false, rng);
  const TokenGrid out = mhpa(random_grid({8, 16, 16}, 8, rng), p);
  CHECK(out.grid == Grid3{8, 8, 8});
  CHECK(out.tokens.shape() == nn::Shape{1, 1 + 512, 8});
  BlockParams big = make_block(ps, "c", 8, 8, 2, {1, 4, 4}, {1, 1, 1}, 1, false, rng);
  CHECK_THROWS_AS(mhpa(random_grid({2, 2, 2}, 8, rng), big), std::invalid_argument);
}

TEST_CASE("class token survives pooling") {
  nn::ParamStore ps;
  std::mt19937_64 rng(7);
  BlockParams p = make_block(ps, "b", 4, 4, 1, {2, 2, 2}, {2, 2, 2}, 1, false, rng);
  const TokenGrid in = random_grid({2, 2, 2}, 4, rng);
  const TokenGrid out = mhpa(in, p);
  CHECK(out.grid == Grid3{1, 1, 1});
  CHECK(out.tokens.dim(1) == 2);
}

TEST_CASE("permuting grid tokens permutes the outputs of a unit-stride block") {
  nn::ParamStore ps;
  std::mt19937_64 rng(8);
  const int64_t C = 8;
  BlockParams p = make_block(ps, "b", C, C, 2, {1, 1, 1}, {1, 1, 1}, 2, false, rng);
  randomize(ps, rng);
  const Grid3 g{1, 3, 3};
  const TokenGrid in = random_grid(g, C, rng);
  std::vector<int64_t> perm{0, 5, 3, 9, 1, 2, 8, 4, 7, 6};  // class token stays first
  std::vector<double> shuffled(in.tokens.values().size());
  for (size_t r = 0; r < perm.size(); ++r)
    std::copy_n(in.tokens.values().begin() + perm[r] * C, C, shuffled.begin() + static_cast<long>(r) * C);
  const TokenGrid a = mhpa(in, p);
  const TokenGrid b = mhpa({nn::Tensor::from(in.tokens.shape(), shuffled), g}, p);
  double err = 0;
  for (size_t r = 0; r < perm.size(); ++r)
    for (int64_t c = 0; c < C; ++c)
      err = std::max(err, std::abs(a.tokens.values()[static_cast<size_t>(perm[r] * C + c)] -
                                   b.tokens.values()[static_cast<size_t>(static_cast<int64_t>(r) * C + c)]));
  CHECK(err < 1e-5);
}

TEST_CASE("two stages with multiplier 2 widen 32 -> 64 and halve the grid") {
  EncoderConfig c = EncoderConfig::toy();
  nn::ParamStore ps;
  std::mt19937_64 rng(9);
  VideoEncoder enc(c, ps, "", rng);
  const nn::Tensor clip = random_tensor({1, 8, 32, 32, 3}, rng);
  const EncoderOutput out = enc.encode(clip);
  CHECK(out.class_embedding.shape() == nn::Shape{1, 64});
  CHECK(out.final_grid.grid == Grid3{4, 4, 4});
  CHECK(out.final_grid.channels() == 64);
  const EncoderOutput again = enc.encode(clip);
  CHECK(again.class_embedding.values() == out.class_embedding.values());
  CHECK(again.final_grid.tokens.values() == out.final_grid.tokens.values());
}

TEST_CASE("shape ledger over random configurations") {
  std::mt19937_64 rng(10);
  auto pick = [&](int lo, int hi) { return lo + static_cast<int>(rng() % static_cast<uint64_t>(hi - lo + 1)); };
  for (int trial = 0; trial < 20; ++trial) {
    EncoderConfig c;
    c.patch = {pick(1, 2), pick(2, 4), pick(2, 4)};
    c.clip_length = static_cast<int>(c.patch.t) * pick(1, 3);
    c.image_height = static_cast<int>(c.patch.h) * pick(2, 5);
    c.image_width = static_cast<int>(c.patch.w) * pick(2, 5);
    c.embed_dim = 4 * pick(1, 3);
    c.mlp_ratio = 1;
    c.stages.clear();
    Grid3 g = c.embed_grid();
    const int n_stages = pick(1, 3);
    for (int s = 0; s < n_stages; ++s) {
      StageConfig st;
      st.blocks = pick(1, 2);
      st.heads = s == 0 ? 2 : 4;
      st.q_stride = s == 0 ? Grid3{1, 1, 1} : Grid3{1, std::min<int64_t>(2, g.h), std::min<int64_t>(2, g.w)};
      g = nn::pooled_grid(g, st.q_stride);
      st.kv_stride = {1, std::min<int64_t>(pick(1, 2), g.h), std::min<int64_t>(pick(1, 2), g.w)};
      st.channel_mult = s == 0 ? 1.0 : 2.0;
      c.stages.push_back(st);
    }
    nn::ParamStore ps;
    VideoEncoder enc(c, ps, "", rng);
    TokenGrid x = enc.embed_clip(random_tensor({1, c.clip_length, c.image_height, c.image_width, 3}, rng));
    size_t block = 0;
    const auto grids = c.stage_grids();
    const auto dims = c.stage_dims();
    for (size_t s = 0; s < c.stages.size(); ++s) {
      for (int b = 0; b < c.stages[s].blocks; ++b) x = mhpa(x, enc.blocks()[block++]);
      CHECK(x.grid == grids[s]);
      CHECK(x.tokens.shape() == nn::Shape{1, 1 + grids[s].volume(), dims[s]});
      // closed form: each axis is ceil-divided by the cumulative query stride
      int64_t th = c.image_height / c.patch.h, tw = c.image_width / c.patch.w;
      for (size_t k = 0; k <= s; ++k) {
        th = (th + c.stages[k].q_stride.h - 1) / c.stages[k].q_stride.h;
        tw = (tw + c.stages[k].q_stride.w - 1) / c.stages[k].q_stride.w;
      }
      CHECK(grids[s].h == th);
      CHECK(grids[s].w == tw);
      CHECK(std::all_of(x.tokens.values().begin(), x.tokens.values().end(), [](double v) { return std::isfinite(v); }));
    }
  }
}

TEST_CASE("encoder gradients match finite differences for every parameter group") {
  for (bool learnable : {false, true}) {
    nn::ParamStore ps;
    std::mt19937_64 rng(11);
    EncoderConfig c = tiny_config(learnable);
    c.stages[1].kv_stride = {1, 2, 1};
    VideoEncoder enc(c, ps, "enc.", rng);
    randomize(ps, rng, 0.2);
    const nn::Tensor clip = random_tensor({1, 2, 8, 8, 3}, rng);
    const nn::Tensor wc = random_tensor({1, 16}, rng);
    const nn::Tensor wg = random_tensor({1, 3, 16}, rng);
    auto loss = [&] {
      const EncoderOutput o = enc.encode(clip);
      return nn::add(nn::sum(nn::mul(o.class_embedding, wc)), nn::sum(nn::mul(o.final_grid.tokens, wg)));
    };
    const auto errs = check_gradients(loss, param_groups(ps), 1e-3, 16);
    CHECK(errs.size() == ps.names().size());
    for (const auto& e : errs) {
      INFO(e.name << " rel " << e.rel_error << " |a| " << e.analytic_norm);
      CHECK(e.rel_error < 1e-2);
    }
  }
}

TEST_CASE("encoder config json round trip and validation") {
  const EncoderConfig c = EncoderConfig::toy();
  CHECK(to_json(encoder_config_from_json(to_json(c))) == to_json(c));
  EncoderConfig bad = c;
  bad.stages[1].heads = 3;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.image_height = 30;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.stages[1].q_stride = {1, 16, 16};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
