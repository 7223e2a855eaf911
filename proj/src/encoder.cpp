#include "tapir/encoder.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace tapir {

using nlohmann::json;
namespace {

std::string grid_str(Grid3 g) {
  std::ostringstream os;
  os << "(" << g.t << "," << g.h << "," << g.w << ")";
  return os.str();
}

bool fits(Grid3 stride, Grid3 grid) { return stride.t <= grid.t && stride.h <= grid.h && stride.w <= grid.w; }
bool positive(Grid3 g) { return g.t >= 1 && g.h >= 1 && g.w >= 1; }

json grid_json(Grid3 g) { return json::array({g.t, g.h, g.w}); }
Grid3 grid_from(const json& j) {
  const auto v = j.get<std::vector<int64_t>>();
  if (v.size() != 3) throw std::invalid_argument("expected a 3-element [t, h, w] list");
  return {v[0], v[1], v[2]};
}

Tensor maybe_pool(const Tensor& x, Grid3 grid, Grid3 stride, const Tensor& weights) {
  if (stride.volume() == 1) return x;
  return nn::pool_tokens(x, grid, stride, 1, weights.defined() ? &weights : nullptr);
}

}  // namespace

EncoderConfig EncoderConfig::toy() {
  EncoderConfig c;
  c.clip_length = 8;
  c.image_height = c.image_width = 32;
  c.patch = {2, 4, 4};
  c.embed_dim = 32;
  c.stages = {StageConfig{2, 2, {1, 1, 1}, {1, 2, 2}, 1.0}, StageConfig{2, 4, {1, 2, 2}, {1, 1, 1}, 2.0}};
  return c;
}

Grid3 EncoderConfig::embed_grid() const {
  return {clip_length / patch.t, image_height / patch.h, image_width / patch.w};
}

std::vector<Grid3> EncoderConfig::stage_grids() const {
  std::vector<Grid3> out;
  Grid3 g = embed_grid();
  for (const auto& s : stages) {
    g = nn::pooled_grid(g, s.q_stride);
    out.push_back(g);
  }
  return out;
}

std::vector<int64_t> EncoderConfig::stage_dims() const {
  std::vector<int64_t> out;
  int64_t d = embed_dim;
  for (const auto& s : stages) {
    d = std::llround(static_cast<double>(d) * s.channel_mult);
    out.push_back(d);
  }
  return out;
}

void EncoderConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument("encoder config: " + msg);
  };
  need(clip_length >= 1 && image_height >= 1 && image_width >= 1, "clip length and image size must be positive");
  need(positive(patch), "patch size must be >= 1");
  need(clip_length % patch.t == 0 && image_height % patch.h == 0 && image_width % patch.w == 0,
       "clip " + std::to_string(clip_length) + "x" + std::to_string(image_height) + "x" + std::to_string(image_width) +
           " not divisible by patch " + grid_str(patch));
  need(embed_dim >= 1, "embed_dim must be >= 1");
  need(mlp_ratio >= 1, "mlp_ratio must be >= 1");
  need(dropout >= 0 && dropout < 1, "dropout must lie in [0, 1)");
  need(!stages.empty(), "at least one stage is required");
  Grid3 g = embed_grid();
  int64_t d = embed_dim;
  for (size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    const std::string tag = "stage " + std::to_string(i) + ": ";
    need(s.blocks >= 1 && s.heads >= 1, tag + "blocks and heads must be >= 1");
    need(positive(s.q_stride) && positive(s.kv_stride), tag + "strides must be >= 1");
    need(s.channel_mult > 0, tag + "channel_mult must be positive");
    const double scaled = static_cast<double>(d) * s.channel_mult;
    need(std::abs(scaled - std::round(scaled)) < 1e-9 && scaled >= 1, tag + "channel_mult must give an integer width");
    d = std::llround(scaled);
    need(d % s.heads == 0, tag + "width " + std::to_string(d) + " not divisible by " + std::to_string(s.heads) + " heads");
    need(fits(s.q_stride, g), tag + "query stride " + grid_str(s.q_stride) + " exceeds grid " + grid_str(g));
    need(fits(s.kv_stride, g), tag + "key/value stride " + grid_str(s.kv_stride) + " exceeds grid " + grid_str(g));
    g = nn::pooled_grid(g, s.q_stride);
    need(s.blocks == 1 || fits(s.kv_stride, g),
         tag + "key/value stride " + grid_str(s.kv_stride) + " exceeds pooled grid " + grid_str(g));
  }
}

json to_json(const EncoderConfig& c) {
  json stages = json::array();
  for (const auto& s : c.stages)
    stages.push_back({{"blocks", s.blocks},
                      {"heads", s.heads},
                      {"q_stride", grid_json(s.q_stride)},
                      {"kv_stride", grid_json(s.kv_stride)},
                      {"channel_mult", s.channel_mult}});
  return {{"clip_length", c.clip_length}, {"image_height", c.image_height}, {"image_width", c.image_width},
          {"patch", grid_json(c.patch)},  {"embed_dim", c.embed_dim},       {"stages", stages},
          {"mlp_ratio", c.mlp_ratio},      {"dropout", c.dropout},          {"learnable_pooling", c.learnable_pooling}};
}

EncoderConfig encoder_config_from_json(const json& j) {
  EncoderConfig c = EncoderConfig::toy();
  try {
    if (j.contains("clip_length")) c.clip_length = j["clip_length"].get<int>();
    if (j.contains("image_height")) c.image_height = j["image_height"].get<int>();
    if (j.contains("image_width")) c.image_width = j["image_width"].get<int>();
    if (j.contains("patch")) c.patch = grid_from(j["patch"]);
    if (j.contains("embed_dim")) c.embed_dim = j["embed_dim"].get<int>();
    if (j.contains("mlp_ratio")) c.mlp_ratio = j["mlp_ratio"].get<int>();
    if (j.contains("dropout")) c.dropout = j["dropout"].get<double>();
    if (j.contains("learnable_pooling")) c.learnable_pooling = j["learnable_pooling"].get<bool>();
    if (j.contains("stages")) {
      c.stages.clear();
      for (const auto& sj : j["stages"]) {
        StageConfig s;
        s.blocks = sj.at("blocks").get<int>();
        s.heads = sj.at("heads").get<int>();
        if (sj.contains("q_stride")) s.q_stride = grid_from(sj["q_stride"]);
        if (sj.contains("kv_stride")) s.kv_stride = grid_from(sj["kv_stride"]);
        if (sj.contains("channel_mult")) s.channel_mult = sj["channel_mult"].get<double>();
        c.stages.push_back(s);
      }
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("encoder config: ") + e.what());
  }
  c.validate();
  return c;
}

Tensor TokenGrid::class_token() const {
  return nn::reshape(nn::slice(tokens, 1, 0, 1), {tokens.dim(0), tokens.dim(2)});
}

Tensor TokenGrid::grid_tokens() const { return nn::slice(tokens, 1, 1, tokens.dim(1)); }

BlockParams make_block(nn::ParamStore& ps, const std::string& name, int64_t dim_in, int64_t dim_out, int heads,
                       Grid3 q_stride, Grid3 kv_stride, int mlp_ratio, bool learnable_pooling, std::mt19937_64& rng) {
  BlockParams p;
  p.dim_in = dim_in;
  p.dim_out = dim_out;
  p.heads = heads;
  p.q_stride = q_stride;
  p.kv_stride = kv_stride;
  p.norm1 = nn::make_layer_norm(ps, name + ".norm1", dim_in);
  p.q = nn::make_linear(ps, name + ".attn.q", dim_in, dim_out, rng);
  p.k = nn::make_linear(ps, name + ".attn.k", dim_in, dim_out, rng);
  p.v = nn::make_linear(ps, name + ".attn.v", dim_in, dim_out, rng);
  p.proj = nn::make_linear(ps, name + ".attn.proj", dim_out, dim_out, rng);
  if (dim_in != dim_out) p.residual = nn::make_linear(ps, name + ".residual", dim_in, dim_out, rng);
  p.norm2 = nn::make_layer_norm(ps, name + ".norm2", dim_out);
  p.fc1 = nn::make_linear(ps, name + ".mlp.fc1", dim_out, dim_out * mlp_ratio, rng);
  p.fc2 = nn::make_linear(ps, name + ".mlp.fc2", dim_out * mlp_ratio, dim_out, rng);
  if (learnable_pooling) {
    auto pool = [&](const char* which, Grid3 stride) {
      if (stride.volume() == 1) return Tensor();
      return ps.add_constant(name + ".pool_" + which, {stride.volume(), dim_out}, 1.0 / static_cast<double>(stride.volume()));
    };
    p.pool_q = pool("q", q_stride);
    p.pool_k = pool("k", kv_stride);
    p.pool_v = pool("v", kv_stride);
  }
  return p;
}

TokenGrid mhpa(const TokenGrid& in, const BlockParams& p, bool training, std::mt19937_64* rng, double dropout,
               std::vector<double>* probs_out) {
  if (in.channels() != p.dim_in)
    throw std::invalid_argument("mhpa: input width " + std::to_string(in.channels()) + ", block expects " +
                                std::to_string(p.dim_in));
  if (p.dim_out % p.heads != 0) throw std::invalid_argument("mhpa: width not divisible by head count");
  if (!fits(p.q_stride, in.grid) || !fits(p.kv_stride, in.grid))
    throw std::invalid_argument("mhpa: stride q" + grid_str(p.q_stride) + " / kv" + grid_str(p.kv_stride) +
                                " larger than grid " + grid_str(in.grid));
  const bool drop = training && dropout > 0 && rng;
  const Tensor h = p.norm1(in.tokens);
  const Tensor q = maybe_pool(p.q(h), in.grid, p.q_stride, p.pool_q);
  const Tensor k = maybe_pool(p.k(h), in.grid, p.kv_stride, p.pool_k);
  const Tensor v = maybe_pool(p.v(h), in.grid, p.kv_stride, p.pool_v);
  Tensor attn = p.proj(nn::multi_head_attention(q, k, v, p.heads, probs_out));
  if (drop) attn = nn::dropout(attn, dropout, *rng, true);

  Tensor res = maybe_pool(in.tokens, in.grid, p.q_stride, Tensor());
  if (p.residual.weight.defined()) res = p.residual(res);
  Tensor x = nn::add(res, attn);

  Tensor m = p.fc2(nn::gelu(p.fc1(p.norm2(x))));
  if (drop) m = nn::dropout(m, dropout, *rng, true);
  return {nn::add(x, m), nn::pooled_grid(in.grid, p.q_stride)};
}

VideoEncoder::VideoEncoder(const EncoderConfig& config, nn::ParamStore& ps, const std::string& prefix,
                           std::mt19937_64& rng)
    : config_(config), prefix_(prefix) {
  config_.validate();
  const Grid3 g = config_.embed_grid();
  const int64_t c0 = config_.embed_dim;
  patch_embed_ = nn::make_linear(ps, prefix + "patch_embed", config_.patch.volume() * 3, c0, rng);
  pos_embed_ = ps.add_normal(prefix + "pos_embed", {g.volume(), c0}, 0.02, rng);
  cls_token_ = ps.add_normal(prefix + "cls_token", {1, c0}, 0.02, rng);
  int64_t dim = c0;
  int index = 0;
  for (size_t s = 0; s < config_.stages.size(); ++s) {
    const auto& st = config_.stages[s];
    const int64_t dim_out = config_.stage_dims()[s];
    for (int b = 0; b < st.blocks; ++b, ++index) {
      const Grid3 qs = b == 0 ? st.q_stride : Grid3{1, 1, 1};
      blocks_.push_back(make_block(ps, prefix + "blocks." + std::to_string(index), b == 0 ? dim : dim_out, dim_out,
                                   st.heads, qs, st.kv_stride, config_.mlp_ratio, config_.learnable_pooling, rng));
    }
    dim = dim_out;
  }
  final_norm_ = nn::make_layer_norm(ps, prefix + "norm", dim);
}

TokenGrid VideoEncoder::embed_clip(const Tensor& clip) const {
  const nn::Shape want{clip.rank() == 5 ? clip.dim(0) : -1, config_.clip_length, config_.image_height,
                       config_.image_width, 3};
  if (clip.rank() != 5 || clip.shape() != want)
    throw std::invalid_argument("embed_clip: expected clip [B," + std::to_string(config_.clip_length) + "," +
                                std::to_string(config_.image_height) + "," + std::to_string(config_.image_width) +
                                ",3], got " + nn::shape_str(clip.shape()));
  const int64_t B = clip.dim(0);
  Tensor grid = nn::add_bcast(patch_embed_(nn::patchify(clip, config_.patch)), pos_embed_);
  Tensor cls = nn::repeat_batch(cls_token_, B);
  return {nn::concat({cls, grid}, 1), config_.embed_grid()};
}

EncoderOutput VideoEncoder::encode(const Tensor& clip, bool training, std::mt19937_64* rng) const {
  TokenGrid x = embed_clip(clip);
  for (const auto& b : blocks_) x = mhpa(x, b, training, rng, config_.dropout);
  TokenGrid out{final_norm_(x.tokens), x.grid};
  return {out.class_token(), out};
}

}  // namespace tapir
