#include "tapir/detector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace tapir {

using json = nlohmann::json;

namespace {

double inv_sigmoid(double p) { return std::log(p / (1.0 - p)); }

json cost_json(const MatchCost& c) { return {{"class", c.w_class}, {"l1", c.w_l1}, {"giou", c.w_giou}}; }

MatchCost cost_from(const json& j) {
  MatchCost c;
  c.w_class = j.at("class").get<double>();
  c.w_l1 = j.at("l1").get<double>();
  c.w_giou = j.at("giou").get<double>();
  return c;
}

// 2-D sine embedding of token centres, y channels then x channels.
std::vector<double> sine_embedding(const std::vector<LevelShape>& levels, int d) {
  const int half = d / 2;
  std::vector<double> out;
  for (const auto& lv : levels)
    for (int64_t i = 0; i < lv.h; ++i)
      for (int64_t j = 0; j < lv.w; ++j) {
        const double coord[2] = {(static_cast<double>(i) + 0.5) / static_cast<double>(lv.h),
                                 (static_cast<double>(j) + 0.5) / static_cast<double>(lv.w)};
        for (double c : coord)
          for (int k = 0; k < half; ++k) {
            const double t = std::pow(10000.0, 2.0 * (k / 2) / half);
            const double v = c * 2.0 * std::numbers::pi / t;
            out.push_back(k % 2 == 0 ? std::sin(v) : std::cos(v));
          }
      }
  return out;
}

Tensor ffn(const nn::Linear& a, const nn::Linear& b, const Tensor& x) { return b(nn::relu(a(x))); }

// Hungarian algorithm (potentials, shortest augmenting path) for rows <= cols.
double solve_assignment(const std::vector<std::vector<double>>& a, std::vector<int>& row_to_col) {
  const int n = static_cast<int>(a.size());
  const int m = n ? static_cast<int>(a[0].size()) : 0;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j)
        if (!used[j]) {
          const double cur = a[i0 - 1][j - 1] - u[i0] - v[j];
          if (cur < minv[j]) {
            minv[j] = cur;
            way[j] = j0;
          }
          if (minv[j] < delta) {
            delta = minv[j];
            j1 = j;
          }
        }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  row_to_col.assign(n, -1);
  double total = 0;
  for (int j = 1; j <= m; ++j)
    if (p[j]) row_to_col[p[j] - 1] = j - 1;
  for (int i = 0; i < n; ++i) total += a[i][row_to_col[i]];
  return total;
}

}  // namespace

// ---- config ----------------------------------------------------------------

std::vector<LevelShape> DetectorConfig::level_shapes() const {
  std::vector<LevelShape> out;
  int64_t h = image_height, w = image_width;
  for (int f : backbone_factors) {
    h /= f;
    w /= f;
    out.push_back({h, w});
  }
  return out;
}

void DetectorConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("detector config: " + m); };
  if (backbone_factors.empty() || backbone_factors.size() != backbone_channels.size())
    fail("backbone_factors and backbone_channels must be non-empty and of equal length");
  int64_t h = image_height, w = image_width;
  for (size_t i = 0; i < backbone_factors.size(); ++i) {
    const int f = backbone_factors[i];
    if (f < 1 || h % f || w % f)
      fail("backbone factor " + std::to_string(f) + " does not divide the " + std::to_string(h) + "x" +
           std::to_string(w) + " map at level " + std::to_string(i));
    h /= f;
    w /= f;
    if (backbone_channels[i] < 1) fail("backbone_channels must be positive");
  }
  if (d_model < 4 || d_model % 2) fail("d_model must be even and >= 4");
  if (heads < 1 || d_model % heads) fail("heads must divide d_model");
  if (enc_points < 1 || dec_points < 1) fail("sampling points must be positive");
  if (enc_layers < 0 || dec_layers < 1) fail("need at least one decoder layer");
  if (ffn_dim < 1) fail("ffn_dim must be positive");
  if (num_queries < 1) fail("num_queries must be positive");
  if (num_classes < 1) fail("num_classes must be positive");
  if (!(eos_coef > 0)) fail("eos_coef must be positive");
}

json to_json(const DetectorConfig& c) {
  return {{"image_height", c.image_height},
          {"image_width", c.image_width},
          {"backbone_factors", c.backbone_factors},
          {"backbone_channels", c.backbone_channels},
          {"d_model", c.d_model},
          {"heads", c.heads},
          {"enc_points", c.enc_points},
          {"dec_points", c.dec_points},
          {"enc_layers", c.enc_layers},
          {"dec_layers", c.dec_layers},
          {"ffn_dim", c.ffn_dim},
          {"num_queries", c.num_queries},
          {"num_classes", c.num_classes},
          {"match_cost", cost_json(c.cost)},
          {"loss_weights", cost_json(c.loss_weights)},
          {"eos_coef", c.eos_coef}};
}

DetectorConfig detector_config_from_json(const json& j) {
  DetectorConfig c;
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "image_height") c.image_height = v.get<int>();
      else if (k == "image_width") c.image_width = v.get<int>();
      else if (k == "backbone_factors") c.backbone_factors = v.get<std::vector<int>>();
      else if (k == "backbone_channels") c.backbone_channels = v.get<std::vector<int>>();
      else if (k == "d_model") c.d_model = v.get<int>();
      else if (k == "heads") c.heads = v.get<int>();
      else if (k == "enc_points") c.enc_points = v.get<int>();
      else if (k == "dec_points") c.dec_points = v.get<int>();
      else if (k == "enc_layers") c.enc_layers = v.get<int>();
      else if (k == "dec_layers") c.dec_layers = v.get<int>();
      else if (k == "ffn_dim") c.ffn_dim = v.get<int>();
      else if (k == "num_queries") c.num_queries = v.get<int>();
      else if (k == "num_classes") c.num_classes = v.get<int>();
      else if (k == "match_cost") c.cost = cost_from(v);
      else if (k == "loss_weights") c.loss_weights = cost_from(v);
      else if (k == "eos_coef") c.eos_coef = v.get<double>();
      else throw std::invalid_argument("detector config: unknown key '" + k + "'");
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("detector config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- deformable attention --------------------------------------------------

DeformAttnParams make_deform_attn(nn::ParamStore& ps, const std::string& name, int d_model, int heads, int levels,
                                  int points, std::mt19937_64& rng) {
  DeformAttnParams p;
  p.heads = heads;
  p.levels = levels;
  p.points = points;
  const int64_t n_off = static_cast<int64_t>(heads) * levels * points * 2;
  const int64_t n_w = static_cast<int64_t>(heads) * levels * points;
  // Offsets start at zero weight with a bias fanning each head out in its own
  // direction, point k reaching k+1 units.
  std::vector<double> bias;
  for (int h = 0; h < heads; ++h) {
    const double theta = 2.0 * std::numbers::pi * h / heads;
    double gx = std::cos(theta), gy = std::sin(theta);
    const double mx = std::max(std::abs(gx), std::abs(gy));
    gx /= mx;
    gy /= mx;
    for (int l = 0; l < levels; ++l)
      for (int k = 0; k < points; ++k) {
        bias.push_back(gx * (k + 1));
        bias.push_back(gy * (k + 1));
      }
  }
  p.sampling_offsets.weight = ps.add_constant(name + ".sampling_offsets.weight", {d_model, n_off}, 0.0);
  p.sampling_offsets.bias = ps.add(name + ".sampling_offsets.bias", {n_off}, bias);
  p.attention_weights.weight = ps.add_constant(name + ".attention_weights.weight", {d_model, n_w}, 0.0);
  p.attention_weights.bias = ps.add_constant(name + ".attention_weights.bias", {n_w}, 0.0);
  p.value_proj = nn::make_linear(ps, name + ".value_proj", d_model, d_model, rng);
  p.output_proj = nn::make_linear(ps, name + ".output_proj", d_model, d_model, rng);
  return p;
}

Tensor deformable_attention(const Tensor& query, const Tensor& reference, const Tensor& input,
                            const std::vector<LevelShape>& levels, const DeformAttnParams& p,
                            std::vector<double>* weights_out) {
  if (query.rank() != 3 || input.rank() != 3 || query.dim(0) != input.dim(0))
    throw std::invalid_argument("deformable_attention: query " + nn::shape_str(query.shape()) + " and input " +
                                nn::shape_str(input.shape()) + " must be [B, N, d] with the same batch");
  if (static_cast<int>(levels.size()) != p.levels)
    throw std::invalid_argument("deformable_attention: expected " + std::to_string(p.levels) + " levels, got " +
                                std::to_string(levels.size()));
  const int64_t B = query.dim(0), Nq = query.dim(1);
  const Tensor value = p.value_proj(input);
  const Tensor off = nn::reshape(p.sampling_offsets(query), {B, Nq, p.heads, p.levels, p.points, 2});
  const Tensor logits = nn::reshape(p.attention_weights(query), {B, Nq, p.heads, int64_t{p.levels} * p.points});
  const Tensor w = nn::reshape(nn::softmax_last(logits), {B, Nq, p.heads, p.levels, p.points});
  if (weights_out) *weights_out = w.to_vector();
  const Tensor loc = nn::deform_locations(reference, off, levels);
  return p.output_proj(nn::ms_deform_sample(value, levels, loc, w));
}

Tensor refine_boxes(const Tensor& prev_boxes, const Tensor& delta) {
  return nn::sigmoid(nn::add(nn::inverse_sigmoid(prev_boxes), delta));
}

GroundTruth ground_truth_of(const KeyframeAnnotation& kf) {
  GroundTruth gt;
  for (const auto& inst : kf.instances) {
    gt.classes.push_back(inst.instrument_id);
    gt.boxes.push_back(to_center(inst.box));
  }
  return gt;
}

// ---- model -----------------------------------------------------------------

Detector::Detector(const DetectorConfig& config, nn::ParamStore& ps, const std::string& prefix,
                   std::mt19937_64& rng)
    : config_(config) {
  config_.validate();
  const auto& c = config_;
  const int L = static_cast<int>(c.backbone_factors.size());
  const auto levels = c.level_shapes();
  int64_t in_ch = 3;
  for (int l = 0; l < L; ++l) {
    const int f = c.backbone_factors[static_cast<size_t>(l)];
    const int ch = c.backbone_channels[static_cast<size_t>(l)];
    const std::string n = prefix + "backbone." + std::to_string(l);
    backbone_.push_back(nn::make_linear(ps, n, in_ch * f * f, ch, rng));
    input_proj_.push_back(nn::make_linear(ps, prefix + "input_proj." + std::to_string(l), ch, c.d_model, rng));
    input_norm_.push_back(nn::make_layer_norm(ps, prefix + "input_norm." + std::to_string(l), c.d_model));
    in_ch = ch;
  }
  level_embed_ = ps.add_normal(prefix + "level_embed", {L, c.d_model}, 1.0, rng);

  const auto sine = sine_embedding(levels, c.d_model);
  const int64_t S = static_cast<int64_t>(sine.size()) / c.d_model;
  pos_sine_ = Tensor::from({S, c.d_model}, sine);
  std::vector<double> centres;
  for (const auto& lv : levels)
    for (int64_t i = 0; i < lv.h; ++i)
      for (int64_t j = 0; j < lv.w; ++j) {
        centres.push_back((static_cast<double>(j) + 0.5) / static_cast<double>(lv.w));
        centres.push_back((static_cast<double>(i) + 0.5) / static_cast<double>(lv.h));
      }
  enc_ref_ = Tensor::from({S, 2}, centres);

  for (int i = 0; i < c.enc_layers; ++i) {
    const std::string n = prefix + "encoder." + std::to_string(i);
    EncoderLayer e;
    e.attn = make_deform_attn(ps, n + ".attn", c.d_model, c.heads, L, c.enc_points, rng);
    e.norm1 = nn::make_layer_norm(ps, n + ".norm1", c.d_model);
    e.norm2 = nn::make_layer_norm(ps, n + ".norm2", c.d_model);
    e.ffn1 = nn::make_linear(ps, n + ".ffn1", c.d_model, c.ffn_dim, rng);
    e.ffn2 = nn::make_linear(ps, n + ".ffn2", c.ffn_dim, c.d_model, rng);
    enc_.push_back(e);
  }
  for (int i = 0; i < c.dec_layers; ++i) {
    const std::string n = prefix + "decoder." + std::to_string(i);
    DecoderLayer d;
    d.self_q = nn::make_linear(ps, n + ".self_attn.q", c.d_model, c.d_model, rng);
    d.self_k = nn::make_linear(ps, n + ".self_attn.k", c.d_model, c.d_model, rng);
    d.self_v = nn::make_linear(ps, n + ".self_attn.v", c.d_model, c.d_model, rng);
    d.self_out = nn::make_linear(ps, n + ".self_attn.out", c.d_model, c.d_model, rng);
    d.cross = make_deform_attn(ps, n + ".cross_attn", c.d_model, c.heads, L, c.dec_points, rng);
    d.norm1 = nn::make_layer_norm(ps, n + ".norm1", c.d_model);
    d.norm2 = nn::make_layer_norm(ps, n + ".norm2", c.d_model);
    d.norm3 = nn::make_layer_norm(ps, n + ".norm3", c.d_model);
    d.ffn1 = nn::make_linear(ps, n + ".ffn1", c.d_model, c.ffn_dim, rng);
    d.ffn2 = nn::make_linear(ps, n + ".ffn2", c.ffn_dim, c.d_model, rng);
    d.class_head = nn::make_linear(ps, n + ".class_head", c.d_model, c.num_classes + 1, rng);
    d.box_head[0] = nn::make_linear(ps, n + ".box_head.0", c.d_model, c.d_model, rng);
    d.box_head[1] = nn::make_linear(ps, n + ".box_head.1", c.d_model, c.d_model, rng);
    // zero last layer: every layer starts by keeping its reference box
    d.box_head[2].weight = ps.add_constant(n + ".box_head.2.weight", {c.d_model, 4}, 0.0);
    d.box_head[2].bias = ps.add_constant(n + ".box_head.2.bias", {4}, 0.0);
    dec_.push_back(d);
  }

  const int64_t N = c.num_queries;
  query_content_ = ps.add_normal(prefix + "query.content", {N, c.d_model}, 1.0, rng);
  query_pos_ = ps.add_normal(prefix + "query.pos", {N, c.d_model}, 1.0, rng);
  // initial reference boxes tile the image
  const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(N))));
  const int rows = static_cast<int>((N + cols - 1) / cols);
  std::vector<double> ref;
  for (int64_t q = 0; q < N; ++q) {
    ref.push_back(inv_sigmoid((static_cast<double>(q % cols) + 0.5) / cols));
    ref.push_back(inv_sigmoid((static_cast<double>(q / cols) + 0.5) / rows));
    ref.push_back(inv_sigmoid(0.2));
    ref.push_back(inv_sigmoid(0.2));
  }
  query_ref_ = ps.add(prefix + "query.reference", {N, 4}, ref);
}

FeaturePyramid Detector::pyramid(const Tensor& images) const {
  const auto& c = config_;
  if (images.rank() != 4 || images.dim(1) != c.image_height || images.dim(2) != c.image_width || images.dim(3) != 3)
    throw std::invalid_argument("detector: expected images [B, " + std::to_string(c.image_height) + ", " +
                                std::to_string(c.image_width) + ", 3], got " + nn::shape_str(images.shape()));
  const int64_t B = images.dim(0);
  FeaturePyramid out;
  out.levels = c.level_shapes();
  std::vector<Tensor> flat, pos;
  Tensor x = nn::reshape(images, {B, 1, c.image_height, c.image_width, 3});
  int64_t start = 0;
  for (size_t l = 0; l < backbone_.size(); ++l) {
    const int64_t f = c.backbone_factors[l];
    const auto& lv = out.levels[l];
    Tensor feat = nn::relu(backbone_[l](nn::patchify(x, {1, f, f})));  // [B, h*w, ch]
    flat.push_back(input_norm_[l](input_proj_[l](feat)));
    const Tensor le = nn::reshape(nn::slice(level_embed_, 0, static_cast<int64_t>(l), static_cast<int64_t>(l) + 1),
                                  {c.d_model});
    pos.push_back(nn::add_bcast(nn::slice(pos_sine_, 0, start, start + lv.h * lv.w), le));
    start += lv.h * lv.w;
    x = nn::reshape(feat, {B, 1, lv.h, lv.w, feat.dim(2)});
  }
  out.value = flat.size() == 1 ? flat[0] : nn::concat(flat, 1);
  out.pos = pos.size() == 1 ? pos[0] : nn::concat(pos, 0);
  return out;
}

DetectorOutput Detector::forward(const Tensor& images) const {
  const auto& c = config_;
  const FeaturePyramid pyr = pyramid(images);
  const int64_t B = images.dim(0);

  Tensor memory = pyr.value;
  const Tensor enc_ref = nn::repeat_batch(enc_ref_, B);
  for (const auto& e : enc_) {
    const Tensor a = deformable_attention(nn::add_bcast(memory, pyr.pos), enc_ref, memory, pyr.levels, e.attn);
    memory = e.norm1(nn::add(memory, a));
    memory = e.norm2(nn::add(memory, ffn(e.ffn1, e.ffn2, memory)));
  }

  DetectorOutput out;
  Tensor tgt = nn::repeat_batch(query_content_, B);
  Tensor ref = nn::repeat_batch(nn::sigmoid(query_ref_), B);
  for (const auto& d : dec_) {
    const Tensor qk = nn::add_bcast(tgt, query_pos_);
    const Tensor sa = d.self_out(nn::multi_head_attention(d.self_q(qk), d.self_k(qk), d.self_v(tgt), c.heads));
    tgt = d.norm1(nn::add(tgt, sa));
    const Tensor ca = deformable_attention(nn::add_bcast(tgt, query_pos_), ref, memory, pyr.levels, d.cross);
    tgt = d.norm2(nn::add(tgt, ca));
    tgt = d.norm3(nn::add(tgt, ffn(d.ffn1, d.ffn2, tgt)));
    out.logits.push_back(d.class_head(tgt));
    const Tensor delta = d.box_head[2](nn::relu(d.box_head[1](nn::relu(d.box_head[0](tgt)))));
    const Tensor box = refine_boxes(ref, delta);
    out.boxes.push_back(box);
    ref = box.detach();
  }
  out.features = tgt;
  return out;
}

// ---- matching --------------------------------------------------------------

std::vector<int> linear_assignment(const std::vector<std::vector<double>>& cost, double* total) {
  const size_t n = cost.size();
  if (n == 0) {
    if (total) *total = 0;
    return {};
  }
  const size_t m = cost[0].size();
  for (const auto& row : cost) {
    if (row.size() != m) throw std::invalid_argument("linear_assignment: ragged cost matrix");
    for (double v : row)
      if (!std::isfinite(v)) throw std::invalid_argument("linear_assignment: non-finite cost");
  }
  if (n > m)
    throw std::invalid_argument("linear_assignment: " + std::to_string(n) + " rows exceed " + std::to_string(m) +
                                " columns");
  std::vector<int> best;
  const double opt = solve_assignment(cost, best);
  double scale = 1.0;
  for (const auto& row : cost)
    for (double v : row) scale = std::max(scale, std::abs(v));
  const double tol = 1e-9 * scale * static_cast<double>(n);

  // Fix rows in order to the smallest column that still admits an optimum.
  std::vector<int> chosen;
  std::vector<char> col_used(m, 0);
  double fixed_cost = 0;
  for (size_t i = 0; i < n; ++i) {
    bool placed = false;
    for (size_t j = 0; j < m && !placed; ++j) {
      if (col_used[j]) continue;
      std::vector<size_t> free_cols;
      for (size_t k = 0; k < m; ++k)
        if (!col_used[k] && k != j) free_cols.push_back(k);
      std::vector<std::vector<double>> sub;
      for (size_t r = i + 1; r < n; ++r) {
        std::vector<double> row;
        for (size_t k : free_cols) row.push_back(cost[r][k]);
        sub.push_back(std::move(row));
      }
      std::vector<int> tmp;
      const double rest = sub.empty() ? 0.0 : solve_assignment(sub, tmp);
      if (fixed_cost + cost[i][j] + rest <= opt + tol) {
        chosen.push_back(static_cast<int>(j));
        col_used[j] = 1;
        fixed_cost += cost[i][j];
        placed = true;
      }
    }
    if (!placed) return best;  // numerical corner: fall back to the solver's optimum
  }
  if (total) *total = fixed_cost;
  return chosen;
}

double generalized_iou(const CenterBox& a, const CenterBox& b) {
  const double ax1 = a.cx - a.w / 2, ay1 = a.cy - a.h / 2, ax2 = a.cx + a.w / 2, ay2 = a.cy + a.h / 2;
  const double bx1 = b.cx - b.w / 2, by1 = b.cy - b.h / 2, bx2 = b.cx + b.w / 2, by2 = b.cy + b.h / 2;
  const double iw = std::max(0.0, std::min(ax2, bx2) - std::max(ax1, bx1));
  const double ih = std::max(0.0, std::min(ay2, by2) - std::max(ay1, by1));
  const double inter = iw * ih;
  const double uni = a.w * a.h + b.w * b.h - inter;
  const double hull = (std::max(ax2, bx2) - std::min(ax1, bx1)) * (std::max(ay2, by2) - std::min(ay1, by1));
  const double iou = uni > 0 ? inter / uni : 0.0;
  return hull > 0 ? iou - (hull - uni) / hull : iou;
}

std::vector<std::vector<double>> matching_cost(const std::vector<double>& logits, const std::vector<double>& boxes,
                                               int num_queries, int num_classes, const GroundTruth& gt,
                                               const MatchCost& cost) {
  const size_t N = static_cast<size_t>(num_queries), K1 = static_cast<size_t>(num_classes) + 1;
  if (logits.size() != N * K1 || boxes.size() != N * 4)
    throw std::invalid_argument("matching_cost: prediction sizes do not match the query count");
  std::vector<std::vector<double>> probs(N, std::vector<double>(K1));
  for (size_t q = 0; q < N; ++q) {
    double mx = -std::numeric_limits<double>::infinity(), z = 0;
    for (size_t k = 0; k < K1; ++k) mx = std::max(mx, logits[q * K1 + k]);
    for (size_t k = 0; k < K1; ++k) z += (probs[q][k] = std::exp(logits[q * K1 + k] - mx));
    for (auto& p : probs[q]) p /= z;
  }
  std::vector<std::vector<double>> c(gt.classes.size(), std::vector<double>(N));
  for (size_t g = 0; g < gt.classes.size(); ++g) {
    const auto& t = gt.boxes[g];
    if (gt.classes[g] < 0 || gt.classes[g] >= num_classes)
      throw std::invalid_argument("matching_cost: class " + std::to_string(gt.classes[g]) + " out of range");
    for (size_t q = 0; q < N; ++q) {
      const CenterBox p{boxes[q * 4], boxes[q * 4 + 1], boxes[q * 4 + 2], boxes[q * 4 + 3]};
      const double l1 = std::abs(p.cx - t.cx) + std::abs(p.cy - t.cy) + std::abs(p.w - t.w) + std::abs(p.h - t.h);
      c[g][q] = -cost.w_class * probs[q][static_cast<size_t>(gt.classes[g])] + cost.w_l1 * l1 -
                cost.w_giou * generalized_iou(p, t);
    }
  }
  return c;
}

std::vector<std::pair<int, int>> hungarian_match(const std::vector<double>& logits, const std::vector<double>& boxes,
                                                 int num_queries, int num_classes, const GroundTruth& gt,
                                                 const MatchCost& cost) {
  if (static_cast<int>(gt.classes.size()) > num_queries)
    throw std::invalid_argument("hungarian_match: " + std::to_string(gt.classes.size()) +
                                " instances exceed " + std::to_string(num_queries) + " queries");
  const auto c = matching_cost(logits, boxes, num_queries, num_classes, gt, cost);
  const auto cols = linear_assignment(c);
  std::vector<std::pair<int, int>> out;
  for (size_t g = 0; g < cols.size(); ++g) out.emplace_back(static_cast<int>(g), cols[g]);
  return out;
}

// ---- loss ------------------------------------------------------------------

DetectionLoss detection_loss(const DetectorOutput& out, const std::vector<GroundTruth>& gts, const DetectorConfig& cfg,
                             std::vector<std::vector<std::vector<std::pair<int, int>>>> assignments) {
  const size_t layers = out.logits.size();
  if (layers == 0) throw std::invalid_argument("detection_loss: no decoder outputs");
  const int64_t B = out.logits[0].dim(0), N = out.logits[0].dim(1), K1 = out.logits[0].dim(2);
  if (static_cast<int64_t>(gts.size()) != B)
    throw std::invalid_argument("detection_loss: " + std::to_string(gts.size()) + " targets for batch " +
                                std::to_string(B));
  const int K = static_cast<int>(K1) - 1;
  if (assignments.empty()) {
    for (size_t l = 0; l < layers; ++l) {
      std::vector<std::vector<std::pair<int, int>>> per_image;
      const auto& lv = out.logits[l].values();
      const auto& bv = out.boxes[l].values();
      for (int64_t b = 0; b < B; ++b) {
        const std::vector<double> lg(lv.begin() + b * N * K1, lv.begin() + (b + 1) * N * K1);
        const std::vector<double> bx(bv.begin() + b * N * 4, bv.begin() + (b + 1) * N * 4);
        per_image.push_back(
            hungarian_match(lg, bx, static_cast<int>(N), K, gts[static_cast<size_t>(b)], cfg.cost));
      }
      assignments.push_back(std::move(per_image));
    }
  }
  if (assignments.size() != layers) throw std::invalid_argument("detection_loss: assignment count mismatch");

  int64_t num_boxes = 0;
  for (const auto& g : gts) num_boxes += static_cast<int64_t>(g.classes.size());
  const double norm = 1.0 / static_cast<double>(std::max<int64_t>(1, num_boxes));

  std::vector<double> class_weights(static_cast<size_t>(K1), 1.0);
  class_weights.back() = cfg.eos_coef;
  const auto& w = cfg.loss_weights;

  DetectionLoss res;
  Tensor total;
  auto accumulate = [&total](const Tensor& t) { total = total.defined() ? nn::add(total, t) : t; };
  for (size_t l = 0; l < layers; ++l) {
    std::vector<int> targets(static_cast<size_t>(B * N), K);
    std::vector<int64_t> rows;
    std::vector<double> gt_boxes;
    for (int64_t b = 0; b < B; ++b)
      for (const auto& [g, p] : assignments[l][static_cast<size_t>(b)]) {
        const auto& gt = gts[static_cast<size_t>(b)];
        targets[static_cast<size_t>(b * N + p)] = gt.classes[static_cast<size_t>(g)];
        rows.push_back(b * N + p);
        const auto& t = gt.boxes[static_cast<size_t>(g)];
        gt_boxes.insert(gt_boxes.end(), {t.cx, t.cy, t.w, t.h});
      }
    const Tensor ce =
        nn::scale(nn::cross_entropy(nn::reshape(out.logits[l], {B * N, K1}), targets, class_weights), w.w_class);
    res.classification += ce.item();
    accumulate(ce);
    if (!rows.empty()) {
      const int64_t M = static_cast<int64_t>(rows.size());
      const Tensor pred = nn::index_rows(out.boxes[l], rows);
      const Tensor target = Tensor::from({M, 4}, gt_boxes);
      const Tensor l1 = nn::scale(nn::sum(nn::abs(nn::sub(pred, target))), w.w_l1 * norm);
      const Tensor giou = nn::scale(nn::add_scalar(nn::scale(nn::sum(nn::generalized_iou(pred, target)), -1.0),
                                                   static_cast<double>(M)),
                                    w.w_giou * norm);
      res.l1 += l1.item();
      res.giou += giou.item();
      accumulate(l1);
      accumulate(giou);
    }
  }
  res.total = total;
  res.assignments = std::move(assignments);
  return res;
}

// ---- inference -------------------------------------------------------------

std::vector<Detection> select_detections(const DetectorOutput& out, int b, double threshold) {
  const Tensor& logits = out.logits.back();
  const Tensor& boxes = out.boxes.back();
  const int64_t N = logits.dim(1), K1 = logits.dim(2), D = out.features.dim(2);
  if (K1 - 1 != kNumInstruments)
    throw std::invalid_argument("select_detections: expected " + std::to_string(kNumInstruments) + " classes");
  std::vector<Detection> dets;
  for (int64_t q = 0; q < N; ++q) {
    const double* lg = logits.values().data() + (b * N + q) * K1;
    double mx = -std::numeric_limits<double>::infinity(), z = 0;
    for (int64_t k = 0; k < K1; ++k) mx = std::max(mx, lg[k]);
    std::vector<double> p(static_cast<size_t>(K1));
    for (int64_t k = 0; k < K1; ++k) z += (p[static_cast<size_t>(k)] = std::exp(lg[k] - mx));
    Detection d;
    for (int k = 0; k < kNumInstruments; ++k) {
      d.class_scores[static_cast<size_t>(k)] = p[static_cast<size_t>(k)] / z;
      d.confidence = std::max(d.confidence, d.class_scores[static_cast<size_t>(k)]);
    }
    if (d.confidence < threshold) continue;
    const double* bx = boxes.values().data() + (b * N + q) * 4;
    BoundingBox c = to_corners({bx[0], bx[1], bx[2], bx[3]});
    c.x1 = std::clamp(c.x1, 0.0, 1.0);
    c.y1 = std::clamp(c.y1, 0.0, 1.0);
    c.x2 = std::clamp(c.x2, 0.0, 1.0);
    c.y2 = std::clamp(c.y2, 0.0, 1.0);
    d.box = c;
    const double* f = out.features.values().data() + (b * N + q) * D;
    d.box_feature.assign(f, f + D);
    d.query = static_cast<int>(q);
    dets.push_back(std::move(d));
  }
  return dets;
}

std::vector<Detection> infer(const Detector& detector, const Tensor& image, double threshold) {
  nn::NoGradGuard guard;
  const Tensor batch = image.rank() == 3 ? nn::reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)}) : image;
  if (batch.dim(0) != 1) throw std::invalid_argument("infer: expects a single image");
  return select_detections(detector.forward(batch), 0, threshold);
}

}  // namespace tapir
