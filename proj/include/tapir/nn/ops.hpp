#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <vector>

#include "tapir/nn/tensor.hpp"

namespace tapir::nn {

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
// y's shape must equal the trailing dims of x; y is broadcast over the leading ones.
Tensor add_bcast(const Tensor& x, const Tensor& y);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor abs(const Tensor& x);
// log(x / (1 - x)) with x clamped to [eps, 1 - eps].
Tensor inverse_sigmoid(const Tensor& x, double eps = 1e-5);
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng, bool training);

// ---- shape -----------------------------------------------------------------

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int64_t begin, int64_t end);
// Views x as rows of its last dimension and gathers the listed rows.
Tensor index_rows(const Tensor& x, const std::vector<int64_t>& rows);
// Stacks `batch` copies of x along a new leading axis.
Tensor repeat_batch(const Tensor& x, int64_t batch);

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mean_axis(const Tensor& x, int axis);

// ---- dense -----------------------------------------------------------------

// y = x W + b over the last dimension of x. W is [in, out]; b may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor softmax_last(const Tensor& x);
Tensor log_softmax_last(const Tensor& x);

// ---- video / attention -----------------------------------------------------

struct Grid3 {
  int64_t t = 1, h = 1, w = 1;
  int64_t volume() const { return t * h * w; }
  friend bool operator==(const Grid3&, const Grid3&) = default;
};

// [B, T, H, W, C] -> [B, (T/pt)(H/ph)(W/pw), pt*ph*pw*C], tokens in (t, h, w)
// raster order, features in (dt, dh, dw, c) order.
Tensor patchify(const Tensor& x, Grid3 patch);

// Output grid size of strided pooling: ceil(dim / stride) per axis.
Grid3 pooled_grid(Grid3 in, Grid3 stride);

// Strided pooling of the grid tokens of x [B, prefix + in.volume(), C]. The
// first `prefix` tokens (class token) pass through untouched. Without weights
// each output is the mean over its (possibly truncated) window; with
// weights [stride.volume(), C] it is the weighted sum over the valid window.
Tensor pool_tokens(const Tensor& x, Grid3 in, Grid3 stride, int64_t prefix, const Tensor* weights = nullptr);

// Scaled dot-product attention over `heads` channel groups. q [B, Nq, C],
// k and v [B, Nk, C]. If probs_out is given it receives the attention
// probabilities laid out as [B, heads, Nq, Nk].
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, int64_t heads,
                            std::vector<double>* probs_out = nullptr);

struct LevelShape {
  int64_t h = 0, w = 0;
};

// Sampling locations for multi-scale deformable attention.
// reference [B, Nq, 2] (cx, cy) or [B, Nq, 4] (cx, cy, w, h);
// offsets [B, Nq, heads, L, K, 2] in grid cells (2-D reference) or in units
// of half the box size divided by K (box reference). Returns [B, Nq, heads, L, K, 2].
Tensor deform_locations(const Tensor& reference, const Tensor& offsets, const std::vector<LevelShape>& levels);

// Bilinear multi-level sampling with zero padding outside each level map.
// value [B, S, C] with S = sum of h*w over levels (raster order, level-major),
// locations [B, Nq, heads, L, K, 2] normalized to [0,1] (x, y),
// weights [B, Nq, heads, L, K]. Head m reads channels [m*C/heads, (m+1)*C/heads).
Tensor ms_deform_sample(const Tensor& value, const std::vector<LevelShape>& levels, const Tensor& locations,
                        const Tensor& weights);

// ---- losses ----------------------------------------------------------------

// Weighted mean of -log softmax(logits)[target]; weights indexed by class
// (empty = uniform), normalized by the summed weight of the targets.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<double>& class_weights = {});
// Mean over all elements of the logistic loss; targets has logits' layout.
Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets);
// Generalized IoU of row-aligned boxes in center form: a, b [N, 4] -> [N].
Tensor generalized_iou(const Tensor& a, const Tensor& b);

}  // namespace tapir::nn
