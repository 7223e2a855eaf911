#include "tapir/nn/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace tapir::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using Strided = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CStrided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

double* grad_of(Node& self, size_t i) {
  auto& p = self.parents[i];
  return p->requires_grad ? p->grad.data() : nullptr;
}

const double* value_of(Node& self, size_t i) { return self.parents[i]->value.data(); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

int norm_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw std::out_of_range("axis out of range");
  return axis;
}

template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
  const auto& xv = x.values();
  Buffer out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_result(x.shape(), std::move(out), {x}, [df](Node& self) {
    double* gx = grad_of(self, 0);
    const double* xv = value_of(self, 0);
    for (size_t i = 0; i < self.value.size(); ++i) gx[i] += self.grad[i] * df(xv[i], self.value[i]);
  });
}

}  // namespace

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Buffer out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] += b.values()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (size_t k = 0; k < 2; ++k)
      if (double* g = grad_of(self, k))
        for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Buffer out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] -= b.values()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (double* g = grad_of(self, 0))
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (double* g = grad_of(self, 1))
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Buffer out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= b.values()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const double* av = value_of(self, 0);
    const double* bv = value_of(self, 1);
    if (double* g = grad_of(self, 0))
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    if (double* g = grad_of(self, 1))
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor add_bcast(const Tensor& x, const Tensor& y) {
  const int rx = x.rank(), ry = y.rank();
  if (ry > rx || !std::equal(y.shape().begin(), y.shape().end(), x.shape().end() - ry))
    throw std::invalid_argument("add_bcast: " + shape_str(y.shape()) + " is not a suffix of " + shape_str(x.shape()));
  const size_t inner = static_cast<size_t>(y.numel());
  Buffer out(x.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] += y.values()[i % inner];
  return make_result(x.shape(), std::move(out), {x, y}, [inner](Node& self) {
    if (double* g = grad_of(self, 0))
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (double* g = grad_of(self, 1))
      for (size_t i = 0; i < self.grad.size(); ++i) g[i % inner] += self.grad[i];
  });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) { return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v); });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor abs(const Tensor& x) {
  return unary(x, [](double v) { return std::fabs(v); },
               [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor inverse_sigmoid(const Tensor& x, double eps) {
  return unary(
      x,
      [eps](double v) {
        v = std::clamp(v, 0.0, 1.0);
        const double a = std::max(v, eps), b = std::max(1.0 - v, eps);
        return std::log(a / b);
      },
      [eps](double v, double) {
        if (v < eps || v > 1.0 - eps) return 0.0;
        return 1.0 / v + 1.0 / (1.0 - v);
      });
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng, bool training) {
  if (!training || p <= 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  Buffer mask(static_cast<size_t>(x.numel()));
  for (auto& m : mask) m = keep(rng) ? 1.0 / (1.0 - p) : 0.0;
  return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

// ---- shape -----------------------------------------------------------------

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (numel_of(shape) != x.numel())
    throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return make_result(shape, x.values(), {x}, [](Node& self) {
    if (double* g = grad_of(self, 0))
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw std::invalid_argument("concat: no inputs");
  const int r = xs[0].rank();
  axis = norm_axis(axis, r);
  Shape out_shape = xs[0].shape();
  out_shape[static_cast<size_t>(axis)] = 0;
  for (const auto& t : xs) {
    if (t.rank() != r) throw std::invalid_argument("concat: rank mismatch");
    for (int d = 0; d < r; ++d)
      if (d != axis && t.shape()[static_cast<size_t>(d)] != xs[0].shape()[static_cast<size_t>(d)])
        throw std::invalid_argument("concat: shape mismatch " + shape_str(t.shape()) + " vs " +
                                    shape_str(xs[0].shape()));
    out_shape[static_cast<size_t>(axis)] += t.shape()[static_cast<size_t>(axis)];
  }
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<size_t>(d)];
  for (int d = axis + 1; d < r; ++d) inner *= out_shape[static_cast<size_t>(d)];
  const int64_t out_row = out_shape[static_cast<size_t>(axis)] * inner;

  std::vector<int64_t> widths;
  Buffer out(static_cast<size_t>(numel_of(out_shape)));
  int64_t off = 0;
  for (const auto& t : xs) {
    const int64_t wdt = t.shape()[static_cast<size_t>(axis)] * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(t.values().begin() + o * wdt, wdt, out.begin() + o * out_row + off);
    widths.push_back(wdt);
    off += wdt;
  }
  return make_result(out_shape, std::move(out), xs, [widths, outer, out_row](Node& self) {
    int64_t off = 0;
    for (size_t k = 0; k < widths.size(); ++k) {
      if (double* g = grad_of(self, k))
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t i = 0; i < widths[k]; ++i) g[o * widths[k] + i] += self.grad[static_cast<size_t>(o * out_row + off + i)];
      off += widths[k];
    }
  });
}

Tensor slice(const Tensor& x, int axis, int64_t begin, int64_t end) {
  const int r = x.rank();
  axis = norm_axis(axis, r);
  const int64_t n = x.shape()[static_cast<size_t>(axis)];
  if (begin < 0 || end > n || begin >= end)
    throw std::out_of_range("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                            shape_str(x.shape()));
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.shape()[static_cast<size_t>(d)];
  for (int d = axis + 1; d < r; ++d) inner *= x.shape()[static_cast<size_t>(d)];
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = end - begin;
  const int64_t in_row = n * inner, wdt = (end - begin) * inner, off = begin * inner;
  Buffer out(static_cast<size_t>(outer * wdt));
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(x.values().begin() + o * in_row + off, wdt, out.begin() + o * wdt);
  return make_result(out_shape, std::move(out), {x}, [outer, in_row, wdt, off](Node& self) {
    if (double* g = grad_of(self, 0))
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < wdt; ++i) g[o * in_row + off + i] += self.grad[static_cast<size_t>(o * wdt + i)];
  });
}

Tensor index_rows(const Tensor& x, const std::vector<int64_t>& rows) {
  const int64_t c = x.shape().back();
  const int64_t nrows = x.numel() / c;
  Buffer out(rows.size() * static_cast<size_t>(c));
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= nrows) throw std::out_of_range("index_rows: row " + std::to_string(rows[i]));
    std::copy_n(x.values().begin() + rows[i] * c, c, out.begin() + static_cast<int64_t>(i) * c);
  }
  return make_result({static_cast<int64_t>(rows.size()), c}, std::move(out), {x}, [rows, c](Node& self) {
    if (double* g = grad_of(self, 0))
      for (size_t i = 0; i < rows.size(); ++i)
        for (int64_t j = 0; j < c; ++j) g[rows[i] * c + j] += self.grad[i * static_cast<size_t>(c) + static_cast<size_t>(j)];
  });
}

Tensor repeat_batch(const Tensor& x, int64_t batch) {
  Shape shape{batch};
  shape.insert(shape.end(), x.shape().begin(), x.shape().end());
  const size_t n = static_cast<size_t>(x.numel());
  Buffer out;
  out.reserve(n * static_cast<size_t>(batch));
  for (int64_t b = 0; b < batch; ++b) out.insert(out.end(), x.values().begin(), x.values().end());
  return make_result(shape, std::move(out), {x}, [n](Node& self) {
    if (double* g = grad_of(self, 0))
      for (size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
  });
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x) {
  const double s = std::accumulate(x.values().begin(), x.values().end(), 0.0);
  return make_result({}, {s}, {x}, [](Node& self) {
    if (double* g = grad_of(self, 0)) {
      const size_t n = self.parents[0]->value.size();
      for (size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor mean_axis(const Tensor& x, int axis) {
  const int r = x.rank();
  axis = norm_axis(axis, r);
  int64_t outer = 1, inner = 1;
  const int64_t n = x.shape()[static_cast<size_t>(axis)];
  for (int d = 0; d < axis; ++d) outer *= x.shape()[static_cast<size_t>(d)];
  for (int d = axis + 1; d < r; ++d) inner *= x.shape()[static_cast<size_t>(d)];
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + axis);
  Buffer out(static_cast<size_t>(outer * inner), 0.0);
  const auto& xv = x.values();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t k = 0; k < n; ++k)
      for (int64_t i = 0; i < inner; ++i) out[static_cast<size_t>(o * inner + i)] += xv[static_cast<size_t>((o * n + k) * inner + i)];
  for (auto& v : out) v /= static_cast<double>(n);
  return make_result(out_shape, std::move(out), {x}, [outer, inner, n](Node& self) {
    if (double* g = grad_of(self, 0))
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t k = 0; k < n; ++k)
          for (int64_t i = 0; i < inner; ++i)
            g[(o * n + k) * inner + i] += self.grad[static_cast<size_t>(o * inner + i)] / static_cast<double>(n);
  });
}

// ---- dense -----------------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2) throw std::invalid_argument("linear: weight must be 2-D, got " + shape_str(w.shape()));
  const int64_t in = w.dim(0), outd = w.dim(1);
  if (x.rank() < 1 || x.shape().back() != in)
    throw std::invalid_argument("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                                shape_str(w.shape()));
  if (b.defined() && (b.rank() != 1 || b.dim(0) != outd))
    throw std::invalid_argument("linear: bias shape " + shape_str(b.shape()));
  const int64_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outd;
  Buffer out(static_cast<size_t>(rows * outd));
  MapMat y(out.data(), rows, outd);
  y.noalias() = CMapMat(x.values().data(), rows, in) * CMapMat(w.values().data(), in, outd);
  if (b.defined()) y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.values().data(), outd);
  std::vector<Tensor> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return make_result(out_shape, std::move(out), std::move(parents), [rows, in, outd](Node& self) {
    CMapMat gy(self.grad.data(), rows, outd);
    if (double* gx = grad_of(self, 0)) MapMat(gx, rows, in).noalias() += gy * CMapMat(value_of(self, 1), in, outd).transpose();
    if (double* gw = grad_of(self, 1)) MapMat(gw, in, outd).noalias() += CMapMat(value_of(self, 0), rows, in).transpose() * gy;
    if (self.parents.size() > 2)
      if (double* gb = grad_of(self, 2)) Eigen::Map<Eigen::RowVectorXd>(gb, outd) += gy.colwise().sum();
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const int64_t c = x.shape().back();
  if (gamma.numel() != c || beta.numel() != c) throw std::invalid_argument("layer_norm: parameter size mismatch");
  const int64_t rows = x.numel() / c;
  Buffer out(static_cast<size_t>(x.numel()));
  Buffer xhat(out.size()), inv_std(static_cast<size_t>(rows));
  const auto& xv = x.values();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * c;
    double mu = 0;
    for (int64_t j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<double>(c);
    double var = 0;
    for (int64_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = is;
    for (int64_t j = 0; j < c; ++j) {
      const size_t k = static_cast<size_t>(r * c + j);
      xhat[k] = (xr[j] - mu) * is;
      out[k] = xhat[k] * gamma.values()[static_cast<size_t>(j)] + beta.values()[static_cast<size_t>(j)];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std), rows, c](Node& self) {
                       const double* gam = value_of(self, 1);
                       double* gx = grad_of(self, 0);
                       double* gg = grad_of(self, 1);
                       double* gb = grad_of(self, 2);
                       for (int64_t r = 0; r < rows; ++r) {
                         const double* dy = self.grad.data() + r * c;
                         const double* xh = xhat.data() + r * c;
                         double s1 = 0, s2 = 0;
                         for (int64_t j = 0; j < c; ++j) {
                           const double d = dy[j] * gam[j];
                           s1 += d;
                           s2 += d * xh[j];
                           if (gg) gg[j] += dy[j] * xh[j];
                           if (gb) gb[j] += dy[j];
                         }
                         if (gx) {
                           const double is = inv_std[static_cast<size_t>(r)] / static_cast<double>(c);
                           for (int64_t j = 0; j < c; ++j)
                             gx[r * c + j] += is * (static_cast<double>(c) * dy[j] * gam[j] - s1 - xh[j] * s2);
                         }
                       }
                     });
}

Tensor softmax_last(const Tensor& x) {
  const int64_t c = x.shape().back();
  const int64_t rows = x.numel() / c;
  Buffer out(x.values());
  for (int64_t r = 0; r < rows; ++r) {
    double* o = out.data() + r * c;
    const double m = *std::max_element(o, o + c);
    double s = 0;
    for (int64_t j = 0; j < c; ++j) s += (o[j] = std::exp(o[j] - m));
    for (int64_t j = 0; j < c; ++j) o[j] /= s;
  }
  return make_result(x.shape(), std::move(out), {x}, [rows, c](Node& self) {
    double* gx = grad_of(self, 0);
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * c;
      const double* dy = self.grad.data() + r * c;
      double dot = 0;
      for (int64_t j = 0; j < c; ++j) dot += y[j] * dy[j];
      for (int64_t j = 0; j < c; ++j) gx[r * c + j] += y[j] * (dy[j] - dot);
    }
  });
}

Tensor log_softmax_last(const Tensor& x) {
  const int64_t c = x.shape().back();
  const int64_t rows = x.numel() / c;
  Buffer out(x.values());
  for (int64_t r = 0; r < rows; ++r) {
    double* o = out.data() + r * c;
    const double m = *std::max_element(o, o + c);
    double s = 0;
    for (int64_t j = 0; j < c; ++j) s += std::exp(o[j] - m);
    const double lse = m + std::log(s);
    for (int64_t j = 0; j < c; ++j) o[j] -= lse;
  }
  return make_result(x.shape(), std::move(out), {x}, [rows, c](Node& self) {
    double* gx = grad_of(self, 0);
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * c;
      const double* dy = self.grad.data() + r * c;
      double s = 0;
      for (int64_t j = 0; j < c; ++j) s += dy[j];
      for (int64_t j = 0; j < c; ++j) gx[r * c + j] += dy[j] - std::exp(y[j]) * s;
    }
  });
}

// ---- video / attention -----------------------------------------------------

Tensor patchify(const Tensor& x, Grid3 patch) {
  if (x.rank() != 5) throw std::invalid_argument("patchify: expected [B,T,H,W,C], got " + shape_str(x.shape()));
  const int64_t B = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3), C = x.dim(4);
  if (patch.t < 1 || patch.h < 1 || patch.w < 1 || T % patch.t || H % patch.h || W % patch.w)
    throw std::invalid_argument("patchify: input " + shape_str(x.shape()) + " not divisible by patch (" +
                                std::to_string(patch.t) + "," + std::to_string(patch.h) + "," +
                                std::to_string(patch.w) + ")");
  const int64_t gt = T / patch.t, gh = H / patch.h, gw = W / patch.w;
  const int64_t feat = patch.volume() * C;
  const int64_t ntok = gt * gh * gw;
  // index map: output element -> input element
  std::vector<int64_t> src(static_cast<size_t>(B * ntok * feat));
  size_t k = 0;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t it = 0; it < gt; ++it)
      for (int64_t ih = 0; ih < gh; ++ih)
        for (int64_t iw = 0; iw < gw; ++iw)
          for (int64_t dt = 0; dt < patch.t; ++dt)
            for (int64_t dh = 0; dh < patch.h; ++dh)
              for (int64_t dw = 0; dw < patch.w; ++dw)
                for (int64_t c = 0; c < C; ++c)
                  src[k++] = ((((b * T + it * patch.t + dt) * H + ih * patch.h + dh) * W + iw * patch.w + dw) * C) + c;
  Buffer out(src.size());
  for (size_t i = 0; i < src.size(); ++i) out[i] = x.values()[static_cast<size_t>(src[i])];
  return make_result({B, ntok, feat}, std::move(out), {x}, [src = std::move(src)](Node& self) {
    if (double* g = grad_of(self, 0))
      for (size_t i = 0; i < src.size(); ++i) g[src[i]] += self.grad[i];
  });
}

Grid3 pooled_grid(Grid3 in, Grid3 stride) {
  auto ceil_div = [](int64_t a, int64_t b) { return (a + b - 1) / b; };
  return {ceil_div(in.t, stride.t), ceil_div(in.h, stride.h), ceil_div(in.w, stride.w)};
}

Tensor pool_tokens(const Tensor& x, Grid3 in, Grid3 stride, int64_t prefix, const Tensor* weights) {
  if (x.rank() != 3 || x.dim(1) != prefix + in.volume())
    throw std::invalid_argument("pool_tokens: tokens " + shape_str(x.shape()) + " do not match grid of " +
                                std::to_string(in.volume()) + " plus " + std::to_string(prefix) + " prefix");
  if (stride.t < 1 || stride.h < 1 || stride.w < 1) throw std::invalid_argument("pool_tokens: stride must be >= 1");
  if (stride.t > in.t || stride.h > in.h || stride.w > in.w)
    throw std::invalid_argument("pool_tokens: stride (" + std::to_string(stride.t) + "," + std::to_string(stride.h) +
                                "," + std::to_string(stride.w) + ") larger than grid (" + std::to_string(in.t) + "," +
                                std::to_string(in.h) + "," + std::to_string(in.w) + ")");
  const int64_t B = x.dim(0), C = x.dim(2);
  const Grid3 out_grid = pooled_grid(in, stride);
  const int64_t nin = prefix + in.volume(), nout = prefix + out_grid.volume();
  if (weights && (weights->rank() != 2 || weights->dim(0) != stride.volume() || weights->dim(1) != C))
    throw std::invalid_argument("pool_tokens: weights must be [" + std::to_string(stride.volume()) + "," +
                                std::to_string(C) + "]");

  // For each output grid token: list of (input token, window offset).
  struct Tap {
    int64_t token, offset;
  };
  std::vector<std::vector<Tap>> taps(static_cast<size_t>(out_grid.volume()));
  for (int64_t ot = 0; ot < out_grid.t; ++ot)
    for (int64_t oh = 0; oh < out_grid.h; ++oh)
      for (int64_t ow = 0; ow < out_grid.w; ++ow) {
        auto& list = taps[static_cast<size_t>((ot * out_grid.h + oh) * out_grid.w + ow)];
        for (int64_t dt = 0; dt < stride.t; ++dt)
          for (int64_t dh = 0; dh < stride.h; ++dh)
            for (int64_t dw = 0; dw < stride.w; ++dw) {
              const int64_t t = ot * stride.t + dt, h = oh * stride.h + dh, w = ow * stride.w + dw;
              if (t < in.t && h < in.h && w < in.w)
                list.push_back({prefix + (t * in.h + h) * in.w + w, (dt * stride.h + dh) * stride.w + dw});
            }
      }

  const auto& xv = x.values();
  const double* wv = weights ? weights->values().data() : nullptr;
  Buffer out(static_cast<size_t>(B * nout * C), 0.0);
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t p = 0; p < prefix; ++p)
      std::copy_n(xv.begin() + (b * nin + p) * C, C, out.begin() + (b * nout + p) * C);
    for (size_t o = 0; o < taps.size(); ++o) {
      double* dst = out.data() + (b * nout + prefix + static_cast<int64_t>(o)) * C;
      const double inv = 1.0 / static_cast<double>(taps[o].size());
      for (const auto& tap : taps[o]) {
        const double* srcp = xv.data() + (b * nin + tap.token) * C;
        for (int64_t c = 0; c < C; ++c) dst[c] += (wv ? wv[tap.offset * C + c] : inv) * srcp[c];
      }
    }
  }
  std::vector<Tensor> parents{x};
  if (weights) parents.push_back(*weights);
  return make_result({B, nout, C}, std::move(out), std::move(parents),
                     [taps = std::move(taps), B, C, nin, nout, prefix, weighted = weights != nullptr](Node& self) {
                       double* gx = grad_of(self, 0);
                       double* gw = weighted ? grad_of(self, 1) : nullptr;
                       const double* xv = value_of(self, 0);
                       const double* wv = weighted ? value_of(self, 1) : nullptr;
                       for (int64_t b = 0; b < B; ++b) {
                         if (gx)
                           for (int64_t p = 0; p < prefix; ++p)
                             for (int64_t c = 0; c < C; ++c) gx[(b * nin + p) * C + c] += self.grad[static_cast<size_t>((b * nout + p) * C + c)];
                         for (size_t o = 0; o < taps.size(); ++o) {
                           const double* dy = self.grad.data() + (b * nout + prefix + static_cast<int64_t>(o)) * C;
                           const double inv = 1.0 / static_cast<double>(taps[o].size());
                           for (const auto& tap : taps[o]) {
                             const int64_t base = (b * nin + tap.token) * C;
                             for (int64_t c = 0; c < C; ++c) {
                               if (gx) gx[base + c] += (wv ? wv[tap.offset * C + c] : inv) * dy[c];
                               if (gw) gw[tap.offset * C + c] += xv[base + c] * dy[c];
                             }
                           }
                         }
                       }
                     });
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, int64_t heads,
                            std::vector<double>* probs_out) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || k.shape() != v.shape() || q.dim(0) != k.dim(0) ||
      q.dim(2) != k.dim(2))
    throw std::invalid_argument("attention: incompatible shapes q" + shape_str(q.shape()) + " k" +
                                shape_str(k.shape()) + " v" + shape_str(v.shape()));
  const int64_t B = q.dim(0), Nq = q.dim(1), Nk = k.dim(1), C = q.dim(2);
  if (heads < 1 || C % heads) throw std::invalid_argument("attention: channels " + std::to_string(C) +
                                                          " not divisible by heads " + std::to_string(heads));
  const int64_t d = C / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(d));
  Buffer probs(static_cast<size_t>(B * heads * Nq * Nk));
  Buffer out(static_cast<size_t>(B * Nq * C));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t h = 0; h < heads; ++h) {
      CStrided Q(q.values().data() + b * Nq * C + h * d, Nq, d, Eigen::OuterStride<>(C));
      CStrided K(k.values().data() + b * Nk * C + h * d, Nk, d, Eigen::OuterStride<>(C));
      CStrided V(v.values().data() + b * Nk * C + h * d, Nk, d, Eigen::OuterStride<>(C));
      MapMat P(probs.data() + (b * heads + h) * Nq * Nk, Nq, Nk);
      P.noalias() = (Q * K.transpose()) * scl;
      for (int64_t i = 0; i < Nq; ++i) {
        const double m = P.row(i).maxCoeff();
        P.row(i) = (P.row(i).array() - m).exp();
        P.row(i) /= P.row(i).sum();
      }
      Strided O(out.data() + b * Nq * C + h * d, Nq, d, Eigen::OuterStride<>(C));
      O.noalias() = P * V;
    }
  if (probs_out) probs_out->assign(probs.begin(), probs.end());
  return make_result({B, Nq, C}, std::move(out), {q, k, v},
                     [probs = std::move(probs), B, Nq, Nk, C, heads, d, scl](Node& self) {
                       double* gq = grad_of(self, 0);
                       double* gk = grad_of(self, 1);
                       double* gv = grad_of(self, 2);
                       RowMat dP(Nq, Nk);
                       for (int64_t b = 0; b < B; ++b)
                         for (int64_t h = 0; h < heads; ++h) {
                           CStrided Q(value_of(self, 0) + b * Nq * C + h * d, Nq, d, Eigen::OuterStride<>(C));
                           CStrided K(value_of(self, 1) + b * Nk * C + h * d, Nk, d, Eigen::OuterStride<>(C));
                           CStrided V(value_of(self, 2) + b * Nk * C + h * d, Nk, d, Eigen::OuterStride<>(C));
                           CStrided dO(self.grad.data() + b * Nq * C + h * d, Nq, d, Eigen::OuterStride<>(C));
                           CMapMat P(probs.data() + (b * heads + h) * Nq * Nk, Nq, Nk);
                           if (gv) Strided(gv + b * Nk * C + h * d, Nk, d, Eigen::OuterStride<>(C)).noalias() += P.transpose() * dO;
                           dP.noalias() = dO * V.transpose();
                           for (int64_t i = 0; i < Nq; ++i) {
                             const double dot = P.row(i).dot(dP.row(i));
                             dP.row(i) = P.row(i).cwiseProduct((dP.row(i).array() - dot).matrix());
                           }
                           if (gq) Strided(gq + b * Nq * C + h * d, Nq, d, Eigen::OuterStride<>(C)).noalias() += (dP * K) * scl;
                           if (gk) Strided(gk + b * Nk * C + h * d, Nk, d, Eigen::OuterStride<>(C)).noalias() += (dP.transpose() * Q) * scl;
                         }
                     });
}

Tensor deform_locations(const Tensor& reference, const Tensor& offsets, const std::vector<LevelShape>& levels) {
  if (reference.rank() != 3 || (reference.dim(2) != 2 && reference.dim(2) != 4))
    throw std::invalid_argument("deform_locations: reference must be [B,Nq,2|4], got " + shape_str(reference.shape()));
  if (offsets.rank() != 6 || offsets.dim(0) != reference.dim(0) || offsets.dim(1) != reference.dim(1) ||
      offsets.dim(3) != static_cast<int64_t>(levels.size()) || offsets.dim(5) != 2)
    throw std::invalid_argument("deform_locations: offsets " + shape_str(offsets.shape()) + " do not match reference " +
                                shape_str(reference.shape()));
  const int64_t B = offsets.dim(0), Nq = offsets.dim(1), Hh = offsets.dim(2), L = offsets.dim(3), K = offsets.dim(4);
  const int64_t rd = reference.dim(2);
  const auto& rv = reference.values();
  const auto& ov = offsets.values();
  Buffer out(ov.size());
  // d loc / d offset per element (diagonal), for backward
  Buffer jac(ov.size());
  size_t idx = 0;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t q = 0; q < Nq; ++q) {
      const double* r = rv.data() + (b * Nq + q) * rd;
      for (int64_t h = 0; h < Hh; ++h)
        for (int64_t l = 0; l < L; ++l)
          for (int64_t kk = 0; kk < K; ++kk)
            for (int64_t a = 0; a < 2; ++a, ++idx) {
              const double s = rd == 2 ? 1.0 / static_cast<double>(a == 0 ? levels[static_cast<size_t>(l)].w : levels[static_cast<size_t>(l)].h)
                                       : r[2 + a] * 0.5 / static_cast<double>(K);
              jac[idx] = s;
              out[idx] = r[a] + ov[idx] * s;
            }
    }
  return make_result(offsets.shape(), std::move(out), {reference, offsets},
                     [jac = std::move(jac), B, Nq, Hh, L, K, rd](Node& self) {
                       double* gr = grad_of(self, 0);
                       double* go = grad_of(self, 1);
                       const double* ov = value_of(self, 1);
                       const int64_t per_q = Hh * L * K * 2;
                       for (int64_t bq = 0; bq < B * Nq; ++bq)
                         for (int64_t j = 0; j < per_q; ++j) {
                           const size_t i = static_cast<size_t>(bq * per_q + j);
                           const int64_t a = j % 2;
                           if (go) go[i] += self.grad[i] * jac[i];
                           if (gr) {
                             gr[bq * rd + a] += self.grad[i];
                             if (rd == 4) gr[bq * rd + 2 + a] += self.grad[i] * ov[i] * 0.5 / static_cast<double>(K);
                           }
                         }
                     });
}

Tensor ms_deform_sample(const Tensor& value, const std::vector<LevelShape>& levels, const Tensor& locations,
                        const Tensor& weights) {
  const int64_t L = static_cast<int64_t>(levels.size());
  if (value.rank() != 3 || locations.rank() != 6 || weights.rank() != 5)
    throw std::invalid_argument("ms_deform_sample: bad ranks");
  const int64_t B = value.dim(0), S = value.dim(1), C = value.dim(2);
  const int64_t Nq = locations.dim(1), Hh = locations.dim(2), K = locations.dim(4);
  std::vector<int64_t> starts;
  int64_t total = 0;
  for (const auto& lv : levels) {
    starts.push_back(total);
    total += lv.h * lv.w;
  }
  if (total != S || locations.dim(0) != B || locations.dim(3) != L || weights.dim(0) != B || weights.dim(1) != Nq ||
      weights.dim(2) != Hh || weights.dim(3) != L || weights.dim(4) != K)
    throw std::invalid_argument("ms_deform_sample: value " + shape_str(value.shape()) + ", locations " +
                                shape_str(locations.shape()) + ", weights " + shape_str(weights.shape()) +
                                " are inconsistent");
  if (C % Hh) throw std::invalid_argument("ms_deform_sample: channels not divisible by heads");
  const int64_t d = C / Hh;

  // Visits the (up to four) in-bounds bilinear taps of one sample point.
  auto for_taps = [levels, starts](int64_t l, double x, double y, auto&& fn) {
    const auto& lv = levels[static_cast<size_t>(l)];
    const double px = x * static_cast<double>(lv.w) - 0.5, py = y * static_cast<double>(lv.h) - 0.5;
    const double fx = std::floor(px), fy = std::floor(py);
    const int64_t x0 = static_cast<int64_t>(fx), y0 = static_cast<int64_t>(fy);
    const double ax = px - fx, ay = py - fy;
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const int64_t xi = x0 + dx, yi = y0 + dy;
        if (xi < 0 || yi < 0 || xi >= lv.w || yi >= lv.h) continue;
        const double wx = dx ? ax : 1.0 - ax, wy = dy ? ay : 1.0 - ay;
        // d(wx*wy)/dpx and /dpy
        const double dwx = dx ? 1.0 : -1.0, dwy = dy ? 1.0 : -1.0;
        fn(starts[static_cast<size_t>(l)] + yi * lv.w + xi, wx * wy, dwx * wy * static_cast<double>(lv.w),
           wx * dwy * static_cast<double>(lv.h));
      }
  };

  const auto& vv = value.values();
  const auto& lc = locations.values();
  const auto& wt = weights.values();
  Buffer out(static_cast<size_t>(B * Nq * C), 0.0);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t q = 0; q < Nq; ++q)
      for (int64_t h = 0; h < Hh; ++h) {
        double* dst = out.data() + (b * Nq + q) * C + h * d;
        for (int64_t l = 0; l < L; ++l)
          for (int64_t kk = 0; kk < K; ++kk) {
            const int64_t pidx = (((b * Nq + q) * Hh + h) * L + l) * K + kk;
            const double a = wt[static_cast<size_t>(pidx)];
            for_taps(l, lc[static_cast<size_t>(2 * pidx)], lc[static_cast<size_t>(2 * pidx + 1)],
                     [&](int64_t s, double wb, double, double) {
                       const double* src = vv.data() + (b * S + s) * C + h * d;
                       for (int64_t c = 0; c < d; ++c) dst[c] += a * wb * src[c];
                     });
          }
      }
  return make_result({B, Nq, C}, std::move(out), {value, locations, weights},
                     [for_taps, B, S, C, Nq, Hh, L, K, d](Node& self) {
                       double* gv = grad_of(self, 0);
                       double* gl = grad_of(self, 1);
                       double* gw = grad_of(self, 2);
                       const double* vv = value_of(self, 0);
                       const double* lc = value_of(self, 1);
                       const double* wt = value_of(self, 2);
                       for (int64_t b = 0; b < B; ++b)
                         for (int64_t q = 0; q < Nq; ++q)
                           for (int64_t h = 0; h < Hh; ++h) {
                             const double* dy = self.grad.data() + (b * Nq + q) * C + h * d;
                             for (int64_t l = 0; l < L; ++l)
                               for (int64_t kk = 0; kk < K; ++kk) {
                                 const int64_t pidx = (((b * Nq + q) * Hh + h) * L + l) * K + kk;
                                 const double a = wt[pidx];
                                 for_taps(l, lc[2 * pidx], lc[2 * pidx + 1],
                                          [&](int64_t s, double wb, double dwdx, double dwdy) {
                                            const double* src = vv + (b * S + s) * C + h * d;
                                            double dot = 0;
                                            for (int64_t c = 0; c < d; ++c) dot += src[c] * dy[c];
                                            if (gv) {
                                              double* g = gv + (b * S + s) * C + h * d;
                                              for (int64_t c = 0; c < d; ++c) g[c] += a * wb * dy[c];
                                            }
                                            if (gw) gw[pidx] += wb * dot;
                                            if (gl) {
                                              gl[2 * pidx] += a * dwdx * dot;
                                              gl[2 * pidx + 1] += a * dwdy * dot;
                                            }
                                          });
                               }
                           }
                     });
}

// ---- losses ----------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets, const std::vector<double>& class_weights) {
  if (logits.rank() != 2 || logits.dim(0) != static_cast<int64_t>(targets.size()))
    throw std::invalid_argument("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                                std::to_string(targets.size()) + " targets");
  const int64_t K = logits.dim(1);
  if (!class_weights.empty() && static_cast<int64_t>(class_weights.size()) != K)
    throw std::invalid_argument("cross_entropy: class weight count mismatch");
  Buffer w(targets.size());
  double wsum = 0;
  for (size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0 || targets[i] >= K) throw std::out_of_range("cross_entropy: target " + std::to_string(targets[i]));
    w[i] = class_weights.empty() ? 1.0 : class_weights[static_cast<size_t>(targets[i])];
    wsum += w[i];
  }
  if (targets.empty() || wsum <= 0) throw std::invalid_argument("cross_entropy: empty or zero-weight batch");
  Tensor logp = log_softmax_last(logits);
  double loss = 0;
  for (size_t i = 0; i < targets.size(); ++i) loss -= w[i] * logp.values()[i * static_cast<size_t>(K) + static_cast<size_t>(targets[i])];
  loss /= wsum;
  return make_result({}, {loss}, {logp}, [targets, w, wsum, K](Node& self) {
    if (double* g = grad_of(self, 0))
      for (size_t i = 0; i < targets.size(); ++i)
        g[i * static_cast<size_t>(K) + static_cast<size_t>(targets[i])] -= self.grad[0] * w[i] / wsum;
  });
}

Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets) {
  if (static_cast<int64_t>(targets.size()) != logits.numel() || targets.empty())
    throw std::invalid_argument("bce_with_logits: target count mismatch");
  const auto& x = logits.values();
  const double n = static_cast<double>(targets.size());
  double loss = 0;
  for (size_t i = 0; i < targets.size(); ++i)
    loss += std::max(x[i], 0.0) - x[i] * targets[i] + std::log1p(std::exp(-std::fabs(x[i])));
  return make_result({}, {loss / n}, {logits}, [targets, n](Node& self) {
    if (double* g = grad_of(self, 0)) {
      const double* x = value_of(self, 0);
      for (size_t i = 0; i < targets.size(); ++i) {
        const double s = x[i] >= 0 ? 1.0 / (1.0 + std::exp(-x[i])) : std::exp(x[i]) / (1.0 + std::exp(x[i]));
        g[i] += self.grad[0] * (s - targets[i]) / n;
      }
    }
  });
}

namespace {

struct GiouParts {
  double giou;
  std::array<double, 8> d_xyxy;  // d giou / d (a.x1, a.y1, a.x2, a.y2, b.x1, b.y1, b.x2, b.y2)
};

GiouParts giou_xyxy(const std::array<double, 8>& p) {
  const double ax1 = p[0], ay1 = p[1], ax2 = p[2], ay2 = p[3];
  const double bx1 = p[4], by1 = p[5], bx2 = p[6], by2 = p[7];
  std::array<double, 8> dI{}, dU{}, dC{};
  const double aw = ax2 - ax1, ah = ay2 - ay1, bw = bx2 - bx1, bh = by2 - by1;
  const double Aa = aw * ah, Ab = bw * bh;
  const double iw = std::min(ax2, bx2) - std::max(ax1, bx1);
  const double ih = std::min(ay2, by2) - std::max(ay1, by1);
  double I = 0;
  if (iw > 0 && ih > 0) {
    I = iw * ih;
    (ax2 <= bx2 ? dI[2] : dI[6]) += ih;
    (ax1 >= bx1 ? dI[0] : dI[4]) -= ih;
    (ay2 <= by2 ? dI[3] : dI[7]) += iw;
    (ay1 >= by1 ? dI[1] : dI[5]) -= iw;
  }
  // union = Aa + Ab - I
  const std::array<double, 8> dAa{-ah, -aw, ah, aw, 0, 0, 0, 0};
  const std::array<double, 8> dAb{0, 0, 0, 0, -bh, -bw, bh, bw};
  const double U = Aa + Ab - I;
  for (size_t i = 0; i < 8; ++i) dU[i] = dAa[i] + dAb[i] - dI[i];
  const double cw = std::max(ax2, bx2) - std::min(ax1, bx1);
  const double ch = std::max(ay2, by2) - std::min(ay1, by1);
  const double Cc = cw * ch;
  (ax2 >= bx2 ? dC[2] : dC[6]) += ch;
  (ax1 <= bx1 ? dC[0] : dC[4]) -= ch;
  (ay2 >= by2 ? dC[3] : dC[7]) += cw;
  (ay1 <= by1 ? dC[1] : dC[5]) -= cw;
  GiouParts r{};
  r.giou = I / U - (Cc - U) / Cc;
  for (size_t i = 0; i < 8; ++i)
    r.d_xyxy[i] = dI[i] / U - I * dU[i] / (U * U) + dU[i] / Cc - U * dC[i] / (Cc * Cc);
  return r;
}

}  // namespace

Tensor generalized_iou(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || a.dim(1) != 4 || a.shape() != b.shape())
    throw std::invalid_argument("generalized_iou: expected matching [N,4], got " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  const int64_t N = a.dim(0);
  Buffer out(static_cast<size_t>(N));
  std::vector<std::array<double, 8>> jac(static_cast<size_t>(N));
  for (int64_t i = 0; i < N; ++i) {
    const double* pa = a.values().data() + 4 * i;
    const double* pb = b.values().data() + 4 * i;
    const std::array<double, 8> xyxy{pa[0] - pa[2] / 2, pa[1] - pa[3] / 2, pa[0] + pa[2] / 2, pa[1] + pa[3] / 2,
                                     pb[0] - pb[2] / 2, pb[1] - pb[3] / 2, pb[0] + pb[2] / 2, pb[1] + pb[3] / 2};
    const auto parts = giou_xyxy(xyxy);
    out[static_cast<size_t>(i)] = parts.giou;
    jac[static_cast<size_t>(i)] = parts.d_xyxy;
  }
  return make_result({N}, std::move(out), {a, b}, [jac = std::move(jac), N](Node& self) {
    for (size_t side = 0; side < 2; ++side) {
      double* g = grad_of(self, side);
      if (!g) continue;
      for (int64_t i = 0; i < N; ++i) {
        const auto& d = jac[static_cast<size_t>(i)];
        const double gy = self.grad[static_cast<size_t>(i)];
        const size_t o = 4 * side;
        // x1 = cx - w/2, x2 = cx + w/2
        g[4 * i + 0] += gy * (d[o + 0] + d[o + 2]);
        g[4 * i + 1] += gy * (d[o + 1] + d[o + 3]);
        g[4 * i + 2] += gy * 0.5 * (d[o + 2] - d[o + 0]);
        g[4 * i + 3] += gy * 0.5 * (d[o + 3] - d[o + 1]);
      }
    }
  });
}

}  // namespace tapir::nn
