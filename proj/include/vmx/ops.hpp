#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vmx/errors.hpp"
#include "vmx/tensor.hpp"

namespace vmx {

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t.shape()));
  }
}

inline void require_axis(const char* op, const char* what, std::size_t axis, std::size_t got,
                         std::size_t expected) {
  if (got != expected) {
    throw DimensionError(std::string(op) + ": " + what + " axis " + std::to_string(axis) + " has size " +
                         std::to_string(got) + ", expected " + std::to_string(expected));
  }
}

// Offsets of two same-rank operands into a broadcast output.
struct BroadcastPlan {
  Shape out_shape;
  std::vector<std::size_t> a_offset;
  std::vector<std::size_t> b_offset;
};

inline BroadcastPlan plan_broadcast(const Shape& a_in, const Shape& b_in, const char* op) {
  const std::size_t rank = std::max(a_in.size(), b_in.size());
  Shape a(rank - a_in.size(), 1), b(rank - b_in.size(), 1);
  a.insert(a.end(), a_in.begin(), a_in.end());
  b.insert(b.end(), b_in.begin(), b_in.end());
  BroadcastPlan plan;
  plan.out_shape.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1) {
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a_in) + " and " + shape_str(b_in) +
                           " are not broadcastable at axis " + std::to_string(i));
    }
    plan.out_shape[i] = std::max(a[i], b[i]);
  }
  std::vector<std::size_t> a_stride(rank, 0), b_stride(rank, 0);
  std::size_t sa = 1, sb = 1;
  for (std::size_t i = rank; i-- > 0;) {
    a_stride[i] = a[i] == 1 ? 0 : sa;
    b_stride[i] = b[i] == 1 ? 0 : sb;
    sa *= a[i];
    sb *= b[i];
  }
  const std::size_t total = numel(plan.out_shape);
  plan.a_offset.resize(total);
  plan.b_offset.resize(total);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t k = 0; k < total; ++k) {
    plan.a_offset[k] = oa;
    plan.b_offset[k] = ob;
    for (std::size_t i = rank; i-- > 0;) {
      ++idx[i];
      oa += a_stride[i];
      ob += b_stride[i];
      if (idx[i] < plan.out_shape[i]) break;
      oa -= a_stride[i] * idx[i];
      ob -= b_stride[i] * idx[i];
      idx[i] = 0;
    }
  }
  return plan;
}

template <class F, class DF>
Tensor unary(const Tensor& x, const char* name, F f, DF df) {
  const auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
  return make_result(x.shape(), std::move(out), {x}, name, [x, df](std::span<const double> g) {
    if (double* gx = grad_sink(x)) {
      const auto xs = x.data();
      for (std::size_t i = 0; i < xs.size(); ++i) gx[i] += g[i] * df(xs[i]);
    }
  });
}

inline double sigmoid_value(double v) {
  constexpr double lo = std::numeric_limits<double>::min();
  constexpr double hi = 1.0 - 0x1.0p-53;
  const double s = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  return std::clamp(s, lo, hi);
}

inline double softplus_value(double v) { return v > 20.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }

}  // namespace detail

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return detail::make_result(std::move(shape), x.values(), {x}, "reshape", [x](std::span<const double> g) {
    if (double* gx = detail::grad_sink(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    const auto as = a.data(), bs = b.data();
    std::vector<double> out(as.size());
    for (std::size_t i = 0; i < as.size(); ++i) out[i] = as[i] + bs[i];
    return detail::make_result(a.shape(), std::move(out), {a, b}, "add", [a, b](std::span<const double> g) {
      if (double* ga = detail::grad_sink(a)) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (double* gb = detail::grad_sink(b)) {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  auto plan = std::make_shared<detail::BroadcastPlan>(detail::plan_broadcast(a.shape(), b.shape(), "add"));
  const auto as = a.data(), bs = b.data();
  std::vector<double> out(plan->a_offset.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = as[plan->a_offset[k]] + bs[plan->b_offset[k]];
  return detail::make_result(plan->out_shape, std::move(out), {a, b}, "add", [a, b, plan](std::span<const double> g) {
    if (double* ga = detail::grad_sink(a)) {
      for (std::size_t k = 0; k < g.size(); ++k) ga[plan->a_offset[k]] += g[k];
    }
    if (double* gb = detail::grad_sink(b)) {
      for (std::size_t k = 0; k < g.size(); ++k) gb[plan->b_offset[k]] += g[k];
    }
  });
}

// Elementwise product with broadcasting along singleton dimensions.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    const auto as = a.data(), bs = b.data();
    std::vector<double> out(as.size());
    for (std::size_t i = 0; i < as.size(); ++i) out[i] = as[i] * bs[i];
    return detail::make_result(a.shape(), std::move(out), {a, b}, "mul", [a, b](std::span<const double> g) {
      const auto as = a.data(), bs = b.data();
      if (double* ga = detail::grad_sink(a)) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bs[i];
      }
      if (double* gb = detail::grad_sink(b)) {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * as[i];
      }
    });
  }
  auto plan = std::make_shared<detail::BroadcastPlan>(detail::plan_broadcast(a.shape(), b.shape(), "mul"));
  const auto as = a.data(), bs = b.data();
  std::vector<double> out(plan->a_offset.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = as[plan->a_offset[k]] * bs[plan->b_offset[k]];
  return detail::make_result(plan->out_shape, std::move(out), {a, b}, "mul", [a, b, plan](std::span<const double> g) {
    const auto as = a.data(), bs = b.data();
    if (double* ga = detail::grad_sink(a)) {
      for (std::size_t k = 0; k < g.size(); ++k) ga[plan->a_offset[k]] += g[k] * bs[plan->b_offset[k]];
    }
    if (double* gb = detail::grad_sink(b)) {
      for (std::size_t k = 0; k < g.size(); ++k) gb[plan->b_offset[k]] += g[k] * as[plan->a_offset[k]];
    }
  });
}

inline Tensor mul_broadcast(const Tensor& a, const Tensor& b) { return mul(a, b); }

inline Tensor scalar_add(const Tensor& x, double s) {
  return detail::unary(x, "scalar_add", [s](double v) { return v + s; }, [](double) { return 1.0; });
}

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary(x, "scale", [s](double v) { return v * s; }, [s](double) { return s; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return detail::make_result(Shape{1}, {acc}, {x}, "sum", [x](std::span<const double> g) {
    if (double* gx = detail::grad_sink(x)) {
      for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[0];
    }
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// Exact erf form: x * Phi(x).
inline Tensor gelu(const Tensor& x) {
  return detail::unary(
      x, "gelu", [](double v) { return 0.5 * v * std::erfc(-v * std::numbers::sqrt2 * 0.5); },
      [](double v) {
        const double cdf = 0.5 * std::erfc(-v * std::numbers::sqrt2 * 0.5);
        const double pdf = std::exp(-0.5 * v * v) * 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
        return cdf + v * pdf;
      });
}

// Output is clamped into the open interval (0, 1).
inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(x, "sigmoid", detail::sigmoid_value, [](double v) {
    const double s = detail::sigmoid_value(v);
    return s * (1.0 - s);
  });
}

inline Tensor silu(const Tensor& x) {
  return detail::unary(
      x, "silu", [](double v) { return v * detail::sigmoid_value(v); },
      [](double v) {
        const double s = detail::sigmoid_value(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

inline Tensor softplus(const Tensor& x) {
  return detail::unary(x, "softplus", detail::softplus_value, detail::sigmoid_value);
}

// Cross-correlation over [N,Cin,H,W] with weight [Cout,Cin,k,k]; bias may be
// undefined. Each output accumulates bias first, then (ci, kh, kw) in order.
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
                     std::size_t padding) {
  detail::require_rank(x, 4, "conv2d", "input");
  detail::require_rank(weight, 4, "conv2d", "weight");
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  detail::require_axis("conv2d", "input channel", 1, cin, weight.dim(1));
  detail::require_axis("conv2d", "weight kernel width", 3, weight.dim(3), k);
  if (stride == 0) throw ParameterError("conv2d: stride must be positive");
  if (bias.defined()) {
    detail::require_rank(bias, 1, "conv2d", "bias");
    detail::require_axis("conv2d", "bias", 0, bias.dim(0), cout);
  }
  if (h + 2 * padding < k || w + 2 * padding < k) {
    throw DimensionError("conv2d: kernel " + std::to_string(k) + " larger than padded input " + shape_str(x.shape()));
  }
  const std::size_t ho = (h + 2 * padding - k) / stride + 1;
  const std::size_t wo = (w + 2 * padding - k) / stride + 1;
  record_macs(static_cast<std::uint64_t>(n) * cout * cin * k * k * ho * wo);

  const auto xs = x.data(), ws = weight.data();
  std::vector<double> out(n * cout * ho * wo);
  // Valid output column range for a kernel column offset.
  const auto col_range = [wo, stride, padding, w](std::size_t kw, std::size_t& lo, std::size_t& hi) {
    lo = 0;
    while (lo < wo && lo * stride + kw < padding) ++lo;
    hi = lo;
    while (hi < wo && hi * stride + kw < padding + w) ++hi;
  };
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t co = 0; co < cout; ++co) {
      double* o = out.data() + (b * cout + co) * ho * wo;
      const double bv = bias.defined() ? bias[co] : 0.0;
      std::fill(o, o + ho * wo, bv);
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* xin = xs.data() + (b * cin + ci) * h * w;
        for (std::size_t kh = 0; kh < k; ++kh) {
          for (std::size_t kw = 0; kw < k; ++kw) {
            const double wv = ws[((co * cin + ci) * k + kh) * k + kw];
            std::size_t lo, hi;
            col_range(kw, lo, hi);
            for (std::size_t oh = 0; oh < ho; ++oh) {
              const std::size_t ihp = oh * stride + kh;
              if (ihp < padding || ihp >= padding + h) continue;
              const double* row = xin + (ihp - padding) * w;
              double* orow = o + oh * wo;
              for (std::size_t ow = lo; ow < hi; ++ow) orow[ow] += wv * row[ow * stride + kw - padding];
            }
          }
        }
      }
    }
  }
  return detail::make_result(
      Shape{n, cout, ho, wo}, std::move(out), {x, weight, bias}, "conv2d",
      [=](std::span<const double> g) {
        double* gx = detail::grad_sink(x);
        double* gw = detail::grad_sink(weight);
        double* gb = bias.defined() ? detail::grad_sink(bias) : nullptr;
        const auto xs = x.data(), ws = weight.data();
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t co = 0; co < cout; ++co) {
            const double* go = g.data() + (b * cout + co) * ho * wo;
            if (gb) {
              double acc = 0.0;
              for (std::size_t i = 0; i < ho * wo; ++i) acc += go[i];
              gb[co] += acc;
            }
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const std::size_t xoff = (b * cin + ci) * h * w;
              for (std::size_t kh = 0; kh < k; ++kh) {
                for (std::size_t kw = 0; kw < k; ++kw) {
                  const std::size_t widx = ((co * cin + ci) * k + kh) * k + kw;
                  const double wv = ws[widx];
                  std::size_t lo, hi;
                  col_range(kw, lo, hi);
                  double acc = 0.0;
                  for (std::size_t oh = 0; oh < ho; ++oh) {
                    const std::size_t ihp = oh * stride + kh;
                    if (ihp < padding || ihp >= padding + h) continue;
                    const std::size_t roff = xoff + (ihp - padding) * w + kw - padding;
                    const double* grow = go + oh * wo;
                    if (gw) {
                      for (std::size_t ow = lo; ow < hi; ++ow) acc += grow[ow] * xs[roff + ow * stride];
                    }
                    if (gx) {
                      for (std::size_t ow = lo; ow < hi; ++ow) gx[roff + ow * stride] += grow[ow] * wv;
                    }
                  }
                  if (gw) gw[widx] += acc;
                }
              }
            }
          }
        }
      });
}

struct RunningStats {
  Tensor mean;
  Tensor var;

  explicit RunningStats(std::size_t channels = 0)
      : mean(Shape{channels}, 0.0), var(Shape{channels}, 1.0) {}
};

// Per-channel normalization over (N, H, W). Training mode uses batch statistics
// and updates `stats` with the given momentum; eval mode uses `stats`.
inline Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, RunningStats& stats,
                          bool training, double momentum = 0.1, double eps = 1e-5) {
  detail::require_rank(x, 4, "batchnorm2d", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  detail::require_axis("batchnorm2d", "gamma", 0, gamma.numel(), c);
  detail::require_axis("batchnorm2d", "beta", 0, beta.numel(), c);
  detail::require_axis("batchnorm2d", "running mean", 0, stats.mean.numel(), c);
  const std::size_t count = n * hw;
  if (count == 0) throw DimensionError("batchnorm2d: empty batch");
  const auto xs = x.data();
  std::vector<double> mu(c), inv_std(c);
  std::vector<double> xhat(xs.size());
  for (std::size_t ch = 0; ch < c; ++ch) {
    double m, v;
    if (training) {
      double acc = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) acc += xs[(b * c + ch) * hw + i];
      m = acc / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = xs[(b * c + ch) * hw + i] - m;
          sq += d * d;
        }
      v = sq / static_cast<double>(count);
      const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : v;
      auto rm = stats.mean.data_mut();
      auto rv = stats.var.data_mut();
      rm[ch] = (1.0 - momentum) * rm[ch] + momentum * m;
      rv[ch] = (1.0 - momentum) * rv[ch] + momentum * unbiased;
    } else {
      m = stats.mean[ch];
      v = stats.var[ch];
    }
    mu[ch] = m;
    inv_std[ch] = 1.0 / std::sqrt(v + eps);
  }
  std::vector<double> out(xs.size());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t idx = (b * c + ch) * hw + i;
        xhat[idx] = (xs[idx] - mu[ch]) * inv_std[ch];
        out[idx] = gamma[ch] * xhat[idx] + beta[ch];
      }
  return detail::make_result(
      x.shape(), std::move(out), {x, gamma, beta}, "batchnorm2d",
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](std::span<const double> g) {
        double* gx = detail::grad_sink(x);
        double* gg = detail::grad_sink(gamma);
        double* gbt = detail::grad_sink(beta);
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t idx = (b * c + ch) * hw + i;
              sum_g += g[idx];
              sum_gx += g[idx] * xhat[idx];
            }
          if (gg) gg[ch] += sum_gx;
          if (gbt) gbt[ch] += sum_g;
          if (!gx) continue;
          const double gm = gamma[ch];
          if (training) {
            const double inv_count = 1.0 / static_cast<double>(count);
            for (std::size_t b = 0; b < n; ++b)
              for (std::size_t i = 0; i < hw; ++i) {
                const std::size_t idx = (b * c + ch) * hw + i;
                gx[idx] += gm * inv_std[ch] * (g[idx] - inv_count * sum_g - xhat[idx] * inv_count * sum_gx);
              }
          } else {
            for (std::size_t b = 0; b < n; ++b)
              for (std::size_t i = 0; i < hw; ++i) {
                const std::size_t idx = (b * c + ch) * hw + i;
                gx[idx] += gm * inv_std[ch] * g[idx];
              }
          }
        }
      });
}

inline Tensor global_avg_pool(const Tensor& x) {
  detail::require_rank(x, 4, "global_avg_pool", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (hw == 0) throw DimensionError("global_avg_pool: empty spatial extent");
  const auto xs = x.data();
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < hw; ++j) acc += xs[i * hw + j];
    out[i] = acc / static_cast<double>(hw);
  }
  return detail::make_result(Shape{n, c, 1, 1}, std::move(out), {x}, "global_avg_pool",
                             [x, n, c, hw](std::span<const double> g) {
                               if (double* gx = detail::grad_sink(x)) {
                                 const double inv = 1.0 / static_cast<double>(hw);
                                 for (std::size_t i = 0; i < n * c; ++i)
                                   for (std::size_t j = 0; j < hw; ++j) gx[i * hw + j] += g[i] * inv;
                               }
                             });
}

// [N,C1,H,W] ++ [N,C2,H,W] -> [N,C1+C2,H,W]
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 4, "concat_channels", "first operand");
  detail::require_rank(b, 4, "concat_channels", "second operand");
  for (std::size_t ax : {0u, 2u, 3u}) {
    detail::require_axis("concat_channels", "second operand", ax, b.dim(ax), a.dim(ax));
  }
  const std::size_t n = a.dim(0), c1 = a.dim(1), c2 = b.dim(1), hw = a.dim(2) * a.dim(3);
  std::vector<double> out(n * (c1 + c2) * hw);
  const auto as = a.data(), bs = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(as.data() + i * c1 * hw, c1 * hw, out.data() + i * (c1 + c2) * hw);
    std::copy_n(bs.data() + i * c2 * hw, c2 * hw, out.data() + i * (c1 + c2) * hw + c1 * hw);
  }
  return detail::make_result(Shape{n, c1 + c2, a.dim(2), a.dim(3)}, std::move(out), {a, b}, "concat_channels",
                             [a, b, n, c1, c2, hw](std::span<const double> g) {
                               if (double* ga = detail::grad_sink(a)) {
                                 for (std::size_t i = 0; i < n; ++i)
                                   for (std::size_t j = 0; j < c1 * hw; ++j) ga[i * c1 * hw + j] += g[i * (c1 + c2) * hw + j];
                               }
                               if (double* gb = detail::grad_sink(b)) {
                                 for (std::size_t i = 0; i < n; ++i)
                                   for (std::size_t j = 0; j < c2 * hw; ++j)
                                     gb[i * c2 * hw + j] += g[i * (c1 + c2) * hw + c1 * hw + j];
                               }
                             });
}

// y[..., o] = b[o] + sum_i x[..., i] * W[o, i]; bias may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {}) {
  detail::require_rank(weight, 2, "linear", "weight");
  if (x.rank() == 0) throw DimensionError("linear: input must have rank >= 1");
  const std::size_t in = x.shape().back(), out_f = weight.dim(0);
  detail::require_axis("linear", "input feature", x.rank() - 1, in, weight.dim(1));
  if (bias.defined()) detail::require_axis("linear", "bias", 0, bias.numel(), out_f);
  const std::size_t rows = x.numel() / std::max<std::size_t>(in, 1);
  record_macs(static_cast<std::uint64_t>(rows) * in * out_f);
  const auto xs = x.data(), ws = weight.data();
  std::vector<double> out(rows * out_f);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xs.data() + r * in;
    for (std::size_t o = 0; o < out_f; ++o) {
      const double* wr = ws.data() + o * in;
      double acc = bias.defined() ? bias[o] : 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
      out[r * out_f + o] = acc;
    }
  }
  Shape shape = x.shape();
  shape.back() = out_f;
  return detail::make_result(std::move(shape), std::move(out), {x, weight, bias}, "linear",
                             [=](std::span<const double> g) {
                               double* gx = detail::grad_sink(x);
                               double* gw = detail::grad_sink(weight);
                               double* gb = bias.defined() ? detail::grad_sink(bias) : nullptr;
                               const auto xs = x.data(), ws = weight.data();
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const double* gr = g.data() + r * out_f;
                                 const double* xr = xs.data() + r * in;
                                 for (std::size_t o = 0; o < out_f; ++o) {
                                   const double gv = gr[o];
                                   if (gb) gb[o] += gv;
                                   if (gw) {
                                     double* gwr = gw + o * in;
                                     for (std::size_t i = 0; i < in; ++i) gwr[i] += gv * xr[i];
                                   }
                                   if (gx) {
                                     const double* wr = ws.data() + o * in;
                                     double* gxr = gx + r * in;
                                     for (std::size_t i = 0; i < in; ++i) gxr[i] += gv * wr[i];
                                   }
                                 }
                               }
                             });
}

// Normalizes over the last axis.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  const std::size_t c = x.shape().back();
  detail::require_axis("layer_norm", "gamma", 0, gamma.numel(), c);
  detail::require_axis("layer_norm", "beta", 0, beta.numel(), c);
  const std::size_t rows = x.numel() / c;
  const auto xs = x.data();
  std::vector<double> xhat(xs.size()), inv_std(rows), out(xs.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xs.data() + r * c;
    double m = 0.0;
    for (std::size_t i = 0; i < c; ++i) m += xr[i];
    m /= static_cast<double>(c);
    double v = 0.0;
    for (std::size_t i = 0; i < c; ++i) v += (xr[i] - m) * (xr[i] - m);
    v /= static_cast<double>(c);
    inv_std[r] = 1.0 / std::sqrt(v + eps);
    for (std::size_t i = 0; i < c; ++i) {
      xhat[r * c + i] = (xr[i] - m) * inv_std[r];
      out[r * c + i] = gamma[i] * xhat[r * c + i] + beta[i];
    }
  }
  return detail::make_result(x.shape(), std::move(out), {x, gamma, beta}, "layer_norm",
                             [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](std::span<const double> g) {
                               double* gx = detail::grad_sink(x);
                               double* gg = detail::grad_sink(gamma);
                               double* gb = detail::grad_sink(beta);
                               const double inv_c = 1.0 / static_cast<double>(c);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const double* gr = g.data() + r * c;
                                 const double* hr = xhat.data() + r * c;
                                 double sum_gh = 0.0, sum_ghx = 0.0;
                                 for (std::size_t i = 0; i < c; ++i) {
                                   if (gg) gg[i] += gr[i] * hr[i];
                                   if (gb) gb[i] += gr[i];
                                   const double gh = gr[i] * gamma[i];
                                   sum_gh += gh;
                                   sum_ghx += gh * hr[i];
                                 }
                                 if (!gx) continue;
                                 for (std::size_t i = 0; i < c; ++i) {
                                   const double gh = gr[i] * gamma[i];
                                   gx[r * c + i] += inv_std[r] * (gh - inv_c * sum_gh - hr[i] * inv_c * sum_ghx);
                                 }
                               }
                             });
}

inline Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  detail::require_rank(x, 4, "upsample_nearest", "input");
  if (factor == 0) throw ParameterError("upsample_nearest: factor must be positive");
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = h * factor, wo = w * factor;
  const auto xs = x.data();
  std::vector<double> out(nc * ho * wo);
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) out[(p * ho + i) * wo + j] = xs[(p * h + i / factor) * w + j / factor];
  return detail::make_result(Shape{x.dim(0), x.dim(1), ho, wo}, std::move(out), {x}, "upsample_nearest",
                             [=](std::span<const double> g) {
                               if (double* gx = detail::grad_sink(x)) {
                                 for (std::size_t p = 0; p < nc; ++p)
                                   for (std::size_t i = 0; i < ho; ++i)
                                     for (std::size_t j = 0; j < wo; ++j)
                                       gx[(p * h + i / factor) * w + j / factor] += g[(p * ho + i) * wo + j];
                               }
                             });
}

// Softmax across axis 1 of [N,K,H,W].
inline Tensor softmax_channels(const Tensor& x) {
  detail::require_rank(x, 4, "softmax_channels", "input");
  const std::size_t n = x.dim(0), k = x.dim(1), hw = x.dim(2) * x.dim(3);
  const auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, xs[(b * k + c) * hw + p]);
      double z = 0.0;
      for (std::size_t c = 0; c < k; ++c) z += (out[(b * k + c) * hw + p] = std::exp(xs[(b * k + c) * hw + p] - mx));
      for (std::size_t c = 0; c < k; ++c) out[(b * k + c) * hw + p] /= z;
    }
  auto probs = std::make_shared<std::vector<double>>(out);
  return detail::make_result(x.shape(), std::move(out), {x}, "softmax_channels",
                             [=](std::span<const double> g) {
                               if (double* gx = detail::grad_sink(x)) {
                                 const auto& s = *probs;
                                 for (std::size_t b = 0; b < n; ++b)
                                   for (std::size_t p = 0; p < hw; ++p) {
                                     double dot = 0.0;
                                     for (std::size_t c = 0; c < k; ++c) dot += g[(b * k + c) * hw + p] * s[(b * k + c) * hw + p];
                                     for (std::size_t c = 0; c < k; ++c) {
                                       const std::size_t idx = (b * k + c) * hw + p;
                                       gx[idx] += s[idx] * (g[idx] - dot);
                                     }
                                   }
                               }
                             });
}

namespace detail {

inline std::vector<std::size_t> class_labels(const Tensor& logits, const Tensor& target, const char* op) {
  require_rank(logits, 4, op, "logits");
  require_rank(target, 3, op, "target");
  require_axis(op, "target batch", 0, target.dim(0), logits.dim(0));
  require_axis(op, "target height", 1, target.dim(1), logits.dim(2));
  require_axis(op, "target width", 2, target.dim(2), logits.dim(3));
  std::vector<std::size_t> labels(target.numel());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double v = target[i];
    if (v < 0 || v >= static_cast<double>(logits.dim(1)) || v != std::floor(v)) {
      throw ParameterError(std::string(op) + ": target value " + std::to_string(v) + " is not a class index");
    }
    labels[i] = static_cast<std::size_t>(v);
  }
  return labels;
}

}  // namespace detail

// Mean over pixels of -log softmax(logits)[target]; target is [N,H,W] of class indices.
inline Tensor cross_entropy_with_logits(const Tensor& logits, const Tensor& target) {
  auto labels = detail::class_labels(logits, target, "cross_entropy_with_logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  const auto xs = logits.data();
  auto probs = std::make_shared<std::vector<double>>(xs.size());
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, xs[(b * k + c) * hw + p]);
      double z = 0.0;
      for (std::size_t c = 0; c < k; ++c) z += std::exp(xs[(b * k + c) * hw + p] - mx);
      const double log_z = std::log(z) + mx;
      for (std::size_t c = 0; c < k; ++c) (*probs)[(b * k + c) * hw + p] = std::exp(xs[(b * k + c) * hw + p] - log_z);
      total += log_z - xs[(b * k + labels[b * hw + p]) * hw + p];
    }
  const double inv = 1.0 / static_cast<double>(n * hw);
  return detail::make_result(Shape{1}, {total * inv}, {logits}, "cross_entropy_with_logits",
                             [=, labels = std::move(labels)](std::span<const double> g) {
                               if (double* gx = detail::grad_sink(logits)) {
                                 const auto& s = *probs;
                                 for (std::size_t b = 0; b < n; ++b)
                                   for (std::size_t p = 0; p < hw; ++p)
                                     for (std::size_t c = 0; c < k; ++c) {
                                       const std::size_t idx = (b * k + c) * hw + p;
                                       const double onehot = labels[b * hw + p] == c ? 1.0 : 0.0;
                                       gx[idx] += g[0] * inv * (s[idx] - onehot);
                                     }
                               }
                             });
}

// 1 - (2 sum(p g) + smooth) / (sum(p) + sum(g) + smooth) over the whole batch,
// where p is channel 1 of `probs` [N,K,H,W] and g the binary target [N,H,W].
inline Tensor soft_dice_loss(const Tensor& probs, const Tensor& target, double smooth = 1.0) {
  auto labels = detail::class_labels(probs, target, "soft_dice_loss");
  if (probs.dim(1) < 2) throw DimensionError("soft_dice_loss: need at least 2 class channels");
  const std::size_t n = probs.dim(0), k = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
  const auto ps = probs.data();
  double inter = 0.0, sum_p = 0.0, sum_g = 0.0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      const double pv = ps[(b * k + 1) * hw + p];
      const double gv = labels[b * hw + p] == 1 ? 1.0 : 0.0;
      inter += pv * gv;
      sum_p += pv;
      sum_g += gv;
    }
  const double num = 2.0 * inter + smooth, den = sum_p + sum_g + smooth;
  return detail::make_result(Shape{1}, {1.0 - num / den}, {probs}, "soft_dice_loss",
                             [=, labels = std::move(labels)](std::span<const double> g) {
                               if (double* gx = detail::grad_sink(probs)) {
                                 for (std::size_t b = 0; b < n; ++b)
                                   for (std::size_t p = 0; p < hw; ++p) {
                                     const double gv = labels[b * hw + p] == 1 ? 1.0 : 0.0;
                                     gx[(b * k + 1) * hw + p] += g[0] * (num / (den * den) - 2.0 * gv / den);
                                   }
                               }
                             });
}

// [N,C,H,W] -> [N,H*W,C], tokens in row-major pixel order.
inline Tensor to_tokens(const Tensor& x) {
  detail::require_rank(x, 4, "to_tokens", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), l = x.dim(2) * x.dim(3);
  const auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t t = 0; t < l; ++t) out[(b * l + t) * c + ch] = xs[(b * c + ch) * l + t];
  return detail::make_result(Shape{n, l, c}, std::move(out), {x}, "to_tokens", [=](std::span<const double> g) {
    if (double* gx = detail::grad_sink(x)) {
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t t = 0; t < l; ++t) gx[(b * c + ch) * l + t] += g[(b * l + t) * c + ch];
    }
  });
}

// [N,H*W,C] -> [N,C,H,W]
inline Tensor from_tokens(const Tensor& t, std::size_t height, std::size_t width) {
  detail::require_rank(t, 3, "from_tokens", "input");
  detail::require_axis("from_tokens", "token", 1, t.dim(1), height * width);
  const std::size_t n = t.dim(0), l = t.dim(1), c = t.dim(2);
  const auto ts = t.data();
  std::vector<double> out(ts.size());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < l; ++p) out[(b * c + ch) * l + p] = ts[(b * l + p) * c + ch];
  return detail::make_result(Shape{n, c, height, width}, std::move(out), {t}, "from_tokens",
                             [=](std::span<const double> g) {
                               if (double* gt = detail::grad_sink(t)) {
                                 for (std::size_t b = 0; b < n; ++b)
                                   for (std::size_t ch = 0; ch < c; ++ch)
                                     for (std::size_t p = 0; p < l; ++p) gt[(b * l + p) * c + ch] += g[(b * c + ch) * l + p];
                               }
                             });
}

// Space-to-channel 2x2 merge: out[n, q*C + c, i, j] = x[n, c, 2i+dy, 2j+dx], q = 2*dy + dx.
inline Tensor patch_merge(const Tensor& x) {
  detail::require_rank(x, 4, "patch_merge", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) {
    throw DimensionError("patch_merge: spatial axes must be even, got " + std::string(h % 2 ? "height" : "width") +
                         " axis " + std::to_string(h % 2 ? 2 : 3) + " of size " + std::to_string(h % 2 ? h : w));
  }
  const std::size_t ho = h / 2, wo = w / 2;
  auto index = [=](std::size_t b, std::size_t q, std::size_t ch, std::size_t i, std::size_t j) {
    return ((b * c + ch) * h + 2 * i + q / 2) * w + 2 * j + q % 2;
  };
  const auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t q = 0; q < 4; ++q)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < ho; ++i)
          for (std::size_t j = 0; j < wo; ++j)
            out[((b * 4 * c + q * c + ch) * ho + i) * wo + j] = xs[index(b, q, ch, i, j)];
  return detail::make_result(Shape{n, 4 * c, ho, wo}, std::move(out), {x}, "patch_merge",
                             [=](std::span<const double> g) {
                               if (double* gx = detail::grad_sink(x)) {
                                 for (std::size_t b = 0; b < n; ++b)
                                   for (std::size_t q = 0; q < 4; ++q)
                                     for (std::size_t ch = 0; ch < c; ++ch)
                                       for (std::size_t i = 0; i < ho; ++i)
                                         for (std::size_t j = 0; j < wo; ++j)
                                           gx[index(b, q, ch, i, j)] += g[((b * 4 * c + q * c + ch) * ho + i) * wo + j];
                               }
                             });
}

}  // namespace vmx
