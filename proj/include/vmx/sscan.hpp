#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "vmx/layers.hpp"
#include "vmx/ops.hpp"
#include "vmx/rng.hpp"
#include "vmx/tensor.hpp"

namespace vmx {

// Affine map h -> decay * h + increment. Applying `earlier` then `later`
// composes to (d1 * d2, i1 * d2 + i2), which is associative.
struct ScanElement {
  double decay = 1.0;
  double increment = 0.0;

  friend bool operator==(const ScanElement&, const ScanElement&) = default;
};

constexpr ScanElement compose(const ScanElement& earlier, const ScanElement& later) {
  return {earlier.decay * later.decay, earlier.increment * later.decay + later.increment};
}

// In-place inclusive prefix composition, left to right.
inline void scan_sequential(std::span<ScanElement> e) {
  for (std::size_t t = 1; t < e.size(); ++t) e[t] = compose(e[t - 1], e[t]);
}

// Work-efficient (Brent-Kung) inclusive scan: an up-sweep building block
// reductions, then a down-sweep filling in the remaining prefixes. O(n) work,
// O(log n) depth; both sweeps' inner loops are independent per level.
inline void scan_parallel(std::span<ScanElement> e) {
  const std::size_t n = e.size();
  if (n < 2) return;
  std::size_t d = 1;
  for (; d < n; d *= 2) {
    for (std::size_t i = 2 * d - 1; i < n; i += 2 * d) e[i] = compose(e[i - d], e[i]);
  }
  for (d /= 2; d >= 1; d /= 2) {
    for (std::size_t i = 3 * d - 1; i < n; i += 2 * d) e[i] = compose(e[i - d], e[i]);
  }
}

enum class ScanMode { sequential, parallel };

inline void run_scan(std::span<ScanElement> e, ScanMode mode) {
  if (mode == ScanMode::sequential) {
    scan_sequential(e);
  } else {
    scan_parallel(e);
  }
}

enum class ScanPath { row_major = 0, row_major_reversed = 1, column_major = 2, column_major_reversed = 3 };

inline constexpr std::array<ScanPath, 4> kScanPaths = {ScanPath::row_major, ScanPath::row_major_reversed,
                                                        ScanPath::column_major, ScanPath::column_major_reversed};

// order[t] = row-major token index visited at step t.
inline std::vector<std::size_t> scan_path_order(std::size_t height, std::size_t width, ScanPath path) {
  const std::size_t l = height * width;
  std::vector<std::size_t> order(l);
  for (std::size_t t = 0; t < l; ++t) {
    switch (path) {
      case ScanPath::row_major: order[t] = t; break;
      case ScanPath::row_major_reversed: order[t] = l - 1 - t; break;
      case ScanPath::column_major: order[t] = (t % height) * width + t / height; break;
      case ScanPath::column_major_reversed: {
        const std::size_t r = l - 1 - t;
        order[t] = (r % height) * width + r / height;
        break;
      }
    }
  }
  return order;
}

// Selective scan with zero-order-hold discretization, per channel c and state s:
//   abar_t = exp(-delta_t[c] * exp(A_log[c,s])),  bbar_t = delta_t[c] * B_t[s]
//   h_t = abar_t * h_{t-1} + bbar_t * u_t[c],      h_0 = 0
//   y_t[c] = sum_s C_t[s] * h_t[c,s] + D[c] * u_t[c]
// u, delta: [N,L,C]; b, c: [N,L,S]; a_log: [C,S]; d: [C]. Steps visit tokens in
// `order` (identity when empty) and outputs are written back at those tokens.
inline Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& b, const Tensor& c,
                             const Tensor& a_log, const Tensor& d, ScanMode mode,
                             std::vector<std::size_t> order = {}) {
  detail::require_rank(u, 3, "selective_scan", "u");
  const std::size_t n = u.dim(0), len = u.dim(1), ch = u.dim(2);
  if (len == 0) throw DimensionError("selective_scan: empty sequence (L = 0)");
  detail::require_rank(a_log, 2, "selective_scan", "A_log");
  const std::size_t st = a_log.dim(1);
  if (delta.shape() != u.shape()) {
    throw DimensionError("selective_scan: delta shape " + shape_str(delta.shape()) + " differs from u " +
                         shape_str(u.shape()));
  }
  detail::require_axis("selective_scan", "A_log channel", 0, a_log.dim(0), ch);
  const Shape bc_shape{n, len, st};
  if (b.shape() != bc_shape || c.shape() != bc_shape) {
    throw DimensionError("selective_scan: B/C must have shape " + shape_str(bc_shape));
  }
  detail::require_axis("selective_scan", "D", 0, d.numel(), ch);
  if (order.empty()) {
    order.resize(len);
    for (std::size_t t = 0; t < len; ++t) order[t] = t;
  }
  detail::require_axis("selective_scan", "order", 0, order.size(), len);
  record_macs(2ULL * n * len * ch * st);

  const auto us = u.data(), ds = delta.data(), bs = b.data(), cs = c.data(), as = a_log.data(), dd = d.data();
  std::vector<double> y(n * len * ch, 0.0);
  std::vector<ScanElement> e(len);
  for (std::size_t bi = 0; bi < n; ++bi) {
    for (std::size_t ci = 0; ci < ch; ++ci) {
      for (std::size_t si = 0; si < st; ++si) {
        const double a = std::exp(as[ci * st + si]);
        for (std::size_t t = 0; t < len; ++t) {
          const std::size_t p = bi * len + order[t];
          const double dt = ds[p * ch + ci];
          e[t] = {std::exp(-dt * a), dt * bs[p * st + si] * us[p * ch + ci]};
        }
        run_scan(e, mode);
        for (std::size_t t = 0; t < len; ++t) {
          const std::size_t p = bi * len + order[t];
          y[p * ch + ci] += cs[p * st + si] * e[t].increment;
        }
      }
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t p = (bi * len + t) * ch + ci;
        y[p] += dd[ci] * us[p];
      }
    }
  }

  return detail::make_result(
      u.shape(), std::move(y), {u, delta, b, c, a_log, d}, "selective_scan",
      [=, order = std::move(order)](std::span<const double> gy) {
        double* gu = detail::grad_sink(u);
        double* gdelta = detail::grad_sink(delta);
        double* gb = detail::grad_sink(b);
        double* gc = detail::grad_sink(c);
        double* ga_log = detail::grad_sink(a_log);
        double* gd = detail::grad_sink(d);
        const auto us = u.data(), ds = delta.data(), bs = b.data(), cs = c.data(), as = a_log.data(), dd = d.data();
        std::vector<ScanElement> fwd(len), adj(len);
        std::vector<double> decay(len);
        for (std::size_t bi = 0; bi < n; ++bi) {
          for (std::size_t ci = 0; ci < ch; ++ci) {
            for (std::size_t si = 0; si < st; ++si) {
              const double a = std::exp(as[ci * st + si]);
              for (std::size_t t = 0; t < len; ++t) {
                const std::size_t p = bi * len + order[t];
                const double dt = ds[p * ch + ci];
                decay[t] = std::exp(-dt * a);
                fwd[t] = {decay[t], dt * bs[p * st + si] * us[p * ch + ci]};
              }
              run_scan(fwd, mode);
              // Adjoint recurrence runs backwards: lambda_t = abar_{t+1} lambda_{t+1} + C_t[s] gy_t[c].
              for (std::size_t k = 0; k < len; ++k) {
                const std::size_t t = len - 1 - k;
                const std::size_t p = bi * len + order[t];
                adj[k] = {k == 0 ? 1.0 : decay[t + 1], cs[p * st + si] * gy[p * ch + ci]};
              }
              run_scan(adj, mode);
              double ga_acc = 0.0;
              for (std::size_t t = 0; t < len; ++t) {
                const std::size_t p = bi * len + order[t];
                const double lambda = adj[len - 1 - t].increment;
                const double h_prev = t > 0 ? fwd[t - 1].increment : 0.0;
                const double dt = ds[p * ch + ci];
                const double uv = us[p * ch + ci];
                const double bv = bs[p * st + si];
                const double g_decay = lambda * h_prev * decay[t];
                if (gdelta) gdelta[p * ch + ci] += -g_decay * a + lambda * bv * uv;
                ga_acc += -g_decay * dt * a;
                if (gb) gb[p * st + si] += lambda * dt * uv;
                if (gu) gu[p * ch + ci] += lambda * dt * bv;
                if (gc) gc[p * st + si] += gy[p * ch + ci] * fwd[t].increment;
              }
              if (ga_log) ga_log[ci * st + si] += ga_acc;
            }
            for (std::size_t t = 0; t < len; ++t) {
              const std::size_t p = (bi * len + t) * ch + ci;
              if (gu) gu[p] += gy[p] * dd[ci];
              if (gd) gd[ci] += gy[p] * us[p];
            }
          }
        }
      });
}

// Parameters of one selective state-space layer over C channels with state size S.
struct SsmParams {
  std::size_t state_dim = 0;
  Tensor a_log;         // [C,S]
  Linear delta_proj;    // C -> C, softplus applied
  Linear b_proj;        // C -> S
  Linear c_proj;        // C -> S
  Tensor d;             // [C]

  static SsmParams make(std::size_t channels, std::size_t state_dim, Rng& rng) {
    SsmParams p;
    p.state_dim = state_dim;
    p.a_log = parameter(Shape{channels, state_dim});
    auto al = p.a_log.data_mut();
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t s = 0; s < state_dim; ++s) al[c * state_dim + s] = std::log(static_cast<double>(s + 1));
    p.delta_proj = Linear::make(channels, channels, true, rng);
    // Bias is the inverse softplus of a log-uniform step in [1e-3, 1e-1].
    for (double& v : p.delta_proj.bias.data_mut()) {
      const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
      v = dt + std::log(-std::expm1(-dt));
    }
    p.b_proj = Linear::make(channels, state_dim, false, rng);
    p.c_proj = Linear::make(channels, state_dim, false, rng);
    p.d = parameter(Shape{channels}, 1.0);
    return p;
  }

  std::size_t channels() const { return d.numel(); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(join_name(prefix, "A_log"), a_log, false);
    delta_proj.visit(join_name(prefix, "delta_proj"), f);
    b_proj.visit(join_name(prefix, "B_proj"), f);
    c_proj.visit(join_name(prefix, "C_proj"), f);
    f(join_name(prefix, "D"), d, false);
  }
};

// Projects u [N,L,C] to per-token (delta, B, C) and scans along `order`.
inline Tensor selective_scan(const Tensor& u, const SsmParams& params, ScanMode mode,
                             std::vector<std::size_t> order = {}) {
  const Tensor delta = softplus(params.delta_proj(u));
  const Tensor b = params.b_proj(u);
  const Tensor c = params.c_proj(u);
  return selective_scan(u, delta, b, c, params.a_log, params.d, mode, std::move(order));
}

namespace detail {
inline Tensor scan_sequence(const Tensor& u, const SsmParams& params, ScanMode mode) {
  require_rank(u, 2, "selective_scan", "u");
  if (u.dim(0) == 0) throw DimensionError("selective_scan: empty sequence (L = 0)");
  const Shape shape = u.shape();
  return reshape(selective_scan(reshape(u, Shape{1, shape[0], shape[1]}), params, mode), shape);
}
}  // namespace detail

// u: [L,C] -> [L,C], sequential recurrence (reference path).
inline Tensor selective_scan_seq(const Tensor& u, const SsmParams& params) {
  return detail::scan_sequence(u, params, ScanMode::sequential);
}

// u: [L,C] -> [L,C], associative prefix scan (default execution path).
inline Tensor selective_scan_par(const Tensor& u, const SsmParams& params) {
  return detail::scan_sequence(u, params, ScanMode::parallel);
}

// Visual state-space block: channel LayerNorm, input and gate projections,
// a shared selective scan along four paths merged by averaging, SiLU gating,
// output projection and a residual connection. Layout in and out is [N,C,H,W].
struct VssBlock {
  LayerNorm norm;
  Linear in_proj;
  Linear gate_proj;
  SsmParams ssm;
  Linear out_proj;

  static VssBlock make(std::size_t channels, std::size_t state_dim, Rng& rng, double ln_eps = 1e-5) {
    VssBlock b;
    b.norm = LayerNorm::make(channels, ln_eps);
    b.in_proj = Linear::make(channels, channels, true, rng);
    b.gate_proj = Linear::make(channels, channels, true, rng);
    b.ssm = SsmParams::make(channels, state_dim, rng);
    b.out_proj = Linear::make(channels, channels, true, rng);
    return b;
  }

  std::size_t channels() const { return ssm.channels(); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    norm.visit(join_name(prefix, "norm"), f);
    in_proj.visit(join_name(prefix, "in_proj"), f);
    gate_proj.visit(join_name(prefix, "gate_proj"), f);
    ssm.visit(join_name(prefix, "ssm"), f);
    out_proj.visit(join_name(prefix, "out_proj"), f);
  }
};

struct VssIntermediates {
  Tensor tokens;  // [N,L,C] block input
  Tensor gate;    // [N,L,C]
  std::array<Tensor, 4> paths;  // per-path scan outputs, row-major token layout
};

inline VssIntermediates vss_scan_paths(const Tensor& x, const VssBlock& block, ScanMode mode = ScanMode::parallel) {
  detail::require_rank(x, 4, "vss_block", "input");
  detail::require_axis("vss_block", "input channel", 1, x.dim(1), block.channels());
  const std::size_t h = x.dim(2), w = x.dim(3);
  VssIntermediates out;
  out.tokens = to_tokens(x);
  const Tensor z = block.norm(out.tokens);
  const Tensor u = silu(block.in_proj(z));
  out.gate = silu(block.gate_proj(z));
  // Projections are per token, so one set serves all four paths.
  const Tensor delta = softplus(block.ssm.delta_proj(u));
  const Tensor b = block.ssm.b_proj(u);
  const Tensor c = block.ssm.c_proj(u);
  for (std::size_t k = 0; k < 4; ++k) {
    out.paths[k] = selective_scan(u, delta, b, c, block.ssm.a_log, block.ssm.d, mode,
                                  scan_path_order(h, w, kScanPaths[k]));
  }
  return out;
}

inline Tensor vss_block(const Tensor& x, const VssBlock& block, ScanMode mode = ScanMode::parallel) {
  const auto parts = vss_scan_paths(x, block, mode);
  Tensor merged = add(add(parts.paths[0], parts.paths[1]), add(parts.paths[2], parts.paths[3]));
  merged = scale(merged, 0.25);
  const Tensor y = block.out_proj(mul(merged, parts.gate));
  return add(x, from_tokens(y, x.dim(2), x.dim(3)));
}

// 2x2 patch merge followed by a 1x1 projection 4C -> C_out.
struct Downsample {
  Conv2d proj;

  static Downsample make(std::size_t in_channels, std::size_t out_channels, Rng& rng) {
    return Downsample{Conv2d::make(4 * in_channels, out_channels, 1, 1, 0, true, rng)};
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    proj.visit(join_name(prefix, "proj"), f);
  }
};

inline Tensor downsample(const Tensor& x, const Downsample& params) { return params.proj(patch_merge(x)); }

}  // namespace vmx
