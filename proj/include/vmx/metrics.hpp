#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "vmx/mask.hpp"

namespace vmx {

namespace detail {

struct Overlap {
  std::size_t inter = 0, a = 0, b = 0;
};

inline Overlap overlap(const BinaryMask& a, const BinaryMask& b, const char* op) {
  require_same_shape(a, b, op);
  Overlap o;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    o.a += a.values[i];
    o.b += b.values[i];
    o.inter += a.values[i] & b.values[i];
  }
  return o;
}

}  // namespace detail

// Both masks empty counts as perfect agreement.
inline double iou(const BinaryMask& a, const BinaryMask& b) {
  const auto o = detail::overlap(a, b, "iou");
  const std::size_t uni = o.a + o.b - o.inter;
  return uni == 0 ? 1.0 : static_cast<double>(o.inter) / static_cast<double>(uni);
}

inline double dice(const BinaryMask& a, const BinaryMask& b) {
  const auto o = detail::overlap(a, b, "dice");
  const std::size_t total = o.a + o.b;
  return total == 0 ? 1.0 : 2.0 * static_cast<double>(o.inter) / static_cast<double>(total);
}

// Foreground pixels with a background 4-neighbour or on the image edge.
inline std::vector<std::size_t> boundary_pixels(const BinaryMask& m) {
  std::vector<std::size_t> out;
  const std::size_t h = m.height, w = m.width;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      if (!m.at(r, c)) continue;
      const bool edge = r == 0 || c == 0 || r + 1 == h || c + 1 == w;
      if (edge || !m.at(r - 1, c) || !m.at(r + 1, c) || !m.at(r, c - 1) || !m.at(r, c + 1)) out.push_back(r * w + c);
    }
  return out;
}

inline BinaryMask boundary_mask(const BinaryMask& m) {
  BinaryMask out(m.height, m.width);
  out.spacing_row = m.spacing_row;
  out.spacing_col = m.spacing_col;
  for (auto i : boundary_pixels(m)) out.values[i] = 1;
  return out;
}

namespace detail {

// 1D squared-distance transform (lower envelope of parabolas), sample spacing s.
inline void edt_1d(const double* f, double* d, std::size_t n, double s, std::vector<std::size_t>& v,
                   std::vector<double>& z) {
  const double inf = std::numeric_limits<double>::infinity();
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  std::size_t k = 0;
  std::size_t first = n;
  for (std::size_t q = 0; q < n; ++q)
    if (f[q] < inf) {
      first = q;
      break;
    }
  if (first == n) {
    std::fill(d, d + n, inf);
    return;
  }
  v[0] = first;
  z[0] = -inf;
  z[1] = inf;
  auto pos = [s](std::size_t q) { return s * static_cast<double>(q); };
  for (std::size_t q = first + 1; q < n; ++q) {
    if (f[q] == inf) continue;
    double sv;
    while (true) {
      const std::size_t p = v[k];
      sv = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
      if (sv <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    ++k;
    v[k] = q;
    z[k] = sv;
    z[k + 1] = inf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < pos(q)) ++k;
    const double dq = pos(q) - pos(v[k]);
    d[q] = dq * dq + f[v[k]];
  }
}

}  // namespace detail

// Exact squared Euclidean distance from every pixel to the nearest set pixel of
// `sites`, honouring anisotropic spacing. Infinite when `sites` is empty.
inline std::vector<double> squared_distance_transform(const BinaryMask& sites) {
  const std::size_t h = sites.height, w = sites.width;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> g(h * w);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = sites.values[i] ? 0.0 : inf;
  std::vector<std::size_t> v;
  std::vector<double> z;
  std::vector<double> in(std::max(h, w)), out(std::max(h, w));
  for (std::size_t c = 0; c < w; ++c) {
    for (std::size_t r = 0; r < h; ++r) in[r] = g[r * w + c];
    detail::edt_1d(in.data(), out.data(), h, sites.spacing_row, v, z);
    for (std::size_t r = 0; r < h; ++r) g[r * w + c] = out[r];
  }
  for (std::size_t r = 0; r < h; ++r) {
    std::copy(g.begin() + static_cast<std::ptrdiff_t>(r * w), g.begin() + static_cast<std::ptrdiff_t>((r + 1) * w),
              in.begin());
    detail::edt_1d(in.data(), out.data(), w, sites.spacing_col, v, z);
    std::copy(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(w), g.begin() + static_cast<std::ptrdiff_t>(r * w));
  }
  return g;
}

// Linear interpolation between closest ranks at q * (n - 1).
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const double rank = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double f = rank - static_cast<double>(lo);
  return values[lo] + f * (values[hi] - values[lo]);
}

// Pooled 95th percentile of boundary-to-boundary distances in both directions.
// Empty when either mask has no foreground.
inline std::optional<double> hd95(const BinaryMask& a, const BinaryMask& b) {
  require_same_shape(a, b, "hd95");
  if (a.empty_foreground() || b.empty_foreground()) return std::nullopt;
  BinaryMask ba = boundary_mask(a), bb = boundary_mask(b);
  ba.spacing_row = bb.spacing_row = a.spacing_row;
  ba.spacing_col = bb.spacing_col = a.spacing_col;
  const auto da = squared_distance_transform(ba);
  const auto db = squared_distance_transform(bb);
  std::vector<double> pooled;
  for (std::size_t i = 0; i < ba.values.size(); ++i) {
    if (ba.values[i]) pooled.push_back(std::sqrt(db[i]));
    if (bb.values[i]) pooled.push_back(std::sqrt(da[i]));
  }
  return percentile(std::move(pooled), 0.95);
}

struct MetricReport {
  double iou = 0.0;
  double dice = 0.0;
  std::optional<double> hd95;
};

inline MetricReport compare_masks(const BinaryMask& prediction, const BinaryMask& truth) {
  return MetricReport{iou(prediction, truth), dice(prediction, truth), hd95(prediction, truth)};
}

struct SampleMetrics {
  std::string id;
  MetricReport report;
};

struct DatasetMetrics {
  std::vector<SampleMetrics> samples;
  double mean_iou = 0.0;
  double mean_dice = 0.0;
  std::optional<double> mean_hd95;  // over samples where it is defined
  std::size_t hd95_undefined = 0;
};

inline DatasetMetrics aggregate(std::vector<SampleMetrics> samples) {
  DatasetMetrics out;
  double hd_sum = 0.0;
  std::size_t hd_n = 0;
  for (const auto& s : samples) {
    out.mean_iou += s.report.iou;
    out.mean_dice += s.report.dice;
    if (s.report.hd95) {
      hd_sum += *s.report.hd95;
      ++hd_n;
    } else {
      ++out.hd95_undefined;
    }
  }
  if (!samples.empty()) {
    out.mean_iou /= static_cast<double>(samples.size());
    out.mean_dice /= static_cast<double>(samples.size());
  }
  if (hd_n) out.mean_hd95 = hd_sum / static_cast<double>(hd_n);
  out.samples = std::move(samples);
  return out;
}

inline std::string format_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// One line per sample, then a "# mean" footer line.
inline void write_report(std::ostream& os, const DatasetMetrics& m) {
  for (const auto& s : m.samples) {
    os << s.id << ' ' << format_metric(s.report.iou) << ' ' << format_metric(s.report.dice) << ' '
       << (s.report.hd95 ? format_metric(*s.report.hd95) : std::string("NA")) << '\n';
  }
  os << "# mean " << m.samples.size() << ' ' << format_metric(m.mean_iou) << ' ' << format_metric(m.mean_dice) << ' '
     << (m.mean_hd95 ? format_metric(*m.mean_hd95) : std::string("NA")) << " hd95_undefined=" << m.hd95_undefined
     << '\n';
}

}  // namespace vmx
