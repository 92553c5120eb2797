#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include "vmx/errors.hpp"
#include "vmx/mask.hpp"
#include "vmx/rng.hpp"
#include "vmx/tensor.hpp"

namespace vmx {

// One co-registered training sample. ct and pet are [1,H,W] in [0,1].
struct ModalityPair {
  std::string id;
  Tensor ct;
  Tensor pet;
  BinaryMask mask;

  std::size_t height() const { return mask.height; }
  std::size_t width() const { return mask.width; }
};

inline constexpr double kCtWindowLow = -1200.0;
inline constexpr double kCtWindowHigh = -200.0;
inline constexpr double kDefaultSuvReference = 10.0;

// Clip Hounsfield units to the lung window, then map it affinely onto [0, 1].
inline Tensor preprocess_ct(const Tensor& raw_hu) {
  std::vector<double> out(raw_hu.numel());
  const auto xs = raw_hu.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = std::clamp(xs[i], kCtWindowLow, kCtWindowHigh);
    out[i] = (v - kCtWindowLow) / (kCtWindowHigh - kCtWindowLow);
  }
  return Tensor(raw_hu.shape(), std::move(out));
}

// raw * suv_scale gives SUV; divided by the reference ceiling and clamped to [0, 1].
inline Tensor preprocess_pet(const Tensor& raw, double suv_scale, double suv_reference = kDefaultSuvReference) {
  if (!(suv_scale > 0.0)) throw ParameterError("preprocess_pet: suv_scale must be positive, got " + std::to_string(suv_scale));
  if (!(suv_reference > 0.0)) throw ParameterError("preprocess_pet: suv_reference must be positive");
  std::vector<double> out(raw.numel());
  const auto xs = raw.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(xs[i] * suv_scale / suv_reference, 0.0, 1.0);
  return Tensor(raw.shape(), std::move(out));
}

// Bilinear resize of a [C,H,W] image to [C,size,size] (half-pixel centers).
inline Tensor resize(const Tensor& x, std::size_t size) {
  if (size < 1) throw ParameterError("resize: size must be >= 1");
  if (x.rank() != 3) throw DimensionError("resize: expected [C,H,W], got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const auto xs = x.data();
  std::vector<double> out(c * size * size);
  auto source = [](std::size_t dst, std::size_t in, std::size_t out_n, std::size_t& i0, std::size_t& i1, double& f) {
    double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(out_n) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(std::floor(s));
    i1 = std::min(i0 + 1, in - 1);
    f = s - static_cast<double>(i0);
  };
  for (std::size_t r = 0; r < size; ++r) {
    std::size_t r0, r1;
    double fr;
    source(r, h, size, r0, r1, fr);
    for (std::size_t q = 0; q < size; ++q) {
      std::size_t c0, c1;
      double fc;
      source(q, w, size, c0, c1, fc);
      for (std::size_t k = 0; k < c; ++k) {
        const double* p = xs.data() + k * h * w;
        const double top = p[r0 * w + c0] + fc * (p[r0 * w + c1] - p[r0 * w + c0]);
        const double bottom = p[r1 * w + c0] + fc * (p[r1 * w + c1] - p[r1 * w + c0]);
        out[(k * size + r) * size + q] = top + fr * (bottom - top);
      }
    }
  }
  return Tensor(Shape{c, size, size}, std::move(out));
}

// Nearest-neighbour resize; output stays binary.
inline BinaryMask resize(const BinaryMask& m, std::size_t size) {
  if (size < 1) throw ParameterError("resize: size must be >= 1");
  BinaryMask out(size, size);
  out.spacing_row = m.spacing_row * static_cast<double>(m.height) / static_cast<double>(size);
  out.spacing_col = m.spacing_col * static_cast<double>(m.width) / static_cast<double>(size);
  for (std::size_t r = 0; r < size; ++r) {
    const std::size_t sr = std::min(r * m.height / size, m.height - 1);
    for (std::size_t c = 0; c < size; ++c) {
      const std::size_t sc = std::min(c * m.width / size, m.width - 1);
      out.at(r, c) = m.at(sr, sc);
    }
  }
  return out;
}

// Parameters of the synthetic thoracic PET/CT phantom. Lengths are fractions of
// the image side unless noted.
struct PhantomSpec {
  std::uint64_t rng_seed = 7;
  std::size_t size = 64;
  std::size_t tumor_count_min = 1;
  std::size_t tumor_count_max = 2;
  double tumor_radius_min = 0.055;
  double tumor_radius_max = 0.12;
  std::size_t vessel_count_min = 1;
  std::size_t vessel_count_max = 3;
  double vessel_radius_min = 0.02;
  double vessel_radius_max = 0.04;
  double ct_noise_sigma = 25.0;   // HU
  double pet_noise_sigma = 0.15;  // SUV
  double lesion_suv_min = 3.0;
  double lesion_suv_max = 7.0;
  double pet_blur = 0.8;            // hot-spot sigma relative to tumor radius
  double offset_probability = 0.3;  // PET hot spot partially displaced
  double offset_fraction = 0.6;     // displacement relative to tumor radius
  double body_axis_row_min = 0.30, body_axis_row_max = 0.38;
  double body_axis_col_min = 0.40, body_axis_col_max = 0.47;
  double lung_axis_row_min = 0.20, lung_axis_row_max = 0.26;
  double lung_axis_col_min = 0.12, lung_axis_col_max = 0.16;
  double air_hu = -1000.0, tissue_hu = 40.0, lung_hu = -850.0, tumor_hu = 20.0, vessel_hu = -50.0;
  double tissue_suv = 1.0, lung_suv = 0.4;
  double suv_scale = 0.01;  // raw PET units -> SUV
  double suv_reference = kDefaultSuvReference;

  void validate() const {
    auto range = [](double lo, double hi, const char* what) {
      if (!(lo <= hi)) throw ParameterError(std::string("phantom spec: empty range for ") + what);
    };
    if (size < 8) throw ParameterError("phantom spec: size must be >= 8");
    if (tumor_count_min > tumor_count_max) throw ParameterError("phantom spec: empty tumor count range");
    if (vessel_count_min > vessel_count_max) throw ParameterError("phantom spec: empty vessel count range");
    range(tumor_radius_min, tumor_radius_max, "tumor radius");
    range(vessel_radius_min, vessel_radius_max, "vessel radius");
    range(lesion_suv_min, lesion_suv_max, "lesion SUV");
    range(body_axis_row_min, body_axis_row_max, "body axis");
    range(body_axis_col_min, body_axis_col_max, "body axis");
    range(lung_axis_row_min, lung_axis_row_max, "lung axis");
    range(lung_axis_col_min, lung_axis_col_max, "lung axis");
    if (ct_noise_sigma < 0 || pet_noise_sigma < 0) throw ParameterError("phantom spec: noise sigma must be >= 0");
    if (!(suv_scale > 0)) throw ParameterError("phantom spec: suv_scale must be positive");
  }
};

// Ground-truth geometry behind a generated phantom (pixel units).
struct PhantomTruth {
  struct Lesion {
    double row, col, radius;
    double pet_row, pet_col, amplitude;  // hot-spot centre and peak SUV above background
  };
  std::vector<Lesion> lesions;
  bool pet_offset = false;
  // Noise-free SUV maps, for statistics in tests.
  std::vector<double> background_suv;
};

namespace detail {

struct Ellipse {
  double row, col, axis_row, axis_col;
  // < 1 inside.
  double level(double r, double c) const {
    const double dr = (r - row) / axis_row, dc = (c - col) / axis_col;
    return dr * dr + dc * dc;
  }
};

inline double soft_step(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace detail

// CT: elliptical body with two lungs, soft tumour blobs and vessel-like
// distractors, plus Gaussian noise, windowed via preprocess_ct. PET: tissue and
// lung background plus a Gaussian hot spot per tumour, optionally displaced,
// plus noise, normalized via preprocess_pet. Deterministic in (seed, index).
inline ModalityPair generate_phantom(const PhantomSpec& spec, std::uint64_t index, PhantomTruth* truth = nullptr) {
  spec.validate();
  Rng rng(mix_seed(spec.rng_seed, index));
  const std::size_t n = spec.size;
  const double side = static_cast<double>(n);
  const double mid = (side - 1.0) / 2.0;

  const detail::Ellipse body{mid + rng.uniform(-0.03, 0.03) * side, mid + rng.uniform(-0.03, 0.03) * side,
                             rng.uniform(spec.body_axis_row_min, spec.body_axis_row_max) * side,
                             rng.uniform(spec.body_axis_col_min, spec.body_axis_col_max) * side};
  std::array<detail::Ellipse, 2> lungs;
  for (int k = 0; k < 2; ++k) {
    const double sign = k == 0 ? -1.0 : 1.0;
    lungs[k] = detail::Ellipse{body.row + rng.uniform(-0.03, 0.02) * side,
                               body.col + sign * rng.uniform(0.19, 0.23) * side,
                               rng.uniform(spec.lung_axis_row_min, spec.lung_axis_row_max) * side,
                               rng.uniform(spec.lung_axis_col_min, spec.lung_axis_col_max) * side};
  }

  // Place a circle of radius r inside a random lung.
  auto place = [&](double radius, double& row, double& col) {
    const auto& lung = lungs[rng.uniform_int(0, 1)];
    const double rr = std::max(lung.axis_row - radius - 1.0, 0.0);
    const double rc = std::max(lung.axis_col - radius - 1.0, 0.0);
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double dist = std::sqrt(rng.uniform()) * 0.85;
    row = lung.row + dist * rr * std::sin(angle);
    col = lung.col + dist * rc * std::cos(angle);
  };

  PhantomTruth local;
  PhantomTruth& t = truth ? *truth : local;
  t = PhantomTruth{};
  const auto tumors = static_cast<std::size_t>(
      rng.uniform_int(static_cast<std::int64_t>(spec.tumor_count_min), static_cast<std::int64_t>(spec.tumor_count_max)));
  t.pet_offset = rng.bernoulli(spec.offset_probability);
  for (std::size_t k = 0; k < tumors; ++k) {
    PhantomTruth::Lesion l{};
    l.radius = rng.uniform(spec.tumor_radius_min, spec.tumor_radius_max) * side;
    place(l.radius, l.row, l.col);
    l.pet_row = l.row;
    l.pet_col = l.col;
    if (t.pet_offset) {
      const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
      l.pet_row += spec.offset_fraction * l.radius * std::sin(angle);
      l.pet_col += spec.offset_fraction * l.radius * std::cos(angle);
    }
    l.amplitude = rng.uniform(spec.lesion_suv_min, spec.lesion_suv_max);
    t.lesions.push_back(l);
  }
  struct Vessel {
    double row, col, radius;
  };
  std::vector<Vessel> vessels(static_cast<std::size_t>(rng.uniform_int(
      static_cast<std::int64_t>(spec.vessel_count_min), static_cast<std::int64_t>(spec.vessel_count_max))));
  for (auto& v : vessels) {
    v.radius = rng.uniform(spec.vessel_radius_min, spec.vessel_radius_max) * side;
    place(v.radius, v.row, v.col);
  }

  std::vector<double> hu(n * n), suv(n * n);
  t.background_suv.assign(n * n, 0.0);
  BinaryMask mask(n, n);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      const double y = static_cast<double>(r), x = static_cast<double>(c);
      // Soft-edged tissue classes.
      const double in_body = detail::soft_step((1.0 - body.level(y, x)) * 12.0);
      double in_lung = 0.0;
      for (const auto& l : lungs) in_lung = std::max(in_lung, detail::soft_step((1.0 - l.level(y, x)) * 10.0));
      in_lung *= in_body;
      double value = spec.air_hu + in_body * (spec.tissue_hu - spec.air_hu);
      value += in_lung * (spec.lung_hu - spec.tissue_hu);
      double bg = in_body * spec.tissue_suv + in_lung * (spec.lung_suv - spec.tissue_suv);
      for (const auto& v : vessels) {
        const double d = std::hypot(y - v.row, x - v.col);
        const double w = detail::soft_step((v.radius - d) * 2.0);
        value += w * (spec.vessel_hu - value);
      }
      double uptake = 0.0;
      for (const auto& l : t.lesions) {
        const double d = std::hypot(y - l.row, x - l.col);
        const double w = detail::soft_step((l.radius - d) * 2.5);
        value += w * (spec.tumor_hu - value);
        if (d <= l.radius) mask.at(r, c) = 1;
        const double sigma = spec.pet_blur * l.radius;
        const double dp2 = (y - l.pet_row) * (y - l.pet_row) + (x - l.pet_col) * (x - l.pet_col);
        uptake += l.amplitude * std::exp(-dp2 / (2.0 * sigma * sigma));
      }
      hu[r * n + c] = value + rng.normal(0.0, spec.ct_noise_sigma);
      t.background_suv[r * n + c] = bg;
      suv[r * n + c] = bg + uptake + rng.normal(0.0, spec.pet_noise_sigma);
    }
  }
  for (double& v : suv) v /= spec.suv_scale;

  ModalityPair pair;
  char id[32];
  std::snprintf(id, sizeof id, "phantom_%06llu", static_cast<unsigned long long>(index));
  pair.id = id;
  pair.ct = preprocess_ct(Tensor(Shape{1, n, n}, std::move(hu)));
  pair.pet = preprocess_pet(Tensor(Shape{1, n, n}, std::move(suv)), spec.suv_scale, spec.suv_reference);
  pair.mask = std::move(mask);
  // Stored as f32 on disk; keep in-memory samples on the same grid so containers round-trip exactly.
  for (auto* t : {&pair.ct, &pair.pet})
    for (double& v : t->data_mut()) v = static_cast<double>(static_cast<float>(v));
  return pair;
}

inline std::vector<ModalityPair> generate_dataset(const PhantomSpec& spec, std::size_t count) {
  std::vector<ModalityPair> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_phantom(spec, i));
  return out;
}

struct AugmentSpec {
  double flip_probability = 0.5;
  double crop_min_fraction = 0.8;
  double crop_max_fraction = 1.0;
};

// One sampled geometric transform, applied identically to every channel.
struct AugmentDecision {
  bool flip_horizontal = false;
  bool flip_vertical = false;
  std::size_t crop_top = 0;
  std::size_t crop_left = 0;
  std::size_t crop_side = 0;  // 0: no crop
};

inline AugmentDecision sample_augment(std::size_t size, Rng& rng, const AugmentSpec& spec = {}) {
  if (spec.crop_max_fraction > 1.0 || spec.crop_min_fraction <= 0.0 || spec.crop_min_fraction > spec.crop_max_fraction) {
    throw ParameterError("augment: crop fractions must satisfy 0 < min <= max <= 1");
  }
  AugmentDecision d;
  d.flip_horizontal = rng.bernoulli(spec.flip_probability);
  d.flip_vertical = rng.bernoulli(spec.flip_probability);
  const double f = rng.uniform(spec.crop_min_fraction, spec.crop_max_fraction);
  d.crop_side = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(f * static_cast<double>(size))), 1, size);
  d.crop_top = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(size - d.crop_side)));
  d.crop_left = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(size - d.crop_side)));
  return d;
}

namespace detail {

template <class Get, class Set>
void transform_plane(std::size_t h, std::size_t w, const AugmentDecision& d, Get get, Set set) {
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t sr = d.flip_vertical ? h - 1 - r : r;
      const std::size_t sc = d.flip_horizontal ? w - 1 - c : c;
      set(r, c, get(sr, sc));
    }
}

inline Tensor crop_image(const Tensor& x, std::size_t top, std::size_t left, std::size_t side) {
  const std::size_t c = x.dim(0), w = x.dim(2);
  std::vector<double> out(c * side * side);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t r = 0; r < side; ++r)
      for (std::size_t q = 0; q < side; ++q) out[(k * side + r) * side + q] = x[(k * x.dim(1) + top + r) * w + left + q];
  return Tensor(Shape{c, side, side}, std::move(out));
}

}  // namespace detail

// Flip, crop and resize back to the input size; ct, pet and mask move together.
inline ModalityPair apply_augment(const ModalityPair& pair, const AugmentDecision& d) {
  const std::size_t h = pair.height(), w = pair.width();
  if (pair.ct.shape() != Shape{1, h, w} || pair.pet.shape() != Shape{1, h, w}) {
    throw DimensionError("augment: ct/pet/mask shapes disagree for sample " + pair.id);
  }
  if (d.crop_side > std::min(h, w) || d.crop_top + d.crop_side > h || d.crop_left + d.crop_side > w) {
    throw ParameterError("augment: crop exceeds the input size");
  }
  ModalityPair out;
  out.id = pair.id;
  auto flip = [&](const Tensor& x) {
    std::vector<double> v(x.numel());
    detail::transform_plane(h, w, d, [&](std::size_t r, std::size_t c) { return x[r * w + c]; },
                            [&](std::size_t r, std::size_t c, double val) { v[r * w + c] = val; });
    return Tensor(x.shape(), std::move(v));
  };
  out.ct = flip(pair.ct);
  out.pet = flip(pair.pet);
  out.mask = BinaryMask(h, w);
  out.mask.spacing_row = pair.mask.spacing_row;
  out.mask.spacing_col = pair.mask.spacing_col;
  detail::transform_plane(h, w, d, [&](std::size_t r, std::size_t c) { return pair.mask.at(r, c); },
                          [&](std::size_t r, std::size_t c, std::uint8_t val) { out.mask.at(r, c) = val; });
  if (d.crop_side > 0 && (d.crop_side != h || d.crop_side != w)) {
    const std::size_t size = h;
    out.ct = resize(detail::crop_image(out.ct, d.crop_top, d.crop_left, d.crop_side), size);
    out.pet = resize(detail::crop_image(out.pet, d.crop_top, d.crop_left, d.crop_side), size);
    BinaryMask cropped(d.crop_side, d.crop_side);
    for (std::size_t r = 0; r < d.crop_side; ++r)
      for (std::size_t c = 0; c < d.crop_side; ++c) cropped.at(r, c) = out.mask.at(d.crop_top + r, d.crop_left + c);
    cropped.spacing_row = out.mask.spacing_row;
    cropped.spacing_col = out.mask.spacing_col;
    out.mask = resize(cropped, size);
  }
  return out;
}

inline ModalityPair augment(const ModalityPair& pair, Rng& rng, const AugmentSpec& spec = {}) {
  return apply_augment(pair, sample_augment(pair.height(), rng, spec));
}

}  // namespace vmx
