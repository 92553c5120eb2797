#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "vmx/data.hpp"
#include "vmx/network.hpp"
#include "vmx/rng.hpp"
#include "vmx/train.hpp"

namespace vmx {

struct GradcheckOptions {
  ModelConfig model = ModelConfig::micro();
  std::size_t samples = 2;
  std::size_t min_probes = 200;
  // Ridders extrapolation: central differences from `step` down by `shrink`
  // per level, keeping the tableau entry with the smallest error estimate.
  // Scan parameters carry gradients near 1e-10 that need steps ~1e-2 to clear
  // roundoff, while the stem needs ~1e-5 for truncation; one fixed h can't do both.
  double step = 1e-2;
  double shrink = 2.0;
  std::size_t levels = 14;
  std::size_t starts = 3;
  // Relative roundoff of one loss evaluation, a few ulps of summation error.
  double loss_noise = 1e-15;
  // Denominator floor so gradients near zero are judged on an absolute scale.
  double floor = 1e-8;
  double loss_mix = 0.5;
  std::uint64_t seed = 11;
};

struct GradProbe {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradcheckReport {
  std::vector<GradProbe> probes;
  double max_rel_error = 0.0;
  std::string worst;
  std::map<std::string, double> group_max;  // by top-level module group
  std::size_t tensors_covered = 0;
};

inline double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct Extrapolated {
  double value = 0.0;
  double error = 0.0;
};

// Numerical Recipes dfridr. `noise` is the absolute roundoff in one loss
// evaluation; an entry built from steps down to h can't be trusted below
// noise / h, which stops two equally rounded differences from posing as exact.
template <class F>
Extrapolated ridders(F&& central, double h, double shrink, std::size_t levels, double noise) {
  const double s2 = shrink * shrink;
  std::vector<std::vector<double>> a(levels, std::vector<double>(levels));
  a[0][0] = central(h);
  double best = a[0][0];
  double err = std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i < levels; ++i) {
    h /= shrink;
    a[0][i] = central(h);
    double fac = s2;
    for (std::size_t j = 1; j <= i; ++j) {
      a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
      fac *= s2;
      const double e = std::max({std::abs(a[j][i] - a[j - 1][i]), std::abs(a[j][i] - a[j - 1][i - 1]), noise / h});
      if (e <= err) {
        err = e;
        best = a[j][i];
      }
    }
    // Higher order got worse by a wide margin: roundoff has taken over.
    if (std::abs(a[i][i] - a[i - 1][i - 1]) >= 2.0 * err) break;
  }
  return {best, err};
}

// Analytic gradients of the segmentation loss against central differences of
// the same loss, on a small model in training mode.
inline GradcheckReport gradcheck(const GradcheckOptions& opt = {}) {
  VMambaX model = VMambaX::make(opt.model);
  PhantomSpec spec;
  spec.rng_seed = opt.seed;
  spec.size = opt.model.input_size;
  spec.tumor_radius_min = 0.15;
  spec.tumor_radius_max = 0.25;
  spec.vessel_radius_min = 0.06;
  spec.vessel_radius_max = 0.1;
  const auto pairs = generate_dataset(spec, opt.samples);
  std::vector<std::size_t> idx(pairs.size());
  std::iota(idx.begin(), idx.end(), 0);
  const Batch batch = make_batch(pairs, idx, opt.model.input_size);

  // Running statistics shift on every training forward but never feed back into
  // a training-mode output, so repeated evaluations see the same function.
  auto loss_value = [&] {
    NoGradGuard guard;
    return segmentation_loss(model.forward(batch.ct, batch.pet, true).logits, batch.target, opt.loss_mix).item();
  };

  const double noise = opt.loss_noise * std::max(std::abs(loss_value()), 1.0);
  model.zero_grad();
  backward(segmentation_loss(model.forward(batch.ct, batch.pet, true).logits, batch.target, opt.loss_mix));

  auto named = model.named_parameters();
  Rng rng(mix_seed(opt.seed, 0x6772616463));
  std::vector<std::pair<std::size_t, std::size_t>> picks;  // (tensor, element)
  for (std::size_t t = 0; t < named.size(); ++t) {
    picks.emplace_back(t, static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(named[t].second.numel() - 1))));
  }
  std::size_t total = 0;
  for (const auto& [name, t] : named) total += t.numel();
  while (picks.size() < opt.min_probes) {
    // Uniform over all scalars.
    auto flat = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(total - 1)));
    std::size_t t = 0;
    while (flat >= named[t].second.numel()) flat -= named[t++].second.numel();
    picks.emplace_back(t, flat);
  }

  GradcheckReport report;
  report.tensors_covered = named.size();
  for (const auto& [t, k] : picks) {
    Tensor& p = named[t].second;
    auto values = p.data_mut();
    const double original = values[k];
    auto central = [&](double h) {
      values[k] = original + h;
      const double up = loss_value();
      values[k] = original - h;
      const double down = loss_value();
      return (up - down) / (2.0 * h);
    };
    // A few starting steps a decade apart; the start that lies in a region
    // where the loss is locally polynomial reports the smallest error.
    Extrapolated est{0.0, std::numeric_limits<double>::infinity()};
    double start = opt.step * (1.0 + std::abs(original));
    for (std::size_t s = 0; s < opt.starts; ++s, start *= 0.1) {
      const Extrapolated e = ridders(central, start, opt.shrink, opt.levels, noise);
      if (e.error < est.error) est = e;
    }
    const double numeric = est.value;
    values[k] = original;
    GradProbe probe;
    probe.name = named[t].first;
    probe.index = k;
    probe.analytic = p.has_grad() ? p.grad()[k] : 0.0;
    probe.numeric = numeric;
    probe.rel_error = relative_error(probe.analytic, probe.numeric, opt.floor);
    if (probe.rel_error > report.max_rel_error || report.worst.empty()) {
      report.max_rel_error = probe.rel_error;
      report.worst = probe.name + "[" + std::to_string(k) + "]";
    }
    std::string group = probe.name.substr(0, probe.name.find('.'));
    while (!group.empty() && std::isdigit(static_cast<unsigned char>(group.back()))) group.pop_back();
    report.group_max[group] = std::max(report.group_max[group], probe.rel_error);
    report.probes.push_back(std::move(probe));
  }
  return report;
}

}  // namespace vmx
