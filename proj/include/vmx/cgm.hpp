#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <string>

#include "vmx/layers.hpp"
#include "vmx/ops.hpp"
#include "vmx/rng.hpp"
#include "vmx/tensor.hpp"

namespace vmx {

enum class Modality { ct, pet };

inline const char* modality_name(Modality m) { return m == Modality::ct ? "ct" : "pet"; }

// Gate parameters of one modality m. The channel gate is
//   c_m = sigmoid(expand(gelu(BN(squeeze(p)))))
// with p the pooled 2C descriptor; the spatial gate is s_m = sigmoid(spatial(F)).
struct CgmBranch {
  Conv2d squeeze;   // 1x1, 2C -> C_hidden, no bias (followed by BN)
  BatchNorm2d norm;
  Conv2d expand;    // 1x1, C_hidden -> C
  Conv2d spatial;   // 3x3 pad 1, 2C -> 1

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    squeeze.visit(join_name(prefix, "squeeze"), f);
    norm.visit(join_name(prefix, "bn"), f);
    expand.visit(join_name(prefix, "expand"), f);
    spatial.visit(join_name(prefix, "spatial"), f);
  }
};

inline std::size_t cgm_hidden_channels(std::size_t channels, std::size_t ratio) {
  return std::max<std::size_t>(channels / std::max<std::size_t>(ratio, 1), 4);
}

// Context-gated cross-modal perception parameters for one encoder stage.
// The two modalities hold independent parameter sets.
struct CgmParams {
  CgmBranch ct;
  CgmBranch pet;

  static CgmParams make(std::size_t channels, std::size_t bottleneck_ratio, Rng& rng, double bn_momentum = 0.1,
                        double bn_eps = 1e-5) {
    const std::size_t hidden = cgm_hidden_channels(channels, bottleneck_ratio);
    auto branch = [&] {
      CgmBranch b;
      b.squeeze = Conv2d::make(2 * channels, hidden, 1, 1, 0, false, rng);
      b.norm = BatchNorm2d::make(hidden, bn_momentum, bn_eps);
      b.expand = Conv2d::make(hidden, channels, 1, 1, 0, true, rng);
      b.spatial = Conv2d::make(2 * channels, 1, 3, 1, 1, true, rng);
      return b;
    };
    CgmParams p;
    p.ct = branch();
    p.pet = branch();
    return p;
  }

  CgmBranch& branch(Modality m) { return m == Modality::ct ? ct : pet; }
  const CgmBranch& branch(Modality m) const { return m == Modality::ct ? ct : pet; }
  std::size_t channels() const { return ct.expand.out_channels(); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    ct.visit(join_name(prefix, "ct"), f);
    pet.visit(join_name(prefix, "pet"), f);
  }
};

struct GatePair {
  Tensor c_ct, c_pet;  // [N,C,1,1]
  Tensor s_ct, s_pet;  // [N,1,H,W]
  Tensor g_ct, g_pet;  // [N,C,H,W]
};

struct CgmOutput {
  Tensor y_ct;
  Tensor y_pet;
  GatePair gates;
};

// F = [x_ct ; x_pet]; p = GAP(F); G_m = c_m * s_m; Y_m = X_m * (1 + G_m).
inline CgmOutput cgm_forward(const Tensor& x_ct, const Tensor& x_pet, CgmParams& params, bool training) {
  detail::require_rank(x_ct, 4, "cgm_forward", "CT features");
  if (x_ct.shape() != x_pet.shape()) {
    throw DimensionError("cgm_forward: CT features " + shape_str(x_ct.shape()) + " and PET features " +
                         shape_str(x_pet.shape()) + " differ");
  }
  detail::require_axis("cgm_forward", "feature channel", 1, x_ct.dim(1), params.channels());
  const Tensor fused = concat_channels(x_ct, x_pet);
  const Tensor pooled = global_avg_pool(fused);
  CgmOutput out;
  auto gate = [&](CgmBranch& b, Tensor& c, Tensor& s, Tensor& g) {
    c = sigmoid(b.expand(gelu(b.norm(b.squeeze(pooled), training))));
    s = sigmoid(b.spatial(fused));
    g = mul_broadcast(c, s);
  };
  gate(params.ct, out.gates.c_ct, out.gates.s_ct, out.gates.g_ct);
  gate(params.pet, out.gates.c_pet, out.gates.s_pet, out.gates.g_pet);
  out.y_ct = mul(x_ct, scalar_add(out.gates.g_ct, 1.0));
  out.y_pet = mul(x_pet, scalar_add(out.gates.g_pet, 1.0));
  return out;
}

struct Summary {
  double min = std::numeric_limits<double>::infinity();
  double mean = 0.0;
  double max = -std::numeric_limits<double>::infinity();
  std::size_t count = 0;
};

inline Summary summarize(const Tensor& t) {
  Summary s;
  double acc = 0.0;
  for (double v : t.data()) {
    s.min = std::min(s.min, v);
    s.max = std::max(s.max, v);
    acc += v;
  }
  s.count = t.numel();
  s.mean = s.count ? acc / static_cast<double>(s.count) : 0.0;
  return s;
}

struct GateStats {
  Summary c_ct, c_pet, s_ct, s_pet, g_ct, g_pet;
};

inline GateStats cgm_gate_stats(const GatePair& gates) {
  return GateStats{summarize(gates.c_ct), summarize(gates.c_pet), summarize(gates.s_ct),
                   summarize(gates.s_pet), summarize(gates.g_ct),  summarize(gates.g_pet)};
}

}  // namespace vmx
