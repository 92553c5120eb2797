#pragma once

#include <array>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "vmx/cgm.hpp"
#include "vmx/layers.hpp"
#include "vmx/ops.hpp"
#include "vmx/rng.hpp"
#include "vmx/sscan.hpp"
#include "vmx/tensor.hpp"

namespace vmx {

struct ModelConfig {
  std::size_t in_channels_per_modality = 1;
  std::vector<std::size_t> stage_channels{16, 32, 64, 128};
  std::vector<std::size_t> stage_depths{1, 1, 1, 1};
  std::size_t state_dim = 8;
  std::size_t cgm_bottleneck_ratio = 4;
  std::size_t num_classes = 2;
  std::size_t input_size = 64;
  // Normalization constants; not given by the method description.
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
  double ln_eps = 1e-5;
  std::uint64_t init_seed = 0;

  static constexpr std::size_t kStages = 4;

  // Gradient-check scale: 16x16 inputs, tiny widths.
  static ModelConfig micro() {
    ModelConfig c;
    c.stage_channels = {4, 8, 8, 8};
    c.state_dim = 2;
    c.input_size = 16;
    return c;
  }

  void validate() const {
    if (stage_channels.size() != kStages || stage_depths.size() != kStages) {
      throw ParameterError("model config: stage_channels and stage_depths need exactly 4 entries");
    }
    for (auto c : stage_channels)
      if (c == 0) throw ParameterError("model config: stage channel counts must be positive");
    if (state_dim == 0) throw ParameterError("model config: state_dim must be positive");
    if (num_classes < 2) throw ParameterError("model config: num_classes must be at least 2");
    if (in_channels_per_modality == 0) throw ParameterError("model config: in_channels_per_modality must be positive");
    if (input_size == 0 || input_size % 16 != 0) {
      throw ParameterError("model config: input_size must be a positive multiple of 16, got " +
                           std::to_string(input_size));
    }
  }

  // Spatial side of encoder stage i (0-based).
  std::size_t stage_size(std::size_t stage) const { return input_size >> (stage + 1); }
};

// Shared-weight modality encoder: stride-2 stem, then four VSS stages with
// patch-merge downsampling between them.
struct Encoder {
  Conv2d stem;
  std::array<std::vector<VssBlock>, 4> stages;
  std::array<Downsample, 3> downs;

  static Encoder make(const ModelConfig& cfg, Rng& rng) {
    Encoder e;
    e.stem = Conv2d::make(cfg.in_channels_per_modality, cfg.stage_channels[0], 3, 2, 1, true, rng);
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t k = 0; k < cfg.stage_depths[i]; ++k) {
        e.stages[i].push_back(VssBlock::make(cfg.stage_channels[i], cfg.state_dim, rng, cfg.ln_eps));
      }
      if (i < 3) e.downs[i] = Downsample::make(cfg.stage_channels[i], cfg.stage_channels[i + 1], rng);
    }
    return e;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    stem.visit(join_name(prefix, "stem"), f);
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t k = 0; k < stages[i].size(); ++k) {
        stages[i][k].visit(join_name(prefix, "stage" + std::to_string(i) + ".block" + std::to_string(k)), f);
      }
      if (i < 3) downs[i].visit(join_name(prefix, "down" + std::to_string(i)), f);
    }
  }
};

// Simplified stand-in for the cross-modality interaction module ("DCIM-lite"):
// out = proj([y_ct ; y_pet]) + a * y_ct + (1 - a) * y_pet with a channel mix
// gate a = sigmoid(mix(GAP([y_ct ; y_pet]))).
struct Fusion {
  Conv2d proj;  // 1x1, 2C -> C
  Conv2d mix;   // 1x1, 2C -> C on the pooled descriptor

  static Fusion make(std::size_t channels, Rng& rng) {
    return Fusion{Conv2d::make(2 * channels, channels, 1, 1, 0, true, rng),
                  Conv2d::make(2 * channels, channels, 1, 1, 0, true, rng)};
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    proj.visit(join_name(prefix, "proj"), f);
    mix.visit(join_name(prefix, "mix"), f);
  }
};

inline Tensor fuse(const Tensor& y_ct, const Tensor& y_pet, const Fusion& params) {
  if (y_ct.shape() != y_pet.shape()) {
    throw DimensionError("fuse: CT " + shape_str(y_ct.shape()) + " and PET " + shape_str(y_pet.shape()) + " differ");
  }
  const Tensor both = concat_channels(y_ct, y_pet);
  const Tensor projected = params.proj(both);
  const Tensor a = sigmoid(params.mix(global_avg_pool(both)));
  return add(add(projected, y_pet), mul(a, sub(y_ct, y_pet)));
}

// Decoder level ("CVSS-lite"): nearest 2x upsample, concat with the fused skip,
// 1x1 projection, then VSS blocks.
struct DecoderLevel {
  Conv2d proj;
  std::vector<VssBlock> blocks;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    proj.visit(join_name(prefix, "proj"), f);
    for (std::size_t k = 0; k < blocks.size(); ++k) blocks[k].visit(join_name(prefix, "block" + std::to_string(k)), f);
  }
};

// Full-resolution head: the upsampled decoder output is concatenated with the
// raw modality inputs, refined by a 3x3 conv + GELU and classified by a 1x1 conv.
struct Head {
  Conv2d refine;
  Conv2d classifier;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    refine.visit(join_name(prefix, "refine"), f);
    classifier.visit(join_name(prefix, "classifier"), f);
  }
};

struct ForwardResult {
  Tensor logits;                  // [N,num_classes,H,W]
  std::array<GatePair, 4> gates;  // per encoder stage
  std::array<Tensor, 4> fused;    // per-stage fusion outputs (decoder skips)
};

class VMambaX {
 public:
  ModelConfig config;
  std::shared_ptr<Encoder> ct_encoder;
  std::shared_ptr<Encoder> pet_encoder;  // same object as ct_encoder unless unshared
  std::array<CgmParams, 4> cgm;
  std::array<Fusion, 4> fusion;
  std::array<DecoderLevel, 3> decoder;
  Head head;
  ScanMode scan_mode = ScanMode::parallel;

  static VMambaX make(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng(mix_seed(cfg.init_seed, 0x766d6278));
    VMambaX m;
    m.config = cfg;
    m.ct_encoder = std::make_shared<Encoder>(Encoder::make(cfg, rng));
    m.pet_encoder = m.ct_encoder;
    const auto& ch = cfg.stage_channels;
    for (std::size_t i = 0; i < 4; ++i) {
      m.cgm[i] = CgmParams::make(ch[i], cfg.cgm_bottleneck_ratio, rng, cfg.bn_momentum, cfg.bn_eps);
      m.fusion[i] = Fusion::make(ch[i], rng);
    }
    for (std::size_t i = 0; i < 3; ++i) {
      m.decoder[i].proj = Conv2d::make(ch[i + 1] + ch[i], ch[i], 1, 1, 0, true, rng);
      for (std::size_t k = 0; k < cfg.stage_depths[i]; ++k) {
        m.decoder[i].blocks.push_back(VssBlock::make(ch[i], cfg.state_dim, rng, cfg.ln_eps));
      }
    }
    const std::size_t raw = 2 * cfg.in_channels_per_modality;
    m.head.refine = Conv2d::make(ch[0] + raw, ch[0], 3, 1, 1, true, rng);
    m.head.classifier = Conv2d::make(ch[0], cfg.num_classes, 1, 1, 0, true, rng);
    return m;
  }

  Encoder& encoder(Modality m) { return m == Modality::ct ? *ct_encoder : *pet_encoder; }
  const Encoder& encoder(Modality m) const { return m == Modality::ct ? *ct_encoder : *pet_encoder; }
  bool encoder_shared() const { return ct_encoder == pet_encoder; }

  // Copy whose PET branch owns a private duplicate of the encoder weights. All
  // other parameters keep sharing storage with *this.
  VMambaX with_unshared_encoder() const {
    VMambaX copy = *this;
    copy.pet_encoder = std::make_shared<Encoder>(*ct_encoder);
    detach_storage(*copy.pet_encoder);
    return copy;
  }

  // Visits every parameter and buffer once, under canonical names.
  template <class F>
  void visit(F&& f) {
    if (encoder_shared()) {
      ct_encoder->visit("encoder", f);
    } else {
      ct_encoder->visit("encoder_ct", f);
      pet_encoder->visit("encoder_pet", f);
    }
    for (std::size_t i = 0; i < 4; ++i) cgm[i].visit("cgm" + std::to_string(i), f);
    for (std::size_t i = 0; i < 4; ++i) fusion[i].visit("fusion" + std::to_string(i), f);
    for (std::size_t i = 0; i < 3; ++i) decoder[i].visit("decoder" + std::to_string(i), f);
    head.visit("head", f);
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    visit([&](const std::string& name, Tensor& t, bool is_buffer) {
      if (!is_buffer) out.emplace_back(name, t);
    });
    return out;
  }

  std::vector<std::pair<std::string, Tensor>> named_buffers() {
    std::vector<std::pair<std::string, Tensor>> out;
    visit([&](const std::string& name, Tensor& t, bool is_buffer) {
      if (is_buffer) out.emplace_back(name, t);
    });
    return out;
  }

  void zero_grad() {
    visit([](const std::string&, Tensor& t, bool) { t.zero_grad(); });
  }

  // ct, pet: [N, in_channels, S, S] with S = input_size.
  ForwardResult forward(const Tensor& ct, const Tensor& pet, bool training) {
    const std::size_t s = config.input_size;
    const Shape expected{ct.defined() && ct.rank() == 4 ? ct.dim(0) : 0, config.in_channels_per_modality, s, s};
    for (const Tensor* t : {&ct, &pet}) {
      detail::require_rank(*t, 4, "VMambaX::forward", "input");
      if (t->shape() != expected) {
        throw DimensionError("VMambaX::forward: expected input " + shape_str(expected) + ", got " +
                             shape_str(t->shape()));
      }
    }
    ForwardResult out;
    Encoder& enc_ct = *ct_encoder;
    Encoder& enc_pet = *pet_encoder;
    Tensor x_ct = enc_ct.stem(ct);
    Tensor x_pet = enc_pet.stem(pet);
    for (std::size_t i = 0; i < 4; ++i) {
      if (i > 0) {
        x_ct = downsample(x_ct, enc_ct.downs[i - 1]);
        x_pet = downsample(x_pet, enc_pet.downs[i - 1]);
      }
      for (std::size_t k = 0; k < enc_ct.stages[i].size(); ++k) {
        x_ct = vss_block(x_ct, enc_ct.stages[i][k], scan_mode);
        x_pet = vss_block(x_pet, enc_pet.stages[i][k], scan_mode);
      }
      auto refined = cgm_forward(x_ct, x_pet, cgm[i], training);
      x_ct = refined.y_ct;
      x_pet = refined.y_pet;
      out.gates[i] = std::move(refined.gates);
      out.fused[i] = fuse(x_ct, x_pet, fusion[i]);
    }
    Tensor d = out.fused[3];
    for (std::size_t i = 3; i-- > 0;) {
      d = decoder[i].proj(concat_channels(upsample_nearest(d, 2), out.fused[i]));
      for (const auto& block : decoder[i].blocks) d = vss_block(d, block, scan_mode);
    }
    d = concat_channels(upsample_nearest(d, 2), concat_channels(ct, pet));
    out.logits = head.classifier(gelu(head.refine(d)));
    return out;
  }
};

// Scalar parameters, each shared storage counted once.
inline std::uint64_t count_params(VMambaX& model) {
  std::unordered_set<const void*> seen;
  std::uint64_t total = 0;
  model.visit([&](const std::string&, Tensor& t, bool is_buffer) {
    if (!is_buffer && seen.insert(t.storage_id()).second) total += t.numel();
  });
  return total;
}

// Parameter subtotals by top-level component: encoder, cgm, fusion, decoder, head.
inline std::map<std::string, std::uint64_t> parameter_groups(VMambaX& model) {
  std::map<std::string, std::uint64_t> groups;
  model.visit([&](const std::string& name, Tensor& t, bool is_buffer) {
    if (is_buffer) return;
    std::string group = name.substr(0, name.find('.'));
    while (!group.empty() && std::isdigit(static_cast<unsigned char>(group.back()))) group.pop_back();
    if (group.rfind("encoder", 0) == 0) group = "encoder";
    groups[group] += t.numel();
  });
  return groups;
}

namespace detail {

inline std::uint64_t conv_macs(const Conv2d& c, std::uint64_t out_hw) {
  return static_cast<std::uint64_t>(c.out_channels()) * c.in_channels() * c.kernel() * c.kernel() * out_hw;
}

inline std::uint64_t vss_macs(const VssBlock& b, std::uint64_t tokens) {
  const std::uint64_t c = b.channels(), s = b.ssm.state_dim;
  const std::uint64_t projections = tokens * (4 * c * c + 2 * c * s);  // in, gate, delta, out; B, C
  const std::uint64_t scans = 4 * 2 * tokens * c * s;                   // four paths
  return projections + scans;
}

}  // namespace detail

// Floating-point operations of one forward pass at batch size 1, counted as
// 2 per multiply-accumulate. Counted layers: convolutions (full kernel, padding
// included), linear projections, and the selective scan (2 MACs per token,
// channel and state element: state update and output contraction).
// Elementwise ops, normalization, pooling and biases are not counted.
inline std::uint64_t count_flops(const VMambaX& model, std::size_t input_size) {
  std::uint64_t macs = 0;
  const std::uint64_t s = input_size;
  for (Modality m : {Modality::ct, Modality::pet}) {
    const Encoder& e = model.encoder(m);
    macs += detail::conv_macs(e.stem, (s / 2) * (s / 2));
    for (std::size_t i = 0; i < 4; ++i) {
      const std::uint64_t side = s >> (i + 1);
      if (i > 0) macs += detail::conv_macs(e.downs[i - 1].proj, side * side);
      for (const auto& b : e.stages[i]) macs += detail::vss_macs(b, side * side);
    }
  }
  for (std::size_t i = 0; i < 4; ++i) {
    const std::uint64_t side = s >> (i + 1);
    for (const CgmBranch* b : {&model.cgm[i].ct, &model.cgm[i].pet}) {
      macs += detail::conv_macs(b->squeeze, 1) + detail::conv_macs(b->expand, 1);
      macs += detail::conv_macs(b->spatial, side * side);
    }
    macs += detail::conv_macs(model.fusion[i].proj, side * side) + detail::conv_macs(model.fusion[i].mix, 1);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    const std::uint64_t side = s >> (i + 1);
    macs += detail::conv_macs(model.decoder[i].proj, side * side);
    for (const auto& b : model.decoder[i].blocks) macs += detail::vss_macs(b, side * side);
  }
  macs += detail::conv_macs(model.head.refine, s * s) + detail::conv_macs(model.head.classifier, s * s);
  return 2 * macs;
}

}  // namespace vmx
