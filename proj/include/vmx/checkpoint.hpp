#pragma once

#include <cstdint>
#include <cstring>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "vmx/binary_io.hpp"
#include "vmx/errors.hpp"
#include "vmx/network.hpp"
#include "vmx/optim.hpp"

namespace vmx {

inline constexpr char kCheckpointMagic[4] = {'V', 'M', 'B', 'X'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
  DType dtype = DType::f64;
};

// Layout: magic, u32 version, u32 count, entries, then u64 FNV-1a over every
// preceding byte. Entry: u16 name length, name, u8 dtype, u8 rank, u32 dims, data.
inline std::vector<unsigned char> checkpoint_encode(const std::vector<NamedTensor>& entries) {
  io::Writer w;
  w.put_bytes(kCheckpointMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
  std::set<std::string> names;
  for (const auto& e : entries) {
    if (!names.insert(e.name).second) throw FormatError("checkpoint: duplicate tensor name " + e.name);
    if (e.shape.size() > 255) throw FormatError("checkpoint: rank too large for " + e.name);
    if (numel(e.shape) != e.values.size()) throw DimensionError("checkpoint: shape/value mismatch for " + e.name);
    w.put_string16(e.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.dtype));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    if (e.dtype == DType::f32) {
      for (double v : e.values) w.put<float>(static_cast<float>(v));
    } else {
      w.put_bytes(e.values.data(), e.values.size() * sizeof(double));
    }
  }
  const auto& b = w.bytes();
  w.put<std::uint64_t>(io::fnv1a64(b.data(), b.size()));
  return std::move(w.bytes());
}

inline std::vector<NamedTensor> checkpoint_decode(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError("checkpoint: bad magic, expected VMBX");
  }
  if (bytes.size() < 20) throw IoError("checkpoint: file too short", bytes.size());
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, 8);
  if (io::fnv1a64(bytes.data(), body) != stored) throw ChecksumError("checkpoint: checksum mismatch (corrupt file)");
  io::Reader r(bytes, body);
  char magic[4];
  r.get_bytes(magic, 4, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>("tensor count");
  std::vector<NamedTensor> out;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor e;
    e.name = r.get_string16("tensor name");
    if (!names.insert(e.name).second) throw FormatError("checkpoint: duplicate tensor name " + e.name);
    const auto code = r.get<std::uint8_t>("dtype");
    if (code > 1) throw FormatError("checkpoint: unknown dtype code " + std::to_string(code) + " for " + e.name);
    e.dtype = static_cast<DType>(code);
    const auto rank = r.get<std::uint8_t>("rank");
    for (int k = 0; k < rank; ++k) e.shape.push_back(r.get<std::uint32_t>("dimension"));
    const std::size_t n = numel(e.shape);
    const std::size_t width = e.dtype == DType::f32 ? 4 : 8;
    if (n > r.remaining() / width) r.need(n * width, "tensor data");
    e.values.resize(n);
    if (e.dtype == DType::f32) {
      std::vector<float> buf(n);
      r.get_bytes(buf.data(), n * 4, "tensor data");
      for (std::size_t k = 0; k < n; ++k) e.values[k] = buf[k];
    } else {
      r.get_bytes(e.values.data(), n * 8, "tensor data");
    }
    out.push_back(std::move(e));
  }
  if (r.remaining() != 0) throw FormatError("checkpoint: " + std::to_string(r.remaining()) + " unexpected bytes");
  return out;
}

// Everything needed to rebuild and resume a model.
struct Checkpoint {
  ModelConfig config;
  std::map<std::string, NamedTensor> tensors;  // parameters and buffers by canonical name
  std::optional<AdamWState> optimizer;
  std::map<std::string, double> scalars;       // e.g. epoch, best val Dice
};

namespace detail {

inline std::vector<double> encode_model_config(const ModelConfig& c) {
  std::vector<double> v{static_cast<double>(c.in_channels_per_modality)};
  for (auto x : c.stage_channels) v.push_back(static_cast<double>(x));
  for (auto x : c.stage_depths) v.push_back(static_cast<double>(x));
  v.push_back(static_cast<double>(c.state_dim));
  v.push_back(static_cast<double>(c.cgm_bottleneck_ratio));
  v.push_back(static_cast<double>(c.num_classes));
  v.push_back(static_cast<double>(c.input_size));
  v.push_back(c.bn_momentum);
  v.push_back(c.bn_eps);
  v.push_back(c.ln_eps);
  return v;
}

inline ModelConfig decode_model_config(const std::vector<double>& v) {
  if (v.size() != 16) throw FormatError("checkpoint: model config has " + std::to_string(v.size()) + " fields");
  auto u = [&](std::size_t i) { return static_cast<std::size_t>(v[i]); };
  ModelConfig c;
  c.in_channels_per_modality = u(0);
  c.stage_channels = {u(1), u(2), u(3), u(4)};
  c.stage_depths = {u(5), u(6), u(7), u(8)};
  c.state_dim = u(9);
  c.cgm_bottleneck_ratio = u(10);
  c.num_classes = u(11);
  c.input_size = u(12);
  c.bn_momentum = v[13];
  c.bn_eps = v[14];
  c.ln_eps = v[15];
  try {
    c.validate();
  } catch (const ParameterError& e) {
    throw FormatError(std::string("checkpoint: invalid model config: ") + e.what());
  }
  return c;
}

}  // namespace detail

inline std::vector<NamedTensor> checkpoint_entries(VMambaX& model, const AdamWState* optimizer,
                                                   const std::map<std::string, double>& scalars,
                                                   DType dtype = DType::f64) {
  std::vector<NamedTensor> out;
  const auto cfg = detail::encode_model_config(model.config);
  out.push_back({"meta.model_config", Shape{cfg.size()}, cfg, DType::f64});
  for (const auto& [k, v] : scalars) out.push_back({"meta." + k, Shape{1}, {v}, DType::f64});
  std::vector<std::string> param_names;
  model.visit([&](const std::string& name, Tensor& t, bool is_buffer) {
    out.push_back({name, t.shape(), t.values(), dtype});
    if (!is_buffer) param_names.push_back(name);
  });
  if (optimizer && !optimizer->m.empty()) {
    if (optimizer->m.size() != param_names.size()) throw DimensionError("checkpoint: optimizer state size mismatch");
    out.push_back({"optim.step", Shape{1}, {static_cast<double>(optimizer->step)}, DType::f64});
    for (std::size_t i = 0; i < param_names.size(); ++i) {
      out.push_back({"optim.m." + param_names[i], Shape{optimizer->m[i].size()}, optimizer->m[i], DType::f64});
      out.push_back({"optim.v." + param_names[i], Shape{optimizer->v[i].size()}, optimizer->v[i], DType::f64});
    }
  }
  return out;
}

inline void save_checkpoint(const std::string& path, VMambaX& model, const AdamWState* optimizer = nullptr,
                            const std::map<std::string, double>& scalars = {}, DType dtype = DType::f64) {
  io::write_file(path, checkpoint_encode(checkpoint_entries(model, optimizer, scalars, dtype)));
}

inline Checkpoint read_checkpoint(const std::string& path) {
  Checkpoint ck;
  bool have_config = false;
  std::map<std::string, std::vector<double>> m, v;
  for (auto& e : checkpoint_decode(io::read_file(path))) {
    if (e.name == "meta.model_config") {
      ck.config = detail::decode_model_config(e.values);
      have_config = true;
    } else if (e.name.rfind("meta.", 0) == 0) {
      if (e.values.size() != 1) throw FormatError("checkpoint: scalar " + e.name + " is not a scalar");
      ck.scalars[e.name.substr(5)] = e.values[0];
    } else if (e.name == "optim.step") {
      if (!ck.optimizer) ck.optimizer.emplace();
      ck.optimizer->step = static_cast<std::uint64_t>(e.values.at(0));
    } else if (e.name.rfind("optim.m.", 0) == 0) {
      m[e.name.substr(8)] = std::move(e.values);
    } else if (e.name.rfind("optim.v.", 0) == 0) {
      v[e.name.substr(8)] = std::move(e.values);
    } else {
      std::string name = e.name;
      ck.tensors.emplace(std::move(name), std::move(e));
    }
  }
  if (!have_config) throw FormatError("checkpoint: missing meta.model_config");
  if (ck.optimizer) {
    // Restore moment order from the model's canonical parameter order.
    VMambaX probe = VMambaX::make(ck.config);
    for (const auto& [name, t] : probe.named_parameters()) {
      if (!m.count(name) || !v.count(name)) throw FormatError("checkpoint: optimizer state missing for " + name);
      ck.optimizer->m.push_back(std::move(m[name]));
      ck.optimizer->v.push_back(std::move(v[name]));
    }
  }
  return ck;
}

// Copies stored values into an existing model; every tensor must match by name and shape.
inline void load_weights(VMambaX& model, const Checkpoint& ck) {
  std::size_t used = 0;
  model.visit([&](const std::string& name, Tensor& t, bool) {
    const auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) throw FormatError("checkpoint: missing tensor " + name);
    if (it->second.shape != t.shape()) {
      throw FormatError("checkpoint: tensor " + name + " has shape " + shape_str(it->second.shape) + ", model expects " +
                        shape_str(t.shape()));
    }
    std::copy(it->second.values.begin(), it->second.values.end(), t.data_mut().begin());
    ++used;
  });
  if (used != ck.tensors.size()) {
    throw FormatError("checkpoint: " + std::to_string(ck.tensors.size() - used) + " tensors unknown to the model");
  }
}

inline VMambaX load_model(const std::string& path, Checkpoint* out = nullptr) {
  Checkpoint ck = read_checkpoint(path);
  VMambaX model = VMambaX::make(ck.config);
  load_weights(model, ck);
  if (out) *out = std::move(ck);
  return model;
}

}  // namespace vmx
