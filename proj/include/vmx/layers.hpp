#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>

#include "vmx/ops.hpp"
#include "vmx/rng.hpp"
#include "vmx/tensor.hpp"

namespace vmx {

// Parameter containers. Each exposes visit(prefix, f) with
// f(const std::string& name, Tensor& tensor, bool is_buffer), which drives
// registration, checkpoint I/O and deep copies.

inline std::string join_name(const std::string& prefix, const std::string& leaf) {
  return prefix.empty() ? leaf : prefix + "." + leaf;
}

inline Tensor parameter(Shape shape, double fill = 0.0) { return Tensor(std::move(shape), fill, true); }

// Kaiming-uniform with a = sqrt(5): U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline void kaiming_uniform(Tensor& t, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t.data_mut()) v = rng.uniform(-bound, bound);
}

struct Conv2d {
  Tensor weight;
  Tensor bias;
  std::size_t stride = 1;
  std::size_t padding = 0;

  static Conv2d make(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding,
                     bool with_bias, Rng& rng) {
    Conv2d c;
    c.weight = parameter(Shape{out, in, kernel, kernel});
    kaiming_uniform(c.weight, in * kernel * kernel, rng);
    if (with_bias) c.bias = parameter(Shape{out});
    c.stride = stride;
    c.padding = padding;
    return c;
  }

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }

  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t kernel() const { return weight.dim(2); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(join_name(prefix, "weight"), weight, false);
    if (bias.defined()) f(join_name(prefix, "bias"), bias, false);
  }
};

struct Linear {
  Tensor weight;  // [out, in]
  Tensor bias;

  static Linear make(std::size_t in, std::size_t out, bool with_bias, Rng& rng) {
    Linear l;
    l.weight = parameter(Shape{out, in});
    kaiming_uniform(l.weight, in, rng);
    if (with_bias) l.bias = parameter(Shape{out});
    return l;
  }

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(join_name(prefix, "weight"), weight, false);
    if (bias.defined()) f(join_name(prefix, "bias"), bias, false);
  }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;
  double eps = 1e-5;

  static LayerNorm make(std::size_t channels, double eps = 1e-5) {
    return LayerNorm{parameter(Shape{channels}, 1.0), parameter(Shape{channels}, 0.0), eps};
  }

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(join_name(prefix, "gamma"), gamma, false);
    f(join_name(prefix, "beta"), beta, false);
  }
};

struct BatchNorm2d {
  Tensor gamma;
  Tensor beta;
  RunningStats stats;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNorm2d make(std::size_t channels, double momentum, double eps) {
    return BatchNorm2d{parameter(Shape{channels}, 1.0), parameter(Shape{channels}, 0.0), RunningStats(channels),
                       momentum, eps};
  }

  // Mutates running statistics in training mode.
  Tensor operator()(const Tensor& x, bool training) {
    return batchnorm2d(x, gamma, beta, stats, training, momentum, eps);
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(join_name(prefix, "gamma"), gamma, false);
    f(join_name(prefix, "beta"), beta, false);
    f(join_name(prefix, "running_mean"), stats.mean, true);
    f(join_name(prefix, "running_var"), stats.var, true);
  }
};

// Replaces every tensor of a module with an independent copy.
template <class Module>
void detach_storage(Module& m) {
  m.visit("", [](const std::string&, Tensor& t, bool) { t = t.clone(); });
}

}  // namespace vmx
