#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vmx/errors.hpp"

namespace vmx {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

class Tensor;

namespace detail {

struct TensorImpl;

// One recorded operation. `backward` reads the output's gradient and
// accumulates into the inputs' pending gradients.
struct Node {
  const char* name = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(std::span<const double>)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  std::vector<double> pending;
  bool requires_grad = false;
  bool released = false;
  std::shared_ptr<Node> node;
};

inline thread_local bool grad_enabled = true;
inline thread_local std::uint64_t* mac_counter = nullptr;

}  // namespace detail

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_mode_enabled() { return detail::grad_enabled; }

// Counts multiply-accumulates executed by conv2d, linear and the selective scan
// on this thread while alive.
class MacCounter {
 public:
  MacCounter() : previous_(detail::mac_counter) { detail::mac_counter = &count_; }
  ~MacCounter() { detail::mac_counter = previous_; }
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;

  std::uint64_t macs() const { return count_; }

 private:
  std::uint64_t count_ = 0;
  std::uint64_t* previous_;
};

inline void record_macs(std::uint64_t n) {
  if (detail::mac_counter) *detail::mac_counter += n;
}

// Dense row-major float64 array with optional gradient tracking. Copies share
// storage; use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    impl_->data.assign(vmx::numel(shape), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    if (vmx::numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), 0.0, requires_grad);
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    return Tensor(std::move(shape), value, requires_grad);
  }
  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor(Shape{1}, value, requires_grad);
  }

  bool defined() const { return static_cast<bool>(impl_); }
  explicit operator bool() const { return defined(); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  // In-place access for optimizers, initializers and finite-difference probes.
  std::span<double> data_mut() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }
  double operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> grad_mut() { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  bool is_leaf() const { return !impl_->node; }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  const void* storage_id() const { return impl_.get(); }

  // Detached deep copy.
  Tensor clone() const {
    Tensor out(impl_->shape, impl_->data, false);
    out.impl_->requires_grad = impl_->requires_grad && is_leaf();
    return out;
  }

  // Detached view of the same values (copied), without gradient tracking.
  Tensor detach() const { return Tensor(impl_->shape, impl_->data, false); }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

// Pending-gradient buffer for an operand, or nullptr when it needs none.
inline double* grad_sink(const Tensor& t) {
  auto& impl = *t.impl();
  if (!impl.requires_grad) return nullptr;
  if (impl.pending.empty()) impl.pending.assign(impl.data.size(), 0.0);
  return impl.pending.data();
}

// Wraps an op result, recording a graph node when any input tracks gradients.
inline Tensor make_result(Shape shape, std::vector<double> data,
                          std::initializer_list<Tensor> inputs, const char* name,
                          std::function<void(std::span<const double>)> backward) {
  Tensor out(std::move(shape), std::move(data), false);
  if (!grad_enabled) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
  if (!any) return out;
  auto node = std::make_shared<Node>();
  node->name = name;
  for (const auto& in : inputs) {
    if (in.defined()) node->inputs.push_back(in.impl());
  }
  node->backward = std::move(backward);
  out.impl()->node = std::move(node);
  out.impl()->requires_grad = true;
  return out;
}

}  // namespace detail

// Reverse-mode sweep from a scalar. Gradients of every reachable tensor that
// requires them are accumulated (added) into grad(); the graph is then freed.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (loss.impl()->released) throw ContractError("backward() through an already released graph");
  if (!loss.requires_grad()) throw ContractError("backward() on a tensor that does not require grad");

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> seen;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(loss.impl().get(), 0);
  seen.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->node && next < impl->node->inputs.size()) {
      auto* child = impl->node->inputs[next++].get();
      if (child->released) throw ContractError("backward() through an already released graph");
      if (seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }

  loss.impl()->pending.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* impl = *it;
    if (impl->node && !impl->pending.empty()) impl->node->backward(impl->pending);
  }
  for (auto* impl : order) {
    if (impl->requires_grad && !impl->pending.empty()) {
      if (impl->grad.empty()) {
        impl->grad = std::move(impl->pending);
      } else {
        for (std::size_t i = 0; i < impl->grad.size(); ++i) impl->grad[i] += impl->pending[i];
      }
    }
    impl->pending.clear();
    if (impl->node) {
      impl->node.reset();
      impl->released = true;
    }
  }
}

}  // namespace vmx
