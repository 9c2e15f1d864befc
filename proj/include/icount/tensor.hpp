#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

namespace icount {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename T>
struct TensorImpl;

// One recorded primitive. The closure reads the producer's output gradient
// and accumulates into the gradients of its inputs.
template <typename T>
struct Node {
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::function<void(std::span<const T> out_grad)> backward;
  bool consumed = false;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool frozen = false;
  std::shared_ptr<Node<T>> node;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

}  // namespace detail

/// True while operations record a graph for reverse-mode differentiation.
inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording for its lifetime (inference, target branches).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor with optional gradient tracking. Copies of a Tensor
/// share storage; use clone() for a deep copy.
template <typename T = double>
class Tensor {
  static_assert(std::is_floating_point_v<T>, "Tensor requires a floating-point scalar");

 public:
  using value_type = T;

  Tensor() : impl_(std::make_shared<detail::TensorImpl<T>>()) {}

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl<T>>()) {
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
    set_requires_grad(requires_grad);
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl<T>>()) {
    if (values.size() != shape_numel(shape)) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
    set_requires_grad(requires_grad);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  std::vector<T>& values() { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  T& at(std::size_t flat) { return impl_->data.at(flat); }
  T at(std::size_t flat) const { return impl_->data.at(flat); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) {
    if (on && impl_->frozen) throw GraphError("cannot enable gradients on a frozen tensor");
    impl_->requires_grad = on;
    if (on && is_leaf()) {
      impl_->ensure_grad();
    } else if (!on) {
      impl_->grad.clear();
      impl_->grad.shrink_to_fit();
    }
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<T> grad() { return impl_->grad; }
  std::span<const T> grad() const { return impl_->grad; }
  void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), T(0)); }

  /// Frozen tensors never take part in optimization again.
  bool frozen() const { return impl_->frozen; }
  void freeze() {
    set_requires_grad(false);
    impl_->frozen = true;
  }

  bool is_leaf() const { return impl_->node == nullptr; }

  /// Deep copy as a fresh leaf (no graph, not frozen, same requires_grad).
  Tensor clone() const {
    Tensor out(impl_->shape, impl_->data);
    if (impl_->requires_grad) out.set_requires_grad(true);
    return out;
  }

  /// Value copy with gradient tracking cut.
  Tensor detach() const { return Tensor(impl_->shape, impl_->data); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  // Internal access for operator implementations.
  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl<T>> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

namespace detail {

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_enabled()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<T>* t) { return t != nullptr && t->requires_grad(); });
}

/// Wires `out` into the graph as the result of a primitive with the given inputs.
template <typename T>
void record(Tensor<T>& out, std::type_identity_t<std::vector<Tensor<T>>> inputs,
            std::type_identity_t<std::function<void(std::span<const T>)>> backward) {
  auto node = std::make_shared<Node<T>>();
  for (auto& in : inputs) {
    if (in.impl()->node && in.impl()->node->consumed) {
      throw GraphError("operand belongs to a graph that was already back-propagated");
    }
    node->inputs.push_back(in.impl());
  }
  node->backward = std::move(backward);
  out.impl()->node = std::move(node);
  out.impl()->requires_grad = true;
}

/// Gradient slot of an operand, or nullptr when it does not track gradients.
template <typename T>
T* grad_slot(const Tensor<T>& t) {
  auto& impl = *t.impl();
  if (!impl.requires_grad) return nullptr;
  impl.ensure_grad();
  return impl.grad.data();
}

}  // namespace detail

/// Reverse-mode pass from a scalar loss. Leaf gradients accumulate; the
/// traversed graph is released and cannot be back-propagated again.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  auto root = loss.impl();
  if (!root->node) {
    if (!root->requires_grad) throw GraphError("loss does not depend on any tracked tensor");
    root->ensure_grad();
    root->grad[0] += T(1);
    return;
  }
  if (root->node->consumed) throw GraphError("stale graph: backward already ran for this loss");

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  using Impl = detail::TensorImpl<T>;
  using ImplPtr = std::shared_ptr<Impl>;
  std::vector<ImplPtr> order;
  std::unordered_set<Impl*> seen;
  std::vector<std::pair<ImplPtr, std::size_t>> stack{{root, 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& top = stack.back();
    Impl* impl = top.first.get();
    if (impl->node && top.second < impl->node->inputs.size()) {
      ImplPtr child = impl->node->inputs[top.second++];
      if (child->requires_grad && !seen.count(child.get())) {
        if (child->node && child->node->consumed) {
          throw GraphError("stale graph: intermediate already back-propagated");
        }
        seen.insert(child.get());
        stack.emplace_back(std::move(child), 0);
      }
    } else {
      order.push_back(std::move(top.first));
      stack.pop_back();
    }
  }

  for (const auto& impl : order) {
    if (impl->node) impl->grad.assign(impl->data.size(), T(0));
  }
  root->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* impl = it->get();
    if (!impl->node) continue;
    impl->node->backward(impl->grad);
    impl->node->consumed = true;
    impl->node->backward = nullptr;
    impl->node->inputs.clear();
    impl->grad.clear();
    impl->grad.shrink_to_fit();
  }
}

}  // namespace icount
