#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace aqt {

/// Raised when tensor shapes are incompatible with an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a caller violates an operation's precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised on non-finite values where finite ones are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

std::uint64_t next_sequence();

// One recorded value in the computation graph. `backward` reads this node's
// grad and accumulates into the parents' grads.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::uint64_t seq = next_sequence();
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

bool grad_enabled();
void set_grad_enabled(bool enabled);

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor with reverse-mode differentiation.
///
/// Copies are shallow: two BasicTensor handles may refer to the same node.
/// Use clone() or detach() for an independent copy.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor();
  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor scalar(T value);
  static BasicTensor from_node(std::shared_ptr<detail::Node<T>> node);

  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> data_mut() { return node_->data; }
  /// Empty when no gradient has reached this tensor.
  std::span<const T> grad() const { return node_->grad; }
  /// Allocates a zero gradient on first use.
  std::span<T> grad_mut() { return node_->ensure_grad(); }
  bool has_grad() const { return !node_->grad.empty(); }

  bool requires_grad() const { return node_->requires_grad; }
  BasicTensor& set_requires_grad(bool value);
  bool is_leaf() const { return !node_->backward; }
  void zero_grad();

  /// Replays the recorded graph in reverse order, accumulating gradients
  /// into every reachable tensor that requires them.
  void backward() const;

  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  BasicTensor detach() const;
  BasicTensor clone() const { return detach(); }

  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

 private:
  explicit BasicTensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::Node<T>> node_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// Converts between precisions. The result is a detached leaf.
template <typename To, typename From>
BasicTensor<To> cast(const BasicTensor<From>& x) {
  std::vector<To> values(x.data().begin(), x.data().end());
  return BasicTensor<To>(x.shape(), std::move(values));
}

}  // namespace aqt
