#include "aqt/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace aqt {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace detail {

namespace {
std::atomic<std::uint64_t> sequence_counter{0};
thread_local bool grad_mode = true;
}  // namespace

std::uint64_t next_sequence() { return sequence_counter.fetch_add(1, std::memory_order_relaxed); }

bool grad_enabled() { return grad_mode; }
void set_grad_enabled(bool enabled) { grad_mode = enabled; }

}  // namespace detail

NoGradGuard::NoGradGuard() : previous_(detail::grad_enabled()) { detail::set_grad_enabled(false); }
NoGradGuard::~NoGradGuard() { detail::set_grad_enabled(previous_); }

template <typename T>
BasicTensor<T>::BasicTensor() : BasicTensor(Shape{}, std::vector<T>{T(0)}) {}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data, bool requires_grad)
    : node_(std::make_shared<detail::Node<T>>()) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_string(shape));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return BasicTensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value) {
  return BasicTensor(Shape{}, std::vector<T>{value});
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_node(std::shared_ptr<detail::Node<T>> node) {
  return BasicTensor(std::move(node));
}

template <typename T>
std::size_t BasicTensor<T>::size(std::size_t axis) const {
  if (axis >= dim()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape()));
  return node_->shape[axis];
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool value) {
  node_->requires_grad = value;
  return *this;
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item() needs a single-element tensor, got " + shape_string(shape()));
  return node_->data[0];
}

template <typename T>
T BasicTensor<T>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != dim()) throw DimensionError("index rank does not match tensor rank");
  std::size_t offset = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= node_->shape[axis]) throw DimensionError("index out of range");
    offset = offset * node_->shape[axis] + i;
    ++axis;
  }
  return node_->data[offset];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return BasicTensor(node_->shape, node_->data);
}

template <typename T>
void BasicTensor<T>::backward() const {
  if (numel() != 1) throw ContractError("backward() needs a scalar loss, got shape " + shape_string(shape()));
  if (!node_->requires_grad) throw ContractError("backward() called on a tensor that is not on the tape");

  // Collect the reachable part of the graph, then replay it newest-first.
  std::vector<detail::Node<T>*> tape;
  std::unordered_set<const detail::Node<T>*> seen;
  std::vector<detail::Node<T>*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    tape.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(tape.begin(), tape.end(), [](const auto* a, const auto* b) { return a->seq > b->seq; });

  node_->ensure_grad()[0] += T(1);
  for (auto* n : tape) {
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // Reachable tensors that received no contribution still get a zero grad.
  for (auto* n : tape) n->ensure_grad();
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace aqt
