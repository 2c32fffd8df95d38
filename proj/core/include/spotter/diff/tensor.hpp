#pragma once

// Reverse-mode differentiable tensors.
//
// A Tensor is a cheap handle onto a graph node. Ops that consume tensors with
// requires_grad set record a backward closure on their output; backward()
// walks the recorded graph in reverse topological order and accumulates
// gradients into every reachable leaf. Graphs are confined to one thread.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace spotter::diff {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised for shape mismatches and out-of-domain op arguments.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until something flows in
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), T(0));
    return grad;
  }
  bool is_leaf() const { return !backward; }
};

}  // namespace detail

/// Whether ops executed on this thread record backward closures.
bool grad_enabled();

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

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  static Tensor from_values(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int dim(int axis) const;
  std::size_t size() const { return values().size(); }

  std::span<const T> values() const;
  /// Writable storage; only legal on leaves (parameters, inputs).
  std::span<T> mutable_values();
  T item() const;
  T at(std::initializer_list<int> index) const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();
  bool is_leaf() const;

  /// Same values, no history.
  Tensor detach() const;

  /// Reverse pass: accumulates d(this · seed)/d(leaf) into each reachable leaf.
  void backward(const Tensor& seed) const;
  /// backward() with an all-ones seed.
  void backward() const;

  const NodePtr& node() const { return node_; }
  static Tensor wrap(NodePtr node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  NodePtr node_;
};

/// Free-function form of Tensor::backward.
template <typename T>
void backward(const Tensor<T>& root, const Tensor<T>& seed) {
  root.backward(seed);
}

/// Builds an op output. Records `parents` and `fn` only when grad mode is on
/// and some parent requires grad.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values,
                      std::vector<typename Tensor<T>::NodePtr> parents,
                      std::function<void(detail::Node<T>&)> fn);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace spotter::diff
