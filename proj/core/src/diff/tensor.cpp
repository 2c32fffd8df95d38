#include "spotter/diff/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace spotter::diff {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) {
    if (e < 0) throw ShapeError("negative extent in shape " + to_string(shape));
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T> Tensor<T>::from_values(Shape shape, std::vector<T> values, bool requires_grad) {
  if (numel(shape) != values.size()) {
    throw ShapeError("shape " + to_string(shape) + " holds " + std::to_string(numel(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  return wrap(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const std::size_t n = numel(shape);
  return from_values(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from_values({}, {value}, requires_grad);
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  if (!node_) throw GraphError("use of undefined tensor");
  return node_->shape;
}

template <typename T>
int Tensor<T>::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
  }
  return shape()[static_cast<std::size_t>(axis)];
}

template <typename T>
std::span<const T> Tensor<T>::values() const {
  if (!node_) throw GraphError("use of undefined tensor");
  return node_->values;
}

template <typename T>
std::span<T> Tensor<T>::mutable_values() {
  if (!node_) throw GraphError("use of undefined tensor");
  if (!node_->is_leaf()) throw GraphError("mutable_values() on a non-leaf tensor");
  return node_->values;
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return node_->values[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<int> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch for " + to_string(s));
  std::size_t flat = 0;
  std::size_t i = 0;
  for (int v : index) {
    if (v < 0 || v >= s[i]) throw ShapeError("index out of range for " + to_string(s));
    flat = flat * static_cast<std::size_t>(s[i]) + static_cast<std::size_t>(v);
    ++i;
  }
  return node_->values[flat];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return node_ && node_->requires_grad;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return node_ && !node_->grad.empty();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!node_) throw GraphError("use of undefined tensor");
  return node_->grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  if (!node_) throw GraphError("use of undefined tensor");
  return node_->ensure_grad();
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (node_) node_->grad.clear();
}

template <typename T>
bool Tensor<T>::is_leaf() const {
  return !node_ || node_->is_leaf();
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from_values(shape(), node_->values, false);
}

template <typename T>
void Tensor<T>::backward(const Tensor& seed) const {
  if (!node_) throw GraphError("backward() on undefined tensor");
  if (!node_->requires_grad) {
    throw GraphError("backward() root is not part of a recorded computation");
  }
  if (seed.shape() != shape()) {
    throw ShapeError("backward seed shape " + to_string(seed.shape()) + " != root shape " +
                     to_string(shape()));
  }

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> visited;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  auto& root_grad = node_->ensure_grad();
  const auto seed_values = seed.values();
  for (std::size_t i = 0; i < root_grad.size(); ++i) root_grad[i] += seed_values[i];

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* n = *it;
    if (n->is_leaf()) continue;
    if (!n->grad.empty()) n->backward(*n);
    // Intermediate gradients are transient so repeated passes do not double count.
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

template <typename T>
void Tensor<T>::backward() const {
  backward(full(shape(), T(1)));
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values,
                      std::vector<typename Tensor<T>::NodePtr> parents,
                      std::function<void(detail::Node<T>&)> fn) {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  if (grad_enabled()) {
    const bool any = std::any_of(parents.begin(), parents.end(),
                                 [](const auto& p) { return p && p->requires_grad; });
    if (any) {
      node->requires_grad = true;
      node->parents = std::move(parents);
      node->backward = std::move(fn);
    }
  }
  return Tensor<T>::wrap(std::move(node));
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> make_result<float>(Shape, std::vector<float>,
                                          std::vector<Tensor<float>::NodePtr>,
                                          std::function<void(detail::Node<float>&)>);
template Tensor<double> make_result<double>(Shape, std::vector<double>,
                                            std::vector<Tensor<double>::NodePtr>,
                                            std::function<void(detail::Node<double>&)>);

}  // namespace spotter::diff
