#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "densegrade/rng.hpp"

namespace densegrade {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_mode_enabled() { return detail::grad_mode_flag(); }

// RAII guard that disables graph recording (inference / data paths).
class NoGradGuard {
 public:
  NoGradGuard() : saved_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

// Dense N-d tensor with reverse-mode autodiff. A TensorT is a cheap handle
// onto a shared node; ops link result nodes back to the inputs they must
// propagate into, and backward() replays those links in reverse topological
// order. Gradients accumulate additively across fan-out.
template <typename S>
class TensorT {
  static_assert(std::is_floating_point_v<S>);

 public:
  struct Node {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // allocated lazily during backward
    bool requires_grad = false;
    bool backward_ran = false;
    std::vector<std::shared_ptr<Node>> parents;   // tracked inputs only
    std::function<void(Node&)> backward_fn;

    std::size_t size() const { return data.size(); }
    std::vector<S>& ensure_grad() {
      if (grad.size() != data.size()) grad.assign(data.size(), S(0));
      return grad;
    }
  };

  TensorT() = default;
  explicit TensorT(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), S(0), requires_grad);
  }

  static TensorT full(Shape shape, S value, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->data.assign(shape_numel(shape), value);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT from_vector(Shape shape, std::vector<S> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size())
      throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                  " values do not fill shape " + shape_to_string(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(values);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT randn(Shape shape, RngStream& rng, S stddev = S(1), bool requires_grad = false) {
    TensorT t = zeros(std::move(shape), requires_grad);
    for (S& v : t.node_->data) v = static_cast<S>(rng.normal()) * stddev;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->data.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }

  S* data() { return node_->data.data(); }
  const S* data() const { return node_->data.data(); }
  std::vector<S>& values() { return node_->data; }
  const std::vector<S>& values() const { return node_->data; }

  S item() const {
    if (size() != 1)
      throw std::invalid_argument("item(): tensor " + shape_to_string(shape()) + " is not scalar");
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  bool has_grad() const { return node_ && node_->grad.size() == node_->data.size(); }
  std::vector<S>& grad() {
    if (!has_grad())
      throw std::runtime_error("grad(): no gradient present; run backward() first");
    return node_->grad;
  }
  const std::vector<S>& grad() const {
    return const_cast<TensorT*>(this)->grad();
  }

  void zero_grad() {
    if (node_) {
      node_->grad.assign(node_->data.size(), S(0));
      node_->backward_ran = false;
    }
  }

  // Detached value copy (no graph linkage).
  TensorT clone_detached() const {
    auto n = std::make_shared<Node>();
    n->shape = node_->shape;
    n->data = node_->data;
    return TensorT(std::move(n));
  }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

namespace detail {

#if !defined(NDEBUG)
template <typename S>
inline void debug_check_finite(const char* op, const std::vector<S>& data) {
  for (S v : data)
    if (!std::isfinite(v))
      throw std::logic_error(std::string(op) + ": non-finite value produced");
}
#else
template <typename S>
inline void debug_check_finite(const char*, const std::vector<S>&) {}
#endif

// Builds a result node; parents/backward recorded only when grad mode is on
// and some input is tracked.
template <typename S>
TensorT<S> make_op_result(const char* op, Shape shape, std::vector<S> data,
                          std::vector<TensorT<S>> tracked_inputs,
                          std::function<void(typename TensorT<S>::Node&)> backward_fn) {
  debug_check_finite(op, data);
  auto out = TensorT<S>::from_vector(std::move(shape), std::move(data));
  bool track = grad_mode_enabled();
  if (track) {
    bool any = false;
    for (const auto& t : tracked_inputs) any = any || (t.defined() && t.requires_grad());
    track = any;
  }
  if (track) {
    auto n = out.node();
    n->requires_grad = true;
    for (const auto& t : tracked_inputs)
      if (t.defined() && t.requires_grad()) n->parents.push_back(t.node());
    n->backward_fn = std::move(backward_fn);
  }
  return out;
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Every tensor with requires_grad that
// is reachable from the loss receives (accumulates) its gradient.
template <typename S>
void backward(const TensorT<S>& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward(): undefined tensor");
  if (loss.size() != 1)
    throw std::invalid_argument("backward(): loss " + shape_to_string(loss.shape()) +
                                " is not scalar");
  if (!loss.requires_grad())
    throw std::invalid_argument("backward(): loss does not require grad (nothing recorded)");
  auto root = loss.node();
  if (root->backward_ran)
    throw std::runtime_error(
        "backward(): already ran on this loss; zero gradients before re-running");

  using Node = typename TensorT<S>::Node;
  // iterative post-order DFS -> topological order
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next_child] = stack.back();
    if (next_child < node->parents.size()) {
      Node* child = node->parents[next_child++].get();
      if (visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad()[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn) node->backward_fn(*node);
  }
  root->backward_ran = true;
}

// Zeroes every gradient in the graph below `root` and clears the ran flag,
// allowing a second backward over the same recorded graph.
template <typename S>
void reset_graph_grads(const TensorT<S>& root) {
  using Node = typename TensorT<S>::Node;
  std::unordered_set<Node*> visited;
  std::vector<Node*> stack{root.node().get()};
  visited.insert(root.node().get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    n->grad.assign(n->data.size(), S(0));
    n->backward_ran = false;
    for (auto& p : n->parents)
      if (visited.insert(p.get()).second) stack.push_back(p.get());
  }
}

}  // namespace densegrade
