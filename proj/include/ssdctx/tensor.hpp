#pragma once

#include <Eigen/Core>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace ssdctx {

using Index = Eigen::Index;

/// Dense 4-d extents in (batch, channels, height, width) order. Everything in
/// the pipeline is a 4-d array; vectors and scalars use singleton dims.
struct Shape4 {
  Index n = 0, c = 0, h = 0, w = 0;

  Index numel() const { return n * c * h * w; }
  Index spatial() const { return h * w; }
  bool operator==(const Shape4&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

namespace detail {
inline thread_local int no_grad_depth = 0;
inline std::atomic<bool> checked_mode{false};
}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

/// Opt-in NaN/Inf screening at operator boundaries. Off by default so the
/// hot path stays honest for the profiler.
inline void set_checked_mode(bool on) { detail::checked_mode.store(on); }
inline bool checked_mode() { return detail::checked_mode.load(); }

/// RAII scope that disables graph recording (eval / measurement passes).
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class S>
class Tensor;

namespace detail {

template <class S>
struct TensorNode {
  Shape4 shape;
  Eigen::ArrayX<S> value;
  Eigen::ArrayX<S> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<Tensor<S>> parents;
  std::function<void(TensorNode<S>&)> backward_fn;

  void ensure_grad() {
    if (grad.size() == 0) grad = Eigen::ArrayX<S>::Zero(shape.numel());
  }
};

}  // namespace detail

/// Shared-ownership handle to a dense 4-d array with optional reverse-mode
/// gradient. Copying a Tensor aliases the same storage; ops build a tape of
/// parent links that backward() replays in reverse topological order.
template <class S>
class Tensor {
 public:
  using Scalar = S;
  using Node = detail::TensorNode<S>;

  Tensor() = default;

  static Tensor zeros(Shape4 s, bool requires_grad = false) {
    Tensor t = empty(s, requires_grad);
    t.node_->value.setZero();
    return t;
  }

  /// Uninitialized storage; for op results whose every element gets written.
  static Tensor empty(Shape4 s, bool requires_grad = false) {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = s;
    t.node_->value.resize(s.numel());
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape4 s, S v, bool requires_grad = false) {
    Tensor t = zeros(s, requires_grad);
    t.node_->value.setConstant(v);
    return t;
  }

  static Tensor from(Shape4 s, std::initializer_list<S> vals) {
    Tensor t = zeros(s);
    if (static_cast<Index>(vals.size()) != s.numel())
      throw std::invalid_argument("Tensor::from: " + std::to_string(vals.size()) +
                                  " values for shape " + s.str());
    Index i = 0;
    for (S v : vals) t.node_->value[i++] = v;
    return t;
  }

  static Tensor from(Shape4 s, const std::vector<S>& vals) {
    Tensor t = zeros(s);
    if (static_cast<Index>(vals.size()) != s.numel())
      throw std::invalid_argument("Tensor::from: " + std::to_string(vals.size()) +
                                  " values for shape " + s.str());
    std::copy(vals.begin(), vals.end(), t.node_->value.data());
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape4& shape() const { return node_->shape; }
  Index numel() const { return node_->shape.numel(); }

  Eigen::ArrayX<S>& value() { return node_->value; }
  const Eigen::ArrayX<S>& value() const { return node_->value; }
  S* data() { return node_->value.data(); }
  const S* data() const { return node_->value.data(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  bool has_grad() const { return node_->grad.size() != 0; }
  /// Gradient buffer, allocated (zero) on first access.
  Eigen::ArrayX<S>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (node_->grad.size() != 0) node_->grad.setZero();
  }
  void drop_grad() { node_->grad.resize(0); }

  S at(Index n, Index c, Index h, Index w) const {
    const Shape4& s = node_->shape;
    return node_->value[((n * s.c + c) * s.h + h) * s.w + w];
  }
  S& at(Index n, Index c, Index h, Index w) {
    const Shape4& s = node_->shape;
    return node_->value[((n * s.c + c) * s.h + h) * s.w + w];
  }

  S item() const {
    if (numel() != 1) throw std::logic_error("item() on non-scalar tensor");
    return node_->value[0];
  }

  Node* node() const { return node_.get(); }

  /// Runs reverse-mode accumulation from this tensor, seeding with ones.
  void backward() {
    if (!node_->requires_grad)
      throw std::logic_error("backward() on tensor that does not require grad");
    std::vector<Node*> order;
    topo_sort(order);
    node_->ensure_grad();
    node_->grad.setOnes();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
    }
  }

  /// Detaches this tensor from the graph (keeps value, drops parents).
  Tensor detached() const {
    Tensor t = zeros(node_->shape);
    t.node_->value = node_->value;
    return t;
  }

  // -- op plumbing -----------------------------------------------------

  /// Builds an op result node with uninitialized values (ops either fill the
  /// output completely or zero it themselves). Parents and the backward fn
  /// are only recorded when grad mode is on and some input needs gradients.
  static Tensor make_op(Shape4 shape, std::vector<Tensor> parents,
                        std::function<void(Node&)> backward_fn) {
    Tensor t = empty(shape);
    bool rg = false;
    if (grad_enabled())
      for (const Tensor& p : parents)
        if (p.defined() && p.requires_grad()) rg = true;
    if (rg) {
      t.node_->requires_grad = true;
      t.node_->parents = std::move(parents);
      t.node_->backward_fn = std::move(backward_fn);
    }
    return t;
  }

  void check_finite(const char* op) const {
    if (!checked_mode()) return;
    if (!node_->value.isFinite().all())
      throw std::domain_error(std::string(op) + ": non-finite values in output " +
                              node_->shape.str());
  }

 private:
  void topo_sort(std::vector<Node*>& order) const {
    std::unordered_set<const Node*> seen;
    // iterative post-order; the graphs here are DAGs of a few hundred nodes
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, i] = stack.back();
      if (i < n->parents.size()) {
        Node* p = n->parents[i++].node();
        if (p && !seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<Node> node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace ssdctx
