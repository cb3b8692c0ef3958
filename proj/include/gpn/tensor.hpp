#pragma once

#include <cstddef>
#include <algorithm>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace gpn {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

template <typename T>
class Tape;

// Shared handle to a shaped array that can take part in reverse-mode
// differentiation. Copies alias the same storage, like a framework variable.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor filled(Shape shape, T value, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    return Tensor(std::move(shape), std::move(values), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t dim(std::size_t axis) const { return node().shape.at(axis); }
  std::size_t size() const { return node().values.size(); }

  std::span<T> values() { return node().values; }
  std::span<const T> values() const { return node().values; }
  T& operator[](std::size_t i) { return node().values[i]; }
  T operator[](std::size_t i) const { return node().values[i]; }

  T item() const {
    if (size() != 1) {
      throw std::logic_error("item() on tensor of shape " + shape_str(shape()));
    }
    return node().values[0];
  }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool flag) { node().requires_grad = flag; }

  bool has_grad() const { return !node().grad.empty(); }

  // Gradient buffer, allocated (zero) on first access. Like the storage it
  // belongs to the shared node, not to this handle.
  std::span<T> grad() const {
    auto& n = *node_ptr();
    if (n.grad.empty()) n.grad.assign(n.values.size(), T(0));
    return n.grad;
  }

  void zero_grad() const {
    auto& g = node_ptr()->grad;
    std::fill(g.begin(), g.end(), T(0));
  }

  // Fresh storage holding the same values; never requires grad.
  Tensor detach() const { return Tensor(shape(), node().values, false); }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  // True when the tensor was produced by an operation recorded on some tape.
  bool is_recorded() const { return node().tape != nullptr; }

 private:
  struct Node {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;
    bool requires_grad = false;
    const Tape<T>* tape = nullptr;
    std::size_t tape_index = 0;
  };

  Tensor(Shape shape, std::vector<T> values, bool requires_grad)
      : node_(std::make_shared<Node>()) {
    if (shape_numel(shape) != values.size()) {
      throw std::invalid_argument("tensor of shape " + shape_str(shape) + " given " +
                                  std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->values = std::move(values);
    node_->requires_grad = requires_grad;
  }

  Node& node() {
    if (!node_) throw std::logic_error("use of undefined tensor");
    return *node_;
  }
  const Node& node() const {
    if (!node_) throw std::logic_error("use of undefined tensor");
    return *node_;
  }
  Node* node_ptr() const {
    if (!node_) throw std::logic_error("use of undefined tensor");
    return node_.get();
  }

  std::shared_ptr<Node> node_;

  friend class Tape<T>;
};

// Ordered record of differentiable operations. A non-recording tape runs the
// same forward code without keeping anything for backward.
template <typename T>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape inference() { return Tape(false); }

  bool recording() const { return recording_; }
  std::size_t size() const { return ops_.size(); }

  // True when an op over `inputs` must be recorded: recording and some input
  // needs grad. Inputs not produced on this tape are registered as leaves.
  bool tracks(std::initializer_list<const Tensor<T>*> inputs) {
    if (!recording_) return false;
    bool any = false;
    for (const auto* t : inputs) {
      if (!t->defined() || !t->requires_grad()) continue;
      any = true;
      if (t->node_->tape != this && leaf_set_.insert(t->node_.get()).second) {
        leaves_.push_back(t->node_);
      }
    }
    return any;
  }

  // Appends an operation. `rule` reads output.grad() and accumulates into the
  // grads of inputs that require them.
  void record(Tensor<T>& output, std::function<void()> rule) {
    output.node_->requires_grad = true;
    output.node_->tape = this;
    output.node_->tape_index = ops_.size();
    ops_.push_back(Op{output, std::move(rule)});
  }

  // Populates grads of every leaf that requires them with d(loss)/d(leaf).
  // Leaf grads accumulate across calls; intermediate grads restart each call.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.node_->tape != this) {
      throw std::invalid_argument("backward: loss was not produced on this tape");
    }
    if (loss.size() != 1) {
      throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                  shape_str(loss.shape()));
    }
    const std::size_t last = loss.node_->tape_index;
    for (std::size_t i = 0; i <= last; ++i) {
      auto& g = ops_[i].output.node_->grad;
      g.assign(ops_[i].output.node_->values.size(), T(0));
    }
    // Leaf grads are computed into fresh buffers and then added, so repeated
    // calls accumulate exactly.
    std::vector<std::vector<T>> saved(leaves_.size());
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      auto& g = leaves_[i]->grad;
      saved[i] = std::move(g);
      g.assign(leaves_[i]->values.size(), T(0));
    }
    loss.node_->grad[0] = T(1);
    for (std::size_t i = last + 1; i-- > 0;) ops_[i].rule();
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      auto& g = leaves_[i]->grad;
      if (saved[i].size() != g.size()) continue;
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += saved[i][j];
    }
  }

  void clear() {
    ops_.clear();
    leaves_.clear();
    leaf_set_.clear();
  }

 private:
  struct Op {
    Tensor<T> output;
    std::function<void()> rule;
  };

  bool recording_;
  std::vector<Op> ops_;
  std::vector<std::shared_ptr<typename Tensor<T>::Node>> leaves_;
  std::unordered_set<const void*> leaf_set_;
};

// Temporarily stops gradient tracking for a set of parameters.
template <typename T>
class FreezeGuard {
 public:
  explicit FreezeGuard(std::vector<Tensor<T>> params) : params_(std::move(params)) {
    saved_.reserve(params_.size());
    for (auto& p : params_) {
      saved_.push_back(p.requires_grad());
      p.set_requires_grad(false);
    }
  }
  ~FreezeGuard() {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].set_requires_grad(saved_[i]);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<Tensor<T>> params_;
  std::vector<bool> saved_;
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& src) {
  std::vector<To> out(src.size());
  auto v = src.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<To>(v[i]);
  return Tensor<To>::from(src.shape(), std::move(out));
}

}  // namespace gpn
