#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace cress::ad {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

// Value + gradient buffers. Reshaped views of a tensor share one Storage, so
// a gradient written through any view is visible to all of them.
struct Storage {
  std::vector<double> v;
  std::vector<double> g;  // empty until a backward pass needs it
};

struct TensorData {
  Shape shape;
  std::shared_ptr<Storage> st;
  bool requires_grad = false;
  int node = -1;  // producing tape node, -1 for leaves
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.d_ = std::make_shared<TensorData>();
    t.d_->shape = std::move(shape);
    t.d_->st = std::make_shared<Storage>();
    t.d_->st->v.assign(static_cast<size_t>(shape_numel(t.d_->shape)), 0.0);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
      throw std::invalid_argument("tensor: value count does not match shape");
    Tensor t = zeros(std::move(shape));
    t.d_->st->v = std::move(values);
    return t;
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  int64_t dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(d_->st->v.size()); }

  double* data() { return d_->st->v.data(); }
  const double* data() const { return d_->st->v.data(); }
  double value() const {
    if (numel() != 1) throw std::invalid_argument("tensor: value() on non-scalar");
    return d_->st->v[0];
  }

  bool has_grad() const { return !d_->st->g.empty(); }
  double* grad() {
    auto& g = d_->st->g;
    if (g.empty()) g.assign(d_->st->v.size(), 0.0);
    return g.data();
  }
  const double* grad() const { return d_->st->g.data(); }
  void zero_grad() {
    if (has_grad()) std::fill(d_->st->g.begin(), d_->st->g.end(), 0.0);
  }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool b) { d_->requires_grad = b; }
  int node() const { return d_->node; }

  // Zero-copy view with a new shape (same element count).
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw std::invalid_argument("reshape: element count mismatch");
    Tensor t;
    t.d_ = std::make_shared<TensorData>();
    t.d_->shape = std::move(shape);
    t.d_->st = d_->st;
    t.d_->requires_grad = d_->requires_grad;
    t.d_->node = d_->node;
    return t;
  }

  std::shared_ptr<TensorData> d_;
};

// Reverse-mode tape. Operations append a backward closure; backward() replays
// them in exact reverse recording order, which keeps gradient accumulation
// deterministic.
class Tape {
 public:
  int record(std::function<void()> backward_fn, const Tensor& out) {
    nodes_.push_back(std::move(backward_fn));
    outputs_.push_back(out.d_);
    return static_cast<int>(nodes_.size()) - 1;
  }

  // loss must be scalar; seeds its gradient with 1 and sweeps the tape.
  void backward(Tensor loss) {
    if (loss.numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar");
    loss.grad()[0] += 1.0;
    for (size_t i = nodes_.size(); i > 0; --i) nodes_[i - 1]();
  }

  // Clears gradients of every tensor produced on this tape (leaves are the
  // caller's responsibility).
  void zero_grads() {
    for (auto& d : outputs_)
      if (!d->st->g.empty()) std::fill(d->st->g.begin(), d->st->g.end(), 0.0);
  }

  size_t size() const { return nodes_.size(); }
  void clear() {
    nodes_.clear();
    outputs_.clear();
  }

 private:
  std::vector<std::function<void()>> nodes_;
  std::vector<std::shared_ptr<TensorData>> outputs_;
};

}  // namespace cress::ad
