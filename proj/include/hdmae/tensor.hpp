#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hdmae/rng.hpp"

namespace hdmae {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until an adjoint reaches this node
  bool requires_grad = false;
};

// Dense row-major tensor handle.
//
// Copies of a Tensor share the same node, so gradients written by backward()
// are visible through every copy. Use clone() for an independent value copy.
// Scalars have an empty shape and one element.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  // Negative axes count from the end.
  std::int64_t dim(int axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad();
  void zero_grad() { node_->grad.clear(); }

  Tensor clone() const;
  Tensor detach() const;

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

// Ordered record of the operations executed on this thread since the last
// clear(). backward() replays the recorded adjoints in reverse execution
// order and then clears the record.
template <typename T>
class GradTape {
 public:
  struct Entry {
    std::string_view op;
    std::function<void()> adjoint;
  };

  static GradTape& current();

  void record(std::string_view op, std::function<void()> adjoint);
  std::size_t size() const { return entries_.size(); }
  std::span<const Entry> entries() const { return entries_; }
  void clear() { entries_.clear(); }
  void backward(const Tensor<T>& loss);

 private:
  std::vector<Entry> entries_;
};

// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_recording_enabled();

template <typename T>
void backward(const Tensor<T>& loss) {
  GradTape<T>::current().backward(loss);
}

// Throws NumericError naming `op` if any value is NaN or infinite.
template <typename T>
void check_finite(std::span<const T> values, std::string_view op);

// ---- differentiable operations -------------------------------------------

// [..., m, k] @ [..., k, n]. Batch dimensions must be equal, or one side
// must be a plain matrix that is broadcast over the other's batch.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x);

// Population-variance normalisation over the last dimension followed by
// the elementwise affine map gain * xhat + bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, double eps);

// tanh approximation:
//   0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

// Rows of a [n, d] tensor in index order. Duplicate indices are allowed and
// their adjoints are summed on the source row.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::int64_t> idx);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor);
template <typename T>
Tensor<T> sqrt(const Tensor<T>& x);

// x[..., d] + bias[d]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, int axis);
// x[..., start:start+len]
template <typename T>
Tensor<T> slice_lastdim(const Tensor<T>& x, std::int64_t start,
                        std::int64_t len);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

// ---- seeded initialisers --------------------------------------------------

template <typename T>
Tensor<T> gaussian_init(Shape shape, Rng& rng, double mean, double stddev,
                        bool requires_grad = false);
// Normal(0, stddev) redrawn until |z| <= bound * stddev.
template <typename T>
Tensor<T> truncated_normal_init(Shape shape, Rng& rng, double stddev,
                                double bound = 2.0,
                                bool requires_grad = false);
template <typename T>
Tensor<T> uniform_init(Shape shape, Rng& rng, double lo, double hi,
                       bool requires_grad = false);

}  // namespace hdmae
