#include "hdmae/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <utility>

#include "hdmae/errors.hpp"

namespace hdmae {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "," : "") << shape[i];
  }
  os << ']';
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad)
    : node_(std::make_shared<TensorNode<T>>()) {
  for (auto d : shape) {
    if (d < 0) {
      throw DimensionError("negative dimension in shape " + shape_str(shape));
    }
  }
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
std::int64_t Tensor<T>::dim(int axis) const {
  const int r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw IndexError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str(shape()));
  }
  return shape()[static_cast<std::size_t>(a)];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw ContractError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->data[0];
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  if (node_->grad.empty()) {
    node_->grad.assign(node_->data.size(), T(0));
  }
  return node_->grad;
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(shape(), node_->data, node_->requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(shape(), node_->data, false);
}

// ---- tape ------------------------------------------------------------------

namespace {
thread_local bool tl_recording = true;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(tl_recording) { tl_recording = false; }
NoGradGuard::~NoGradGuard() { tl_recording = previous_; }

bool grad_recording_enabled() { return tl_recording; }

template <typename T>
GradTape<T>& GradTape<T>::current() {
  thread_local GradTape<T> tape;
  return tape;
}

template <typename T>
void GradTape<T>::record(std::string_view op, std::function<void()> adjoint) {
  entries_.push_back(Entry{op, std::move(adjoint)});
}

template <typename T>
void GradTape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1 || !loss.shape().empty()) {
    clear();
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : "<none>"));
  }
  if (!loss.requires_grad()) {
    clear();
    throw ContractError("backward(): loss is not connected to the tape");
  }
  auto& g = loss.node()->grad;
  g.assign(1, T(0));
  g[0] += T(1);
  // Move the record out first so a throwing adjoint still leaves the tape
  // empty for the next forward pass.
  std::vector<Entry> entries;
  entries.swap(entries_);
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    it->adjoint();
  }
}

template <typename T>
void check_finite(std::span<const T> values, std::string_view op) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream os;
      os << "non-finite value " << values[i] << " at flat index " << i
         << " produced by op '" << op << "'";
      throw NumericError(os.str());
    }
  }
}

// ---- op helpers -------------------------------------------------------------

namespace {

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
bool wants_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (!tl_recording) {
    return false;
  }
  for (const auto* t : inputs) {
    if (t->requires_grad()) {
      return true;
    }
  }
  return false;
}

template <typename T>
Tensor<T> make_result(std::string_view op, Shape shape, std::vector<T> data,
                      bool requires_grad) {
  check_finite<T>(data, op);
  return Tensor<T>(std::move(shape), std::move(data), requires_grad);
}

// Gradient buffer of an input node, allocated on first use. Returns nullptr
// for inputs that do not take gradients.
template <typename T>
T* grad_sink(const NodePtr<T>& node) {
  if (!node->requires_grad) {
    return nullptr;
  }
  if (node->grad.empty()) {
    node->grad.assign(node->data.size(), T(0));
  }
  return node->grad.data();
}

template <typename T>
void require_defined(const Tensor<T>& t, std::string_view op) {
  if (!t.defined()) {
    throw ContractError(std::string(op) + ": undefined tensor operand");
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                        std::string_view op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// C[m,n] += A[m,k] B[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k,
             std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
}

// A[m,k] += C[m,n] B[k,n]^T
template <typename T>
void gemm_nt(const T* c, const T* b, T* a, std::int64_t m, std::int64_t k,
             std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const T* crow = c + i * n;
    T* arow = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T acc = 0;
      for (std::int64_t j = 0; j < n; ++j) {
        acc += crow[j] * brow[j];
      }
      arow[p] += acc;
    }
  }
}

// B[k,n] += A[m,k]^T C[m,n]
template <typename T>
void gemm_tn(const T* a, const T* c, T* b, std::int64_t m, std::int64_t k,
             std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* crow = c + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) {
        brow[j] += av * crow[j];
      }
    }
  }
}

}  // namespace

// ---- matmul -----------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul: operands must have rank >= 2, got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::int64_t m = a.dim(-2);
  const std::int64_t k = a.dim(-1);
  const std::int64_t n = b.dim(-1);
  if (b.dim(-2) != k) {
    throw DimensionError("matmul: inner dimensions differ for " +
                         shape_str(a.shape()) + " @ " + shape_str(b.shape()));
  }
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  if (a_batch == b_batch || b_batch.empty()) {
    batch = a_batch;
  } else if (a_batch.empty()) {
    batch = b_batch;
  } else {
    throw DimensionError("matmul: batch dimensions differ for " +
                         shape_str(a.shape()) + " @ " + shape_str(b.shape()));
  }
  const std::int64_t batches = shape_numel(batch);
  const std::int64_t a_stride = a_batch.empty() ? 0 : m * k;
  const std::int64_t b_stride = b_batch.empty() ? 0 : k * n;

  std::vector<T> out(static_cast<std::size_t>(batches * m * n), T(0));
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (std::int64_t s = 0; s < batches; ++s) {
    gemm_nn(ad + s * a_stride, bd + s * b_stride, out.data() + s * m * n, m, k,
            n);
  }
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  const bool rg = wants_grad<T>({&a, &b});
  auto result = make_result<T>("matmul", std::move(out_shape), std::move(out), rg);
  if (rg) {
    NodePtr<T> an = a.node(), bn = b.node(), on = result.node();
    GradTape<T>::current().record(
        "matmul", [an, bn, on, batches, a_stride, b_stride, m, k, n] {
          if (on->grad.empty()) return;
          const T* g = on->grad.data();
          if (T* ga = grad_sink(an)) {
            for (std::int64_t s = 0; s < batches; ++s) {
              gemm_nt(g + s * m * n, bn->data.data() + s * b_stride,
                      ga + s * a_stride, m, k, n);
            }
          }
          if (T* gb = grad_sink(bn)) {
            for (std::int64_t s = 0; s < batches; ++s) {
              gemm_tn(an->data.data() + s * a_stride, g + s * m * n,
                      gb + s * b_stride, m, k, n);
            }
          }
        });
  }
  return result;
}

// ---- softmax ----------------------------------------------------------------

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  require_defined(x, "softmax_lastdim");
  if (x.rank() == 0 || x.dim(-1) < 1) {
    throw DimensionError("softmax_lastdim: last dimension must be >= 1, got " +
                         shape_str(x.shape()));
  }
  check_finite<T>(x.data(), "softmax_lastdim(input)");
  const std::int64_t d = x.dim(-1);
  const std::int64_t rows = static_cast<std::int64_t>(x.numel()) / d;
  std::vector<T> out(x.numel());
  const T* xd = x.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* in = xd + r * d;
    T* o = out.data() + r * d;
    const T mx = *std::max_element(in, in + d);
    T total = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    const T inv = T(1) / total;
    for (std::int64_t j = 0; j < d; ++j) {
      o[j] *= inv;
    }
  }
  const bool rg = wants_grad<T>({&x});
  auto result = make_result<T>("softmax_lastdim", x.shape(), std::move(out), rg);
  if (rg) {
    NodePtr<T> xn = x.node(), on = result.node();
    GradTape<T>::current().record("softmax_lastdim", [xn, on, rows, d] {
      if (on->grad.empty()) return;
      T* gx = grad_sink(xn);
      if (!gx) return;
      const T* y = on->data.data();
      const T* g = on->grad.data();
      for (std::int64_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::int64_t j = 0; j < d; ++j) {
          dot += g[r * d + j] * y[r * d + j];
        }
        for (std::int64_t j = 0; j < d; ++j) {
          gx[r * d + j] += y[r * d + j] * (g[r * d + j] - dot);
        }
      }
    });
  }
  return result;
}

// ---- layer norm ---------------------------------------------------------------

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, double eps) {
  require_defined(x, "layer_norm");
  if (x.rank() == 0) {
    throw DimensionError("layer_norm: scalar input");
  }
  const std::int64_t d = x.dim(-1);
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) +
                         " / bias " + shape_str(bias.shape()) +
                         " must match last dimension of " +
                         shape_str(x.shape()));
  }
  const std::int64_t rows = static_cast<std::int64_t>(x.numel()) / d;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(static_cast<std::size_t>(rows));
  const T* xd = x.data().data();
  const T* gd = gain.data().data();
  const T* bd = bias.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* in = xd + r * d;
    T mu = 0;
    for (std::int64_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::int64_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    inv_std[static_cast<std::size_t>(r)] = is;
    for (std::int64_t j = 0; j < d; ++j) {
      const T h = (in[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gd[j] + bd[j];
    }
  }
  const bool rg = wants_grad<T>({&x, &gain, &bias});
  auto result = make_result<T>("layer_norm", x.shape(), std::move(out), rg);
  if (rg) {
    NodePtr<T> xn = x.node(), gn = gain.node(), bn = bias.node(),
               on = result.node();
    GradTape<T>::current().record(
        "layer_norm", [xn, gn, bn, on, rows, d, xhat = std::move(xhat),
                       inv_std = std::move(inv_std)] {
          if (on->grad.empty()) return;
          const T* g = on->grad.data();
          if (T* gg = grad_sink(gn)) {
            for (std::int64_t r = 0; r < rows; ++r)
              for (std::int64_t j = 0; j < d; ++j)
                gg[j] += g[r * d + j] * xhat[r * d + j];
          }
          if (T* gb = grad_sink(bn)) {
            for (std::int64_t r = 0; r < rows; ++r)
              for (std::int64_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
          }
          if (T* gx = grad_sink(xn)) {
            const T* gain_d = gn->data.data();
            const T inv_d = T(1) / static_cast<T>(d);
            for (std::int64_t r = 0; r < rows; ++r) {
              T mean_g = 0;
              T mean_gh = 0;
              for (std::int64_t j = 0; j < d; ++j) {
                const T gh = g[r * d + j] * gain_d[j];
                mean_g += gh;
                mean_gh += gh * xhat[r * d + j];
              }
              mean_g *= inv_d;
              mean_gh *= inv_d;
              const T is = inv_std[static_cast<std::size_t>(r)];
              for (std::int64_t j = 0; j < d; ++j) {
                const T gh = g[r * d + j] * gain_d[j];
                gx[r * d + j] +=
                    is * (gh - mean_g - xhat[r * d + j] * mean_gh);
              }
            }
          }
        });
  }
  return result;
}

// ---- gelu -------------------------------------------------------------------

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  require_defined(x, "gelu");
  const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  const T k = static_cast<T>(0.044715);
  std::vector<T> out(x.numel());
  const T* xd = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = xd[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + k * v * v * v)));
  }
  const bool rg = wants_grad<T>({&x});
  auto result = make_result<T>("gelu", x.shape(), std::move(out), rg);
  if (rg) {
    NodePtr<T> xn = x.node(), on = result.node();
    GradTape<T>::current().record("gelu", [xn, on, c, k] {
      if (on->grad.empty()) return;
      T* gx = grad_sink(xn);
      if (!gx) return;
      const T* g = on->grad.data();
      const T* xd = xn->data.data();
      for (std::size_t i = 0; i < xn->data.size(); ++i) {
        const T v = xd[i];
        const T t = std::tanh(c * (v + k * v * v * v));
        const T dt = (T(1) - t * t) * c * (T(1) + T(3) * k * v * v);
        gx[i] += g[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * dt);
      }
    });
  }
  return result;
}

// ---- gather -----------------------------------------------------------------

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::int64_t> idx) {
  require_defined(x, "gather_rows");
  if (x.rank() != 2) {
    throw DimensionError("gather_rows: expected [n, d], got " +
                         shape_str(x.shape()));
  }
  const std::int64_t n = x.dim(0);
  const std::int64_t d = x.dim(1);
  std::vector<std::int64_t> rows(idx.begin(), idx.end());
  for (auto r : rows) {
    if (r < 0 || r >= n) {
      throw IndexError("gather_rows: index " + std::to_string(r) +
                       " out of range [0, " + std::to_string(n) + ")");
    }
  }
  std::vector<T> out(rows.size() * static_cast<std::size_t>(d));
  const T* xd = x.data().data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(xd + rows[i] * d, d, out.data() + i * d);
  }
  const bool rg = wants_grad<T>({&x});
  auto result = make_result<T>(
      "gather_rows", Shape{static_cast<std::int64_t>(rows.size()), d},
      std::move(out), rg);
  if (rg) {
    NodePtr<T> xn = x.node(), on = result.node();
    GradTape<T>::current().record(
        "gather_rows", [xn, on, d, rows = std::move(rows)] {
          if (on->grad.empty()) return;
          T* gx = grad_sink(xn);
          if (!gx) return;
          const T* g = on->grad.data();
          for (std::size_t i = 0; i < rows.size(); ++i) {
            T* dst = gx + rows[i] * d;
            const T* src = g + static_cast<std::int64_t>(i) * d;
            for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
          }
        });
  }
  return result;
}

// ---- elementwise --------------------------------------------------------------

namespace {

// Shared implementation for same-shape binary ops. da/db compute the local
// partials given (a, b).
template <typename T, typename Fwd, typename Da, typename Db>
Tensor<T> binary_op(std::string_view op, const Tensor<T>& a,
                    const Tensor<T>& b, Fwd fwd, Da da, Db db) {
  require_defined(a, op);
  require_defined(b, op);
  require_same_shape(a, b, op);
  std::vector<T> out(a.numel());
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(ad[i], bd[i]);
  const bool rg = wants_grad<T>({&a, &b});
  auto result = make_result<T>(op, a.shape(), std::move(out), rg);
  if (rg) {
    NodePtr<T> an = a.node(), bn = b.node(), on = result.node();
    GradTape<T>::current().record(op, [an, bn, on, da, db] {
      if (on->grad.empty()) return;
      const T* g = on->grad.data();
      const T* av = an->data.data();
      const T* bv = bn->data.data();
      const std::size_t n = on->data.size();
      if (T* ga = grad_sink(an)) {
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * da(av[i], bv[i]);
      }
      if (T* gb = grad_sink(bn)) {
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * db(av[i], bv[i]);
      }
    });
  }
  return result;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor) {
  require_defined(x, "scale");
  const T f = static_cast<T>(factor);
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= f;
  const bool rg = wants_grad<T>({&x});
  auto result = make_result<T>("scale", x.shape(), std::move(out), rg);
  if (rg) {
    NodePtr<T> xn = x.node(), on = result.node();
    GradTape<T>::current().record("scale", [xn, on, f] {
      if (on->grad.empty()) return;
      T* gx = grad_sink(xn);
      if (!gx) return;
      const T* g = on->grad.data();
      for (std::size_t i = 0; i < on->grad.size(); ++i) gx[i] += g[i] * f;
    });
  }
  return result;
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  require_defined(x, "sqrt");
  std::vector<T> out(x.numel());
  const T* xd = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(xd[i]);
  const bool rg = wants_grad<T>({&x});
  auto result = make_result<T>("sqrt", x.shape(), std::move(out), rg);
  if (rg) {
    NodePtr<T> xn = x.node(), on = result.node();
    GradTape<T>::current().record("sqrt", [xn, on] {
      if (on->grad.empty()) return;
      T* gx = grad_sink(xn);
      if (!gx) return;
      const T* g = on->grad.data();
      const T* y = on->data.data();
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        gx[i] += g[i] * T(0.5) / y[i];
      }
      check_finite<T>(xn->grad, "sqrt(backward)");
    });
  }
  return result;
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  require_defined(x, "add_bias");
  require_defined(bias, "add_bias");
  if (x.rank() == 0 || bias.shape() != Shape{x.dim(-1)}) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) +
                         " does not match last dimension of " +
                         shape_str(x.shape()));
  }
  const std::int64_t d = x.dim(-1);
  std::vector<T> out(x.data().begin(), x.data().end());
  const T* bd = bias.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] += bd[static_cast<std::int64_t>(i) % d];
  }
  const bool rg = wants_grad<T>({&x, &bias});
  auto result = make_result<T>("add_bias", x.shape(), std::move(out), rg);
  if (rg) {
    NodePtr<T> xn = x.node(), bn = bias.node(), on = result.node();
    GradTape<T>::current().record("add_bias", [xn, bn, on, d] {
      if (on->grad.empty()) return;
      const T* g = on->grad.data();
      const std::size_t n = on->grad.size();
      if (T* gx = grad_sink(xn)) {
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i];
      }
      if (T* gb = grad_sink(bn)) {
        for (std::size_t i = 0; i < n; ++i) {
          gb[static_cast<std::int64_t>(i) % d] += g[i];
        }
      }
    });
  }
  return result;
}

// ---- layout -------------------------------------------------------------------

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  require_defined(x, "transpose_last2");
  if (x.rank() < 2) {
    throw DimensionError("transpose_last2: rank < 2 for " +
                         shape_str(x.shape()));
  }
  const std::int64_t r = x.dim(-2);
  const std::int64_t c = x.dim(-1);
  const std::int64_t batches = static_cast<std::int64_t>(x.numel()) / std::max<std::int64_t>(r * c, 1);
  std::vector<T> out(x.numel());
  const T* xd = x.data().data();
  for (std::int64_t s = 0; s < batches; ++s)
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < c; ++j)
        out[s * r * c + j * r + i] = xd[s * r * c + i * c + j];
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  const bool rg = wants_grad<T>({&x});
  auto result = make_result<T>("transpose_last2", std::move(shape), std::move(out), rg);
  if (rg) {
    NodePtr<T> xn = x.node(), on = result.node();
    GradTape<T>::current().record("transpose_last2", [xn, on, batches, r, c] {
      if (on->grad.empty()) return;
      T* gx = grad_sink(xn);
      if (!gx) return;
      const T* g = on->grad.data();
      for (std::int64_t s = 0; s < batches; ++s)
        for (std::int64_t i = 0; i < r; ++i)
          for (std::int64_t j = 0; j < c; ++j)
            gx[s * r * c + i * c + j] += g[s * r * c + j * r + i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != static_cast<std::int64_t>(x.numel())) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) +
                         " as " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  const bool rg = wants_grad<T>({&x});
  auto result = make_result<T>("reshape", std::move(shape), std::move(out), rg);
  if (rg) {
    NodePtr<T> xn = x.node(), on = result.node();
    GradTape<T>::current().record("reshape", [xn, on] {
      if (on->grad.empty()) return;
      T* gx = grad_sink(xn);
      if (!gx) return;
      for (std::size_t i = 0; i < on->grad.size(); ++i) gx[i] += on->grad[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, int axis) {
  if (parts.empty()) {
    throw ContractError("concat: no operands");
  }
  for (const auto& p : parts) require_defined(p, "concat");
  const Shape& first = parts[0].shape();
  const int r = static_cast<int>(first.size());
  const int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) {
    throw IndexError("concat: axis " + std::to_string(axis) +
                     " out of range for " + shape_str(first));
  }
  std::int64_t outer = 1;
  for (int i = 0; i < ax; ++i) outer *= first[static_cast<std::size_t>(i)];
  std::int64_t inner = 1;
  for (int i = ax + 1; i < r; ++i) inner *= first[static_cast<std::size_t>(i)];
  std::vector<std::int64_t> widths;  // per-part chunk length along axis*inner
  std::int64_t total_axis = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = static_cast<int>(s.size()) == r;
    for (int i = 0; ok && i < r; ++i) {
      if (i != ax && s[static_cast<std::size_t>(i)] != first[static_cast<std::size_t>(i)]) ok = false;
    }
    if (!ok) {
      throw DimensionError("concat: " + shape_str(s) + " incompatible with " +
                           shape_str(first) + " along axis " +
                           std::to_string(ax));
    }
    widths.push_back(s[static_cast<std::size_t>(ax)] * inner);
    total_axis += s[static_cast<std::size_t>(ax)];
  }
  const std::int64_t row = total_axis * inner;
  std::vector<T> out(static_cast<std::size_t>(outer * row));
  std::int64_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const T* src = parts[p].data().data();
    const std::int64_t w = widths[p];
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(src + o * w, w, out.data() + o * row + offset);
    }
    offset += w;
  }
  Shape shape = first;
  shape[static_cast<std::size_t>(ax)] = total_axis;
  bool rg = false;
  if (tl_recording) {
    for (const auto& p : parts) rg = rg || p.requires_grad();
  }
  auto result = make_result<T>("concat", std::move(shape), std::move(out), rg);
  if (rg) {
    std::vector<NodePtr<T>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    NodePtr<T> on = result.node();
    GradTape<T>::current().record(
        "concat", [nodes = std::move(nodes), widths = std::move(widths), on,
                   outer, row] {
          if (on->grad.empty()) return;
          const T* g = on->grad.data();
          std::int64_t off = 0;
          for (std::size_t p = 0; p < nodes.size(); ++p) {
            const std::int64_t w = widths[p];
            if (T* gp = grad_sink(nodes[p])) {
              for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t j = 0; j < w; ++j)
                  gp[o * w + j] += g[o * row + off + j];
            }
            off += w;
          }
        });
  }
  return result;
}

template <typename T>
Tensor<T> slice_lastdim(const Tensor<T>& x, std::int64_t start,
                        std::int64_t len) {
  require_defined(x, "slice_lastdim");
  if (x.rank() == 0) {
    throw DimensionError("slice_lastdim: scalar input");
  }
  const std::int64_t d = x.dim(-1);
  if (start < 0 || len < 0 || start + len > d) {
    throw IndexError("slice_lastdim: [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") outside last dim of " +
                     shape_str(x.shape()));
  }
  const std::int64_t rows = d == 0 ? 0 : static_cast<std::int64_t>(x.numel()) / d;
  std::vector<T> out(static_cast<std::size_t>(rows * len));
  const T* xd = x.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    std::copy_n(xd + r * d + start, len, out.data() + r * len);
  }
  Shape shape = x.shape();
  shape.back() = len;
  const bool rg = wants_grad<T>({&x});
  auto result = make_result<T>("slice_lastdim", std::move(shape), std::move(out), rg);
  if (rg) {
    NodePtr<T> xn = x.node(), on = result.node();
    GradTape<T>::current().record("slice_lastdim", [xn, on, rows, d, start, len] {
      if (on->grad.empty()) return;
      T* gx = grad_sink(xn);
      if (!gx) return;
      const T* g = on->grad.data();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < len; ++j)
          gx[r * d + start + j] += g[r * len + j];
    });
  }
  return result;
}

// ---- reductions ----------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> scaled_sum(std::string_view op, const Tensor<T>& x, T factor) {
  require_defined(x, op);
  T total = 0;
  for (T v : x.data()) total += v;
  total *= factor;
  const bool rg = wants_grad<T>({&x});
  auto result = make_result<T>(op, Shape{}, std::vector<T>{total}, rg);
  if (rg) {
    NodePtr<T> xn = x.node(), on = result.node();
    GradTape<T>::current().record(op, [xn, on, factor] {
      if (on->grad.empty()) return;
      T* gx = grad_sink(xn);
      if (!gx) return;
      const T g = on->grad[0] * factor;
      for (std::size_t i = 0; i < xn->data.size(); ++i) gx[i] += g;
    });
  }
  return result;
}

}  // namespace

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  return scaled_sum<T>("sum", x, T(1));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  require_defined(x, "mean");
  if (x.numel() == 0) {
    throw ContractError("mean: empty tensor");
  }
  return scaled_sum<T>("mean", x, T(1) / static_cast<T>(x.numel()));
}

// ---- initialisers ---------------------------------------------------------------

template <typename T>
Tensor<T> gaussian_init(Shape shape, Rng& rng, double mean_value,
                        double stddev, bool requires_grad) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  std::vector<T> data(n);
  for (auto& v : data) v = static_cast<T>(mean_value + stddev * rng.normal());
  return Tensor<T>(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
Tensor<T> truncated_normal_init(Shape shape, Rng& rng, double stddev,
                                double bound, bool requires_grad) {
  if (bound <= 0) {
    throw ContractError("truncated_normal_init: bound must be positive");
  }
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  std::vector<T> data(n);
  for (auto& v : data) {
    double z = rng.normal();
    while (std::abs(z) > bound) z = rng.normal();
    v = static_cast<T>(stddev * z);
  }
  return Tensor<T>(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
Tensor<T> uniform_init(Shape shape, Rng& rng, double lo, double hi,
                       bool requires_grad) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  std::vector<T> data(n);
  for (auto& v : data) v = static_cast<T>(lo + (hi - lo) * rng.uniform());
  return Tensor<T>(std::move(shape), std::move(data), requires_grad);
}

// ---- instantiations --------------------------------------------------------------

#define HDMAE_INSTANTIATE(T)                                                   \
  template class Tensor<T>;                                                    \
  template class GradTape<T>;                                                  \
  template void check_finite<T>(std::span<const T>, std::string_view);         \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> softmax_lastdim(const Tensor<T>&);                        \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&,            \
                                const Tensor<T>&, double);                     \
  template Tensor<T> gelu(const Tensor<T>&);                                   \
  template Tensor<T> gather_rows(const Tensor<T>&,                             \
                                 std::span<const std::int64_t>);               \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> scale(const Tensor<T>&, double);                          \
  template Tensor<T> sqrt(const Tensor<T>&);                                   \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> transpose_last2(const Tensor<T>&);                        \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                         \
  template Tensor<T> concat(std::span<const Tensor<T>>, int);                  \
  template Tensor<T> slice_lastdim(const Tensor<T>&, std::int64_t,             \
                                   std::int64_t);                              \
  template Tensor<T> sum(const Tensor<T>&);                                    \
  template Tensor<T> mean(const Tensor<T>&);                                   \
  template Tensor<T> gaussian_init(Shape, Rng&, double, double, bool);         \
  template Tensor<T> truncated_normal_init(Shape, Rng&, double, double, bool); \
  template Tensor<T> uniform_init(Shape, Rng&, double, double, bool);

HDMAE_INSTANTIATE(float)
HDMAE_INSTANTIATE(double)

#undef HDMAE_INSTANTIATE

}  // namespace hdmae
