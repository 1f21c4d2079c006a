#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "milforge/common.hpp"
#include "milforge/kernels.hpp"
#include "milforge/tensor.hpp"

namespace milforge {

// Reverse-mode tape over an explicit primitive vocabulary. Each op records a
// backward closure; backward() replays the closures in exact reverse
// execution order. Parameter leaves can bind an external gradient sink so
// per-bag gradients accumulate straight into the model's grad buffers.
//
// A tape and its tensors are confined to one worker; independent tapes may
// run concurrently with no shared mutable state.
template <typename T>
class Tape {
 public:
  using Id = std::uint32_t;

  // Owned leaf (inputs, constants).
  Id leaf(Tensor<T> v, const char* op = "leaf") {
    nodes_.push_back(Node{std::move(v), nullptr, nullptr, {}, {}, op});
    return static_cast<Id>(nodes_.size() - 1);
  }

  // Parameter leaf: the value stays in the caller's storage and gradients
  // accumulate into *grad_sink (never zeroed here; the optimizer owns that).
  Id param(const Tensor<T>& v, Tensor<T>* grad_sink, const char* op = "param") {
    nodes_.push_back(Node{{}, &v, grad_sink, {}, {}, op});
    return static_cast<Id>(nodes_.size() - 1);
  }

  // Id the next push() will get; lets an op's backward closure name its own
  // output. Also the extension point used by the gradcheck fault-injection
  // fixture in the test suite.
  Id next_id() const { return static_cast<Id>(nodes_.size()); }

  Id push(Tensor<T> value, std::function<void(Tape&)> bw, const char* op) {
    if (!value.all_finite())
      throw NumericalError(std::string("non-finite output of ") + op);
    nodes_.push_back(Node{std::move(value), nullptr, nullptr, {}, std::move(bw), op});
    return static_cast<Id>(nodes_.size() - 1);
  }

  const Tensor<T>& value(Id id) const {
    const Node& n = nodes_.at(id);
    return n.external_value ? *n.external_value : n.owned;
  }

  Tensor<T>& grad(Id id) {
    Node& n = nodes_.at(id);
    if (n.grad_sink) return *n.grad_sink;
    if (n.grad.numel() == 0) n.grad = Tensor<T>::zeros(value(id).shape);
    return n.grad;
  }

  const char* op_name(Id id) const { return nodes_.at(id).op; }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(root) = 1 and replays every recorded op in reverse execution
  // order. root must be a scalar. Parameter sinks are accumulated into, so
  // running several tapes sums their gradients.
  void backward(Id root) {
    if (ran_backward_) throw NumericalError("tape: backward() ran twice");
    ran_backward_ = true;
    if (value(root).numel() != 1)
      throw DimensionError("tape: backward root must be scalar, got " + value(root).shape_str());
    grad(root).data[0] += T(1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (nodes_[i].backward) nodes_[i].backward(*this);
    }
  }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external_value = nullptr;
    Tensor<T>* grad_sink = nullptr;
    Tensor<T> grad;
    std::function<void(Tape&)> backward;
    const char* op = "leaf";
  };
  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

namespace ops {

namespace detail {

template <typename T>
inline void acc(T* dst, const T* src, std::size_t n) {
  kernels::active<T>().axpy(T(1), src, dst, n);
}

// dst += a ⊙ b
template <typename T>
inline void acc_mul(T* dst, const T* a, const T* b, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dst[i] += a[i] * b[i];
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

}  // namespace detail

// ---------------------------------------------------------------- matmul ---

// c = a·b with a:[m x k], b:[k x n]. Backward: dA = dC·Bᵀ, dB = Aᵀ·dC.
template <typename T>
typename Tape<T>::Id matmul(Tape<T>& t, typename Tape<T>::Id a, typename Tape<T>::Id b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  detail::require(av.ndim() == 2 && bv.ndim() == 2 && av.cols() == bv.rows(),
                  "matmul: dimension mismatch " + av.shape_str() + " * " + bv.shape_str());
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor<T> c = Tensor<T>::zeros({m, n});
  kernels::active<T>().gemm_nn(m, n, k, av.ptr(), bv.ptr(), c.ptr(), false);
  const auto self = t.next_id();
  return t.push(std::move(c),
                [self, a, b, m, k, n](Tape<T>& tp) {
                  const Tensor<T>& dc = tp.grad(self);
                  kernels::active<T>().gemm_nt(m, k, n, dc.ptr(), tp.value(b).ptr(), tp.grad(a).ptr(), true);
                  kernels::active<T>().gemm_tn(k, n, m, tp.value(a).ptr(), dc.ptr(), tp.grad(b).ptr(), true);
                },
                "matmul");
}

// c = a·bᵀ with a:[m x k], b:[n x k]. Backward: dA = dC·B, dB = dCᵀ·A.
template <typename T>
typename Tape<T>::Id matmul_nt(Tape<T>& t, typename Tape<T>::Id a, typename Tape<T>::Id b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  detail::require(av.ndim() == 2 && bv.ndim() == 2 && av.cols() == bv.cols(),
                  "matmul_nt: dimension mismatch " + av.shape_str() + " * " + bv.shape_str() + "^T");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  Tensor<T> c = Tensor<T>::zeros({m, n});
  kernels::active<T>().gemm_nt(m, n, k, av.ptr(), bv.ptr(), c.ptr(), false);
  const auto self = t.next_id();
  return t.push(std::move(c),
                [self, a, b, m, k, n](Tape<T>& tp) {
                  const Tensor<T>& dc = tp.grad(self);
                  kernels::active<T>().gemm_nn(m, k, n, dc.ptr(), tp.value(b).ptr(), tp.grad(a).ptr(), true);
                  kernels::active<T>().gemm_tn(n, k, m, dc.ptr(), tp.value(a).ptr(), tp.grad(b).ptr(), true);
                },
                "matmul_nt");
}

// c = aᵀ·b with a:[k x m], b:[k x n]. Backward: dA = B·dCᵀ, dB = A·dC.
template <typename T>
typename Tape<T>::Id matmul_tn(Tape<T>& t, typename Tape<T>::Id a, typename Tape<T>::Id b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  detail::require(av.ndim() == 2 && bv.ndim() == 2 && av.rows() == bv.rows(),
                  "matmul_tn: dimension mismatch " + av.shape_str() + "^T * " + bv.shape_str());
  const std::size_t m = av.cols(), k = av.rows(), n = bv.cols();
  Tensor<T> c = Tensor<T>::zeros({m, n});
  kernels::active<T>().gemm_tn(m, n, k, av.ptr(), bv.ptr(), c.ptr(), false);
  const auto self = t.next_id();
  return t.push(std::move(c),
                [self, a, b, m, k, n](Tape<T>& tp) {
                  const Tensor<T>& dc = tp.grad(self);
                  kernels::active<T>().gemm_nt(k, m, n, tp.value(b).ptr(), dc.ptr(), tp.grad(a).ptr(), true);
                  kernels::active<T>().gemm_nn(k, n, m, tp.value(a).ptr(), dc.ptr(), tp.grad(b).ptr(), true);
                },
                "matmul_tn");
}

// ----------------------------------------------------------- elementwise ---

template <typename T>
typename Tape<T>::Id add(Tape<T>& t, typename Tape<T>::Id a, typename Tape<T>::Id b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  detail::require(av.same_shape(bv), "add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  Tensor<T> c = Tensor<T>::zeros(av.shape);
  kernels::active<T>().add(av.ptr(), bv.ptr(), c.ptr(), av.numel());
  const auto self = t.next_id();
  return t.push(std::move(c),
                [self, a, b](Tape<T>& tp) {
                  const Tensor<T>& dc = tp.grad(self);
                  detail::acc(tp.grad(a).ptr(), dc.ptr(), dc.numel());
                  detail::acc(tp.grad(b).ptr(), dc.ptr(), dc.numel());
                },
                "add");
}

template <typename T>
typename Tape<T>::Id mul(Tape<T>& t, typename Tape<T>::Id a, typename Tape<T>::Id b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  detail::require(av.same_shape(bv), "mul: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  Tensor<T> c = Tensor<T>::zeros(av.shape);
  kernels::active<T>().mul(av.ptr(), bv.ptr(), c.ptr(), av.numel());
  const auto self = t.next_id();
  return t.push(std::move(c),
                [self, a, b](Tape<T>& tp) {
                  const Tensor<T>& dc = tp.grad(self);
                  detail::acc_mul(tp.grad(a).ptr(), dc.ptr(), tp.value(b).ptr(), dc.numel());
                  detail::acc_mul(tp.grad(b).ptr(), dc.ptr(), tp.value(a).ptr(), dc.numel());
                },
                "mul");
}

// x:[m x n] + v:[n] broadcast over rows (bias add).
template <typename T>
typename Tape<T>::Id add_rowvec(Tape<T>& t, typename Tape<T>::Id x, typename Tape<T>::Id v) {
  const auto& xv = t.value(x);
  const auto& vv = t.value(v);
  detail::require(xv.ndim() == 2 && vv.numel() == xv.cols(),
                  "add_rowvec: shape mismatch " + xv.shape_str() + " vs " + vv.shape_str());
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor<T> c = Tensor<T>::zeros(xv.shape);
  for (std::size_t i = 0; i < m; ++i)
    kernels::active<T>().add(xv.ptr() + i * n, vv.ptr(), c.ptr() + i * n, n);
  const auto self = t.next_id();
  return t.push(std::move(c),
                [self, x, v, m, n](Tape<T>& tp) {
                  const Tensor<T>& dc = tp.grad(self);
                  detail::acc(tp.grad(x).ptr(), dc.ptr(), dc.numel());
                  T* dv = tp.grad(v).ptr();
                  for (std::size_t i = 0; i < m; ++i) detail::acc(dv, dc.ptr() + i * n, n);
                },
                "add_rowvec");
}

template <typename T>
typename Tape<T>::Id scale(Tape<T>& t, typename Tape<T>::Id x, T alpha) {
  const auto& xv = t.value(x);
  Tensor<T> c = Tensor<T>::zeros(xv.shape);
  kernels::active<T>().scale(xv.ptr(), alpha, c.ptr(), xv.numel());
  const auto self = t.next_id();
  return t.push(std::move(c),
                [self, x, alpha](Tape<T>& tp) {
                  const Tensor<T>& dc = tp.grad(self);
                  kernels::active<T>().axpy(alpha, dc.ptr(), tp.grad(x).ptr(), dc.numel());
                },
                "scale");
}

template <typename T>
typename Tape<T>::Id tanh_op(Tape<T>& t, typename Tape<T>::Id x) {
  const auto& xv = t.value(x);
  Tensor<T> c = Tensor<T>::zeros(xv.shape);
  for (std::size_t i = 0; i < xv.numel(); ++i) c.data[i] = std::tanh(xv.data[i]);
  const auto self = t.next_id();
  return t.push(std::move(c),
                [self, x](Tape<T>& tp) {
                  const Tensor<T>& dc = tp.grad(self);
                  const Tensor<T>& y = tp.value(self);
                  T* dx = tp.grad(x).ptr();
                  for (std::size_t i = 0; i < dc.numel(); ++i)
                    dx[i] += dc.data[i] * (T(1) - y.data[i] * y.data[i]);
                },
                "tanh");
}

template <typename T>
typename Tape<T>::Id sigmoid_op(Tape<T>& t, typename Tape<T>::Id x) {
  const auto& xv = t.value(x);
  Tensor<T> c = Tensor<T>::zeros(xv.shape);
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    const T v = xv.data[i];
    if (v >= T(0)) {
      c.data[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      c.data[i] = e / (T(1) + e);
    }
  }
  const auto self = t.next_id();
  return t.push(std::move(c),
                [self, x](Tape<T>& tp) {
                  const Tensor<T>& dc = tp.grad(self);
                  const Tensor<T>& y = tp.value(self);
                  T* dx = tp.grad(x).ptr();
                  for (std::size_t i = 0; i < dc.numel(); ++i)
                    dx[i] += dc.data[i] * y.data[i] * (T(1) - y.data[i]);
                },
                "sigmoid");
}

template <typename T>
typename Tape<T>::Id relu_op(Tape<T>& t, typename Tape<T>::Id x) {
  const auto& xv = t.value(x);
  Tensor<T> c = Tensor<T>::zeros(xv.shape);
  kernels::active<T>().relu(xv.ptr(), c.ptr(), xv.numel());
  const auto self = t.next_id();
  return t.push(std::move(c),
                [self, x](Tape<T>& tp) {
                  const Tensor<T>& dc = tp.grad(self);
                  const Tensor<T>& xin = tp.value(x);
                  T* dx = tp.grad(x).ptr();
                  for (std::size_t i = 0; i < dc.numel(); ++i)
                    if (xin.data[i] > T(0)) dx[i] += dc.data[i];
                },
                "relu");
}

// ---------------------------------------------------------- normalizers ----

// Row-wise softmax with max-shift; each output row sums to 1.
// Backward per row: dx = y ⊙ (dC − <dC, y>).
template <typename T>
typename Tape<T>::Id softmax_rows(Tape<T>& t, typename Tape<T>::Id x) {
  const auto& xv = t.value(x);
  detail::require(xv.ndim() == 2, "softmax_rows: expected matrix, got " + xv.shape_str());
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor<T> c = Tensor<T>::zeros(xv.shape);
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = xv.ptr() + i * n;
    T* out = c.ptr() + i * n;
    const T mx = kernels::active<T>().vmax(row, n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[j] = std::exp(row[j] - mx);
      s += static_cast<double>(out[j]);
    }
    const T inv = static_cast<T>(1.0 / s);
    kernels::active<T>().scale(out, inv, out, n);
  }
  const auto self = t.next_id();
  return t.push(std::move(c),
                [self, x, m, n](Tape<T>& tp) {
                  const Tensor<T>& dc = tp.grad(self);
                  const Tensor<T>& y = tp.value(self);
                  T* dx = tp.grad(x).ptr();
                  for (std::size_t i = 0; i < m; ++i) {
                    const T* yi = y.ptr() + i * n;
                    const T* di = dc.ptr() + i * n;
                    const T inner = kernels::active<T>().dot(di, yi, n);
                    for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += yi[j] * (di[j] - inner);
                  }
                },
                "softmax_rows");
}

// Per-row standardization with epsilon inside the square root, then the
// affine map gain ⊙ x̂ + bias.
template <typename T>
typename Tape<T>::Id layer_norm(Tape<T>& t, typename Tape<T>::Id x, typename Tape<T>::Id gain,
                                typename Tape<T>::Id bias) {
  constexpr double kEps = 1e-5;
  const auto& xv = t.value(x);
  const auto& gv = t.value(gain);
  const auto& bv = t.value(bias);
  detail::require(xv.ndim() == 2 && xv.cols() >= 2, "layer_norm: need matrix with >= 2 columns, got " + xv.shape_str());
  detail::require(gv.numel() == xv.cols() && bv.numel() == xv.cols(),
                  "layer_norm: gain/bias size mismatch with " + xv.shape_str());
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor<T> xhat = Tensor<T>::zeros(xv.shape);
  Tensor<T> inv_std({m}, std::vector<T>(m, T(0)));
  Tensor<T> c = Tensor<T>::zeros(xv.shape);
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = xv.ptr() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += static_cast<double>(row[j]);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = static_cast<double>(row[j]) - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const T is = static_cast<T>(1.0 / std::sqrt(var + kEps));
    inv_std.data[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const T xh = static_cast<T>((static_cast<double>(row[j]) - mean)) * is;
      xhat.ptr()[i * n + j] = xh;
      c.ptr()[i * n + j] = gv.data[j] * xh + bv.data[j];
    }
  }
  const auto self = t.next_id();
  return t.push(std::move(c),
                [self, x, gain, bias, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& tp) {
                  const Tensor<T>& dc = tp.grad(self);
                  const Tensor<T>& gv = tp.value(gain);
                  T* dx = tp.grad(x).ptr();
                  T* dg = tp.grad(gain).ptr();
                  T* db = tp.grad(bias).ptr();
                  for (std::size_t i = 0; i < m; ++i) {
                    const T* di = dc.ptr() + i * n;
                    const T* xh = xhat.ptr() + i * n;
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                      dg[j] += di[j] * xh[j];
                      db[j] += di[j];
                      const double g = static_cast<double>(di[j]) * static_cast<double>(gv.data[j]);
                      sum_g += g;
                      sum_gx += g * static_cast<double>(xh[j]);
                    }
                    const double mean_g = sum_g / static_cast<double>(n);
                    const double mean_gx = sum_gx / static_cast<double>(n);
                    const double is = static_cast<double>(inv_std.data[i]);
                    for (std::size_t j = 0; j < n; ++j) {
                      const double g = static_cast<double>(di[j]) * static_cast<double>(gv.data[j]);
                      dx[i * n + j] += static_cast<T>(is * (g - mean_g - static_cast<double>(xh[j]) * mean_gx));
                    }
                  }
                },
                "layer_norm");
}

// -------------------------------------------------------------- reshapes ---

template <typename T>
typename Tape<T>::Id transpose(Tape<T>& t, typename Tape<T>::Id x) {
  const auto& xv = t.value(x);
  detail::require(xv.ndim() == 2, "transpose: expected matrix, got " + xv.shape_str());
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor<T> c = Tensor<T>::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) c.ptr()[j * m + i] = xv.ptr()[i * n + j];
  const auto self = t.next_id();
  return t.push(std::move(c),
                [self, x, m, n](Tape<T>& tp) {
                  const Tensor<T>& dc = tp.grad(self);
                  T* dx = tp.grad(x).ptr();
                  for (std::size_t j = 0; j < n; ++j)
                    for (std::size_t i = 0; i < m; ++i) dx[i * n + j] += dc.ptr()[j * m + i];
                },
                "transpose");
}

template <typename T>
typename Tape<T>::Id reshape(Tape<T>& t, typename Tape<T>::Id x, std::vector<std::size_t> shape) {
  const auto& xv = t.value(x);
  detail::require(Tensor<T>::numel_of(shape) == xv.numel(),
                  "reshape: element count mismatch for " + xv.shape_str());
  Tensor<T> c(shape, xv.data);
  const auto self = t.next_id();
  return t.push(std::move(c),
                [self, x](Tape<T>& tp) {
                  const Tensor<T>& dc = tp.grad(self);
                  detail::acc(tp.grad(x).ptr(), dc.ptr(), dc.numel());
                },
                "reshape");
}

template <typename T>
typename Tape<T>::Id concat_rows(Tape<T>& t, typename Tape<T>::Id a, typename Tape<T>::Id b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  detail::require(av.ndim() == 2 && bv.ndim() == 2 && av.cols() == bv.cols(),
                  "concat_rows: column mismatch " + av.shape_str() + " vs " + bv.shape_str());
  const std::size_t ma = av.rows(), mb = bv.rows(), n = av.cols();
  Tensor<T> c = Tensor<T>::zeros({ma + mb, n});
  std::memcpy(c.ptr(), av.ptr(), ma * n * sizeof(T));
  std::memcpy(c.ptr() + ma * n, bv.ptr(), mb * n * sizeof(T));
  const auto self = t.next_id();
  return t.push(std::move(c),
                [self, a, b, ma, mb, n](Tape<T>& tp) {
                  const Tensor<T>& dc = tp.grad(self);
                  detail::acc(tp.grad(a).ptr(), dc.ptr(), ma * n);
                  detail::acc(tp.grad(b).ptr(), dc.ptr() + ma * n, mb * n);
                },
                "concat_rows");
}

template <typename T>
typename Tape<T>::Id concat_cols(Tape<T>& t, const std::vector<typename Tape<T>::Id>& parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t m = t.value(parts[0]).rows();
  std::size_t n = 0;
  for (auto id : parts) {
    detail::require(t.value(id).ndim() == 2 && t.value(id).rows() == m,
                    "concat_cols: row mismatch at " + t.value(id).shape_str());
    n += t.value(id).cols();
  }
  Tensor<T> c = Tensor<T>::zeros({m, n});
  std::size_t off = 0;
  for (auto id : parts) {
    const auto& v = t.value(id);
    const std::size_t w = v.cols();
    for (std::size_t i = 0; i < m; ++i)
      std::memcpy(c.ptr() + i * n + off, v.ptr() + i * w, w * sizeof(T));
    off += w;
  }
  const auto self = t.next_id();
  return t.push(std::move(c),
                [self, parts, m, n](Tape<T>& tp) {
                  const Tensor<T>& dc = tp.grad(self);
                  std::size_t off = 0;
                  for (auto id : parts) {
                    Tensor<T>& g = tp.grad(id);
                    const std::size_t w = tp.value(id).cols();
                    for (std::size_t i = 0; i < m; ++i)
                      detail::acc(g.ptr() + i * w, dc.ptr() + i * n + off, w);
                    off += w;
                  }
                },
                "concat_cols");
}

template <typename T>
typename Tape<T>::Id slice_cols(Tape<T>& t, typename Tape<T>::Id x, std::size_t c0, std::size_t c1) {
  const auto& xv = t.value(x);
  detail::require(xv.ndim() == 2 && c0 < c1 && c1 <= xv.cols(),
                  "slice_cols: bad range on " + xv.shape_str());
  const std::size_t m = xv.rows(), n = xv.cols(), w = c1 - c0;
  Tensor<T> c = Tensor<T>::zeros({m, w});
  for (std::size_t i = 0; i < m; ++i)
    std::memcpy(c.ptr() + i * w, xv.ptr() + i * n + c0, w * sizeof(T));
  const auto self = t.next_id();
  return t.push(std::move(c),
                [self, x, c0, m, n, w](Tape<T>& tp) {
                  const Tensor<T>& dc = tp.grad(self);
                  T* dx = tp.grad(x).ptr();
                  for (std::size_t i = 0; i < m; ++i)
                    detail::acc(dx + i * n + c0, dc.ptr() + i * w, w);
                },
                "slice_cols");
}

template <typename T>
typename Tape<T>::Id take_row(Tape<T>& t, typename Tape<T>::Id x, std::size_t r) {
  const auto& xv = t.value(x);
  detail::require(xv.ndim() == 2 && r < xv.rows(), "take_row: row out of range on " + xv.shape_str());
  const std::size_t n = xv.cols();
  Tensor<T> c({1, n}, std::vector<T>(xv.ptr() + r * n, xv.ptr() + (r + 1) * n));
  const auto self = t.next_id();
  return t.push(std::move(c),
                [self, x, r, n](Tape<T>& tp) {
                  const Tensor<T>& dc = tp.grad(self);
                  detail::acc(tp.grad(x).ptr() + r * n, dc.ptr(), n);
                },
                "take_row");
}

// Row gather (CFSD instance selection).
template <typename T>
typename Tape<T>::Id take_rows(Tape<T>& t, typename Tape<T>::Id x, std::vector<std::size_t> idx) {
  const auto& xv = t.value(x);
  detail::require(xv.ndim() == 2, "take_rows: expected matrix, got " + xv.shape_str());
  const std::size_t n = xv.cols();
  Tensor<T> c = Tensor<T>::zeros({idx.size(), n});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    detail::require(idx[i] < xv.rows(), "take_rows: index out of range on " + xv.shape_str());
    std::memcpy(c.ptr() + i * n, xv.ptr() + idx[i] * n, n * sizeof(T));
  }
  const auto self = t.next_id();
  return t.push(std::move(c),
                [self, x, n, idx = std::move(idx)](Tape<T>& tp) {
                  const Tensor<T>& dc = tp.grad(self);
                  T* dx = tp.grad(x).ptr();
                  for (std::size_t i = 0; i < idx.size(); ++i)
                    detail::acc(dx + idx[i] * n, dc.ptr() + i * n, n);
                },
                "take_rows");
}

// ------------------------------------------------------------ reductions ---

// Column means: [m x n] -> [1 x n].
template <typename T>
typename Tape<T>::Id mean_rows(Tape<T>& t, typename Tape<T>::Id x) {
  const auto& xv = t.value(x);
  detail::require(xv.ndim() == 2, "mean_rows: expected matrix, got " + xv.shape_str());
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor<T> c = Tensor<T>::zeros({1, n});
  for (std::size_t i = 0; i < m; ++i) detail::acc(c.ptr(), xv.ptr() + i * n, n);
  kernels::active<T>().scale(c.ptr(), T(1) / static_cast<T>(m), c.ptr(), n);
  const auto self = t.next_id();
  return t.push(std::move(c),
                [self, x, m, n](Tape<T>& tp) {
                  const Tensor<T>& dc = tp.grad(self);
                  T* dx = tp.grad(x).ptr();
                  const T inv = T(1) / static_cast<T>(m);
                  for (std::size_t i = 0; i < m; ++i)
                    kernels::active<T>().axpy(inv, dc.ptr(), dx + i * n, n);
                },
                "mean_rows");
}

// Column-wise max: [m x n] -> [1 x n]; gradient routes to the first maximal
// row of each column.
template <typename T>
typename Tape<T>::Id max_rows(Tape<T>& t, typename Tape<T>::Id x) {
  const auto& xv = t.value(x);
  detail::require(xv.ndim() == 2, "max_rows: expected matrix, got " + xv.shape_str());
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor<T> c({1, n}, std::vector<T>(xv.ptr(), xv.ptr() + n));
  std::vector<std::size_t> arg(n, 0);
  for (std::size_t i = 1; i < m; ++i) {
    const T* row = xv.ptr() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      if (row[j] > c.data[j]) {
        c.data[j] = row[j];
        arg[j] = i;
      }
    }
  }
  const auto self = t.next_id();
  return t.push(std::move(c),
                [self, x, n, arg = std::move(arg)](Tape<T>& tp) {
                  const Tensor<T>& dc = tp.grad(self);
                  T* dx = tp.grad(x).ptr();
                  for (std::size_t j = 0; j < n; ++j) dx[arg[j] * n + j] += dc.data[j];
                },
                "max_rows");
}

// Row sums: [m x n] -> [m].
template <typename T>
typename Tape<T>::Id sum_rows(Tape<T>& t, typename Tape<T>::Id x) {
  const auto& xv = t.value(x);
  detail::require(xv.ndim() == 2, "sum_rows: expected matrix, got " + xv.shape_str());
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor<T> c = Tensor<T>::zeros({m});
  for (std::size_t i = 0; i < m; ++i) c.data[i] = kernels::active<T>().sum(xv.ptr() + i * n, n);
  const auto self = t.next_id();
  return t.push(std::move(c),
                [self, x, m, n](Tape<T>& tp) {
                  const Tensor<T>& dc = tp.grad(self);
                  T* dx = tp.grad(x).ptr();
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += dc.data[i];
                },
                "sum_rows");
}

// ----------------------------------------------------------------- losses --

// Cross-entropy of a single logit vector against a class index, computed via
// the max-shifted log-sum-exp. Backward: softmax(l) − onehot(target).
template <typename T>
typename Tape<T>::Id cross_entropy_logits(Tape<T>& t, typename Tape<T>::Id logits, std::size_t target) {
  const auto& lv = t.value(logits);
  detail::require(target < lv.numel(), "cross_entropy_logits: target class out of range");
  const std::size_t n = lv.numel();
  const T mx = kernels::active<T>().vmax(lv.ptr(), n);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += std::exp(static_cast<double>(lv.data[j] - mx));
  const double loss = std::log(s) + static_cast<double>(mx) - static_cast<double>(lv.data[target]);
  const auto self = t.next_id();
  return t.push(Tensor<T>::scalar(static_cast<T>(loss)),
                [self, logits, target, n, mx, s](Tape<T>& tp) {
                  const T g = tp.grad(self).data[0];
                  const Tensor<T>& lv = tp.value(logits);
                  T* dl = tp.grad(logits).ptr();
                  for (std::size_t j = 0; j < n; ++j) {
                    const T p = static_cast<T>(std::exp(static_cast<double>(lv.data[j] - mx)) / s);
                    dl[j] += g * (p - (j == target ? T(1) : T(0)));
                  }
                },
                "cross_entropy_logits");
}

// Mean binary cross-entropy of probabilities against one-hot targets, with
// probabilities clamped to [1e-7, 1 - 1e-7]. Gradient is zero at clamped
// entries (the clamp is part of the forward function).
template <typename T>
typename Tape<T>::Id bce_with_onehot(Tape<T>& t, typename Tape<T>::Id probs,
                                     std::vector<std::size_t> targets) {
  const auto& pv = t.value(probs);
  detail::require(pv.ndim() == 2 && pv.rows() == targets.size(),
                  "bce_with_onehot: probs " + pv.shape_str() + " vs " + std::to_string(targets.size()) + " targets");
  const std::size_t m = pv.rows(), n = pv.cols();
  constexpr double kClamp = 1e-7;
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    detail::require(targets[i] < n, "bce_with_onehot: target class out of range");
    for (std::size_t j = 0; j < n; ++j) {
      double p = static_cast<double>(pv.ptr()[i * n + j]);
      p = p < kClamp ? kClamp : (p > 1.0 - kClamp ? 1.0 - kClamp : p);
      loss -= (targets[i] == j) ? std::log(p) : std::log(1.0 - p);
    }
  }
  loss /= static_cast<double>(m * n);
  const auto self = t.next_id();
  return t.push(Tensor<T>::scalar(static_cast<T>(loss)),
                [self, probs, m, n, targets = std::move(targets)](Tape<T>& tp) {
                  const double g = static_cast<double>(tp.grad(self).data[0]) / static_cast<double>(m * n);
                  const Tensor<T>& pv = tp.value(probs);
                  T* dp = tp.grad(probs).ptr();
                  for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                      const double p = static_cast<double>(pv.ptr()[i * n + j]);
                      if (p <= kClamp || p >= 1.0 - kClamp) continue;
                      const double tgt = targets[i] == j ? 1.0 : 0.0;
                      dp[i * n + j] += static_cast<T>(g * (-tgt / p + (1.0 - tgt) / (1.0 - p)));
                    }
                  }
                },
                "bce_with_onehot");
}

// ------------------------------------------------------------ composites ---

// y = x·Wᵀ (+ b): the affine map with W stored [out x in].
template <typename T>
typename Tape<T>::Id linear(Tape<T>& t, typename Tape<T>::Id x, typename Tape<T>::Id w) {
  return matmul_nt(t, x, w);
}

template <typename T>
typename Tape<T>::Id linear(Tape<T>& t, typename Tape<T>::Id x, typename Tape<T>::Id w,
                            typename Tape<T>::Id b) {
  return add_rowvec(t, matmul_nt(t, x, w), b);
}

// Column-wise softmax (softmax over instances for each attention branch).
template <typename T>
typename Tape<T>::Id softmax_cols(Tape<T>& t, typename Tape<T>::Id x) {
  return transpose(t, softmax_rows(t, transpose(t, x)));
}

}  // namespace ops
}  // namespace milforge
