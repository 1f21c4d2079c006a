#include "milforge/kernels.hpp"

#include <cmath>
#include <cstring>

// Reference kernels. Plain loops, no tricks: these define the semantics the
// SIMD variants are tested against.
namespace milforge::kernels {
namespace scalar {

template <typename T>
void add(const T* a, const T* b, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <typename T>
void sub(const T* a, const T* b, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

template <typename T>
void mul(const T* a, const T* b, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void scale(const T* x, T alpha, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * alpha;
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
T sum(const T* x, std::size_t n) {
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

template <typename T>
T vmax(const T* x, std::size_t n) {
  T best = x[0];
  for (std::size_t i = 1; i < n; ++i)
    if (x[i] > best) best = x[i];
  return best;
}

template <typename T>
void relu(const T* x, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
}

template <typename T>
bool all_finite(const T* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(x[i])) return false;
  return true;
}

template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool acc) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    if (!acc) std::memset(ci, 0, n * sizeof(T));
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool acc) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    T* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T d = dot(ai, b + j * k, k);
      ci[j] = acc ? ci[j] + d : d;
    }
  }
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool acc) {
  if (!acc) std::memset(c, 0, m * n * sizeof(T));
  for (std::size_t p = 0; p < k; ++p) {
    const T* ap = a + p * m;
    const T* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = ap[i];
      T* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <typename T>
Backend<T> make_backend() {
  Backend<T> be;
  be.add = &add<T>;
  be.sub = &sub<T>;
  be.mul = &mul<T>;
  be.axpy = &axpy<T>;
  be.scale = &scale<T>;
  be.dot = &dot<T>;
  be.sum = &sum<T>;
  be.vmax = &vmax<T>;
  be.relu = &relu<T>;
  be.all_finite = &all_finite<T>;
  be.gemm_nn = &gemm_nn<T>;
  be.gemm_nt = &gemm_nt<T>;
  be.gemm_tn = &gemm_tn<T>;
  return be;
}

}  // namespace scalar

template <>
const Backend<float>& scalar_backend<float>() {
  static const Backend<float> be = scalar::make_backend<float>();
  return be;
}

template <>
const Backend<double>& scalar_backend<double>() {
  static const Backend<double> be = scalar::make_backend<double>();
  return be;
}

}  // namespace milforge::kernels
