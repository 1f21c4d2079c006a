#include "milforge/kernels.hpp"

// AVX2+FMA kernels. This translation unit is the only one compiled with
// -mavx2 -mfma; everything here is reached only after the runtime CPU check
// in active_isa(). Reductions and gemm tile differently from the scalar
// reference, so results may differ in the last ulps; the equivalence tests
// pin the allowed divergence.

#if defined(__AVX2__) && defined(__FMA__)

#include <immintrin.h>

#include <cmath>
#include <cstdint>
#include <cstring>

namespace milforge::kernels {
namespace avx2 {

// ---------------------------------------------------------------- float ----

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 1));
  return _mm_cvtss_f32(lo);
}

inline float hmax(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_max_ps(lo, hi);
  lo = _mm_max_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_max_ss(lo, _mm_shuffle_ps(lo, lo, 1));
  return _mm_cvtss_f32(lo);
}

void add_f32(const float* a, const float* b, float* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_f32(const float* a, const float* b, float* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_f32(const float* a, const float* b, float* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void axpy_f32(float alpha, const float* x, float* y, std::size_t n) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_f32(const float* x, float alpha, float* out, std::size_t n) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_mul_ps(va, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) out[i] = x[i] * alpha;
}

float dot_f32(const float* a, const float* b, std::size_t n) {
  __m256 acc0 = _mm256_setzero_ps(), acc1 = _mm256_setzero_ps();
  __m256 acc2 = _mm256_setzero_ps(), acc3 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 32 <= n; i += 32) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), acc1);
    acc2 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 16), _mm256_loadu_ps(b + i + 16), acc2);
    acc3 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 24), _mm256_loadu_ps(b + i + 24), acc3);
  }
  for (; i + 8 <= n; i += 8)
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
  float tail = 0.0f;
  for (; i < n; ++i) tail += a[i] * b[i];
  acc0 = _mm256_add_ps(_mm256_add_ps(acc0, acc1), _mm256_add_ps(acc2, acc3));
  return hsum(acc0) + tail;
}

float sum_f32(const float* x, std::size_t n) {
  __m256 acc0 = _mm256_setzero_ps(), acc1 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_add_ps(acc0, _mm256_loadu_ps(x + i));
    acc1 = _mm256_add_ps(acc1, _mm256_loadu_ps(x + i + 8));
  }
  for (; i + 8 <= n; i += 8) acc0 = _mm256_add_ps(acc0, _mm256_loadu_ps(x + i));
  float tail = 0.0f;
  for (; i < n; ++i) tail += x[i];
  return hsum(_mm256_add_ps(acc0, acc1)) + tail;
}

float vmax_f32(const float* x, std::size_t n) {
  if (n < 8) {
    float best = x[0];
    for (std::size_t i = 1; i < n; ++i)
      if (x[i] > best) best = x[i];
    return best;
  }
  __m256 acc = _mm256_loadu_ps(x);
  std::size_t i = 8;
  for (; i + 8 <= n; i += 8) acc = _mm256_max_ps(acc, _mm256_loadu_ps(x + i));
  float best = hmax(acc);
  for (; i < n; ++i)
    if (x[i] > best) best = x[i];
  return best;
}

void relu_f32(const float* x, float* out, std::size_t n) {
  const __m256 z = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(out + i, _mm256_max_ps(z, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

bool all_finite_f32(const float* x, std::size_t n) {
  // Finite iff the exponent field is not all ones.
  const __m256i expmask = _mm256_set1_epi32(0x7f800000);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256i bits = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(x + i));
    const __m256i exp = _mm256_and_si256(bits, expmask);
    if (_mm256_movemask_epi8(_mm256_cmpeq_epi32(exp, expmask)) != 0) return false;
  }
  for (; i < n; ++i)
    if (!std::isfinite(x[i])) return false;
  return true;
}

// gemm_nn, 6-row x 16-col register tile. Column tiles are the outer loop so
// a k x 16 slab of B stays cache-resident across row tiles. Each output row
// accumulates over p = 0..k-1 in order, from its own A row only.
void gemm_nn_f32(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c, bool acc) {
  for (std::size_t j0 = 0; j0 < n; j0 += 16) {
    const std::size_t jw = n - j0 < 16 ? n - j0 : 16;
    std::size_t i0 = 0;
    if (jw == 16) {
      for (; i0 + 6 <= m; i0 += 6) {
        __m256 c00, c01, c10, c11, c20, c21, c30, c31, c40, c41, c50, c51;
        if (acc) {
          c00 = _mm256_loadu_ps(c + (i0 + 0) * n + j0); c01 = _mm256_loadu_ps(c + (i0 + 0) * n + j0 + 8);
          c10 = _mm256_loadu_ps(c + (i0 + 1) * n + j0); c11 = _mm256_loadu_ps(c + (i0 + 1) * n + j0 + 8);
          c20 = _mm256_loadu_ps(c + (i0 + 2) * n + j0); c21 = _mm256_loadu_ps(c + (i0 + 2) * n + j0 + 8);
          c30 = _mm256_loadu_ps(c + (i0 + 3) * n + j0); c31 = _mm256_loadu_ps(c + (i0 + 3) * n + j0 + 8);
          c40 = _mm256_loadu_ps(c + (i0 + 4) * n + j0); c41 = _mm256_loadu_ps(c + (i0 + 4) * n + j0 + 8);
          c50 = _mm256_loadu_ps(c + (i0 + 5) * n + j0); c51 = _mm256_loadu_ps(c + (i0 + 5) * n + j0 + 8);
        } else {
          c00 = c01 = c10 = c11 = c20 = c21 = c30 = c31 = c40 = c41 = c50 = c51 = _mm256_setzero_ps();
        }
        for (std::size_t p = 0; p < k; ++p) {
          const __m256 b0 = _mm256_loadu_ps(b + p * n + j0);
          const __m256 b1 = _mm256_loadu_ps(b + p * n + j0 + 8);
          __m256 av;
          av = _mm256_set1_ps(a[(i0 + 0) * k + p]); c00 = _mm256_fmadd_ps(av, b0, c00); c01 = _mm256_fmadd_ps(av, b1, c01);
          av = _mm256_set1_ps(a[(i0 + 1) * k + p]); c10 = _mm256_fmadd_ps(av, b0, c10); c11 = _mm256_fmadd_ps(av, b1, c11);
          av = _mm256_set1_ps(a[(i0 + 2) * k + p]); c20 = _mm256_fmadd_ps(av, b0, c20); c21 = _mm256_fmadd_ps(av, b1, c21);
          av = _mm256_set1_ps(a[(i0 + 3) * k + p]); c30 = _mm256_fmadd_ps(av, b0, c30); c31 = _mm256_fmadd_ps(av, b1, c31);
          av = _mm256_set1_ps(a[(i0 + 4) * k + p]); c40 = _mm256_fmadd_ps(av, b0, c40); c41 = _mm256_fmadd_ps(av, b1, c41);
          av = _mm256_set1_ps(a[(i0 + 5) * k + p]); c50 = _mm256_fmadd_ps(av, b0, c50); c51 = _mm256_fmadd_ps(av, b1, c51);
        }
        _mm256_storeu_ps(c + (i0 + 0) * n + j0, c00); _mm256_storeu_ps(c + (i0 + 0) * n + j0 + 8, c01);
        _mm256_storeu_ps(c + (i0 + 1) * n + j0, c10); _mm256_storeu_ps(c + (i0 + 1) * n + j0 + 8, c11);
        _mm256_storeu_ps(c + (i0 + 2) * n + j0, c20); _mm256_storeu_ps(c + (i0 + 2) * n + j0 + 8, c21);
        _mm256_storeu_ps(c + (i0 + 3) * n + j0, c30); _mm256_storeu_ps(c + (i0 + 3) * n + j0 + 8, c31);
        _mm256_storeu_ps(c + (i0 + 4) * n + j0, c40); _mm256_storeu_ps(c + (i0 + 4) * n + j0 + 8, c41);
        _mm256_storeu_ps(c + (i0 + 5) * n + j0, c50); _mm256_storeu_ps(c + (i0 + 5) * n + j0 + 8, c51);
      }
    }
    // Row remainder (and narrow column tiles): one row at a time, still
    // accumulating over p in order.
    for (; i0 < m; ++i0) {
      float tile[16];
      if (acc) {
        std::memcpy(tile, c + i0 * n + j0, jw * sizeof(float));
      } else {
        std::memset(tile, 0, jw * sizeof(float));
      }
      if (jw == 16) {
        __m256 t0 = _mm256_loadu_ps(tile), t1 = _mm256_loadu_ps(tile + 8);
        for (std::size_t p = 0; p < k; ++p) {
          const __m256 av = _mm256_set1_ps(a[i0 * k + p]);
          t0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b + p * n + j0), t0);
          t1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b + p * n + j0 + 8), t1);
        }
        _mm256_storeu_ps(c + i0 * n + j0, t0);
        _mm256_storeu_ps(c + i0 * n + j0 + 8, t1);
      } else {
        for (std::size_t p = 0; p < k; ++p) {
          const float av = a[i0 * k + p];
          const float* bp = b + p * n + j0;
          for (std::size_t j = 0; j < jw; ++j) tile[j] += av * bp[j];
        }
        std::memcpy(c + i0 * n + j0, tile, jw * sizeof(float));
      }
    }
  }
}

// gemm_nt, 2-row x 4-col tile of dot products vectorized over k.
void gemm_nt_f32(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c, bool acc) {
  std::size_t i0 = 0;
  for (; i0 + 2 <= m; i0 += 2) {
    const float* a0 = a + (i0 + 0) * k;
    const float* a1 = a + (i0 + 1) * k;
    std::size_t j0 = 0;
    for (; j0 + 4 <= n; j0 += 4) {
      __m256 acc00 = _mm256_setzero_ps(), acc01 = _mm256_setzero_ps(), acc02 = _mm256_setzero_ps(), acc03 = _mm256_setzero_ps();
      __m256 acc10 = _mm256_setzero_ps(), acc11 = _mm256_setzero_ps(), acc12 = _mm256_setzero_ps(), acc13 = _mm256_setzero_ps();
      const float* b0 = b + (j0 + 0) * k;
      const float* b1 = b + (j0 + 1) * k;
      const float* b2 = b + (j0 + 2) * k;
      const float* b3 = b + (j0 + 3) * k;
      std::size_t p = 0;
      for (; p + 8 <= k; p += 8) {
        const __m256 va0 = _mm256_loadu_ps(a0 + p);
        const __m256 va1 = _mm256_loadu_ps(a1 + p);
        const __m256 vb0 = _mm256_loadu_ps(b0 + p);
        const __m256 vb1 = _mm256_loadu_ps(b1 + p);
        const __m256 vb2 = _mm256_loadu_ps(b2 + p);
        const __m256 vb3 = _mm256_loadu_ps(b3 + p);
        acc00 = _mm256_fmadd_ps(va0, vb0, acc00); acc01 = _mm256_fmadd_ps(va0, vb1, acc01);
        acc02 = _mm256_fmadd_ps(va0, vb2, acc02); acc03 = _mm256_fmadd_ps(va0, vb3, acc03);
        acc10 = _mm256_fmadd_ps(va1, vb0, acc10); acc11 = _mm256_fmadd_ps(va1, vb1, acc11);
        acc12 = _mm256_fmadd_ps(va1, vb2, acc12); acc13 = _mm256_fmadd_ps(va1, vb3, acc13);
      }
      float d00 = hsum(acc00), d01 = hsum(acc01), d02 = hsum(acc02), d03 = hsum(acc03);
      float d10 = hsum(acc10), d11 = hsum(acc11), d12 = hsum(acc12), d13 = hsum(acc13);
      for (; p < k; ++p) {
        d00 += a0[p] * b0[p]; d01 += a0[p] * b1[p]; d02 += a0[p] * b2[p]; d03 += a0[p] * b3[p];
        d10 += a1[p] * b0[p]; d11 += a1[p] * b1[p]; d12 += a1[p] * b2[p]; d13 += a1[p] * b3[p];
      }
      float* c0 = c + (i0 + 0) * n + j0;
      float* c1 = c + (i0 + 1) * n + j0;
      if (acc) {
        c0[0] += d00; c0[1] += d01; c0[2] += d02; c0[3] += d03;
        c1[0] += d10; c1[1] += d11; c1[2] += d12; c1[3] += d13;
      } else {
        c0[0] = d00; c0[1] = d01; c0[2] = d02; c0[3] = d03;
        c1[0] = d10; c1[1] = d11; c1[2] = d12; c1[3] = d13;
      }
    }
    for (; j0 < n; ++j0) {
      const float d0 = dot_f32(a0, b + j0 * k, k);
      const float d1 = dot_f32(a1, b + j0 * k, k);
      if (acc) {
        c[(i0 + 0) * n + j0] += d0;
        c[(i0 + 1) * n + j0] += d1;
      } else {
        c[(i0 + 0) * n + j0] = d0;
        c[(i0 + 1) * n + j0] = d1;
      }
    }
  }
  for (; i0 < m; ++i0) {
    for (std::size_t j = 0; j < n; ++j) {
      const float d = dot_f32(a + i0 * k, b + j * k, k);
      c[i0 * n + j] = acc ? c[i0 * n + j] + d : d;
    }
  }
}

// gemm_tn: c[i,:] += a[p,i] * b[p,:], rank-1 updates vectorized over n.
void gemm_tn_f32(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c, bool acc) {
  if (!acc) std::memset(c, 0, m * n * sizeof(float));
  for (std::size_t p = 0; p < k; ++p) {
    const float* ap = a + p * m;
    const float* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      axpy_f32(ap[i], bp, c + i * n, n);
    }
  }
}

// --------------------------------------------------------------- double ----

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  lo = _mm_add_sd(lo, _mm_unpackhi_pd(lo, lo));
  return _mm_cvtsd_f64(lo);
}

inline double hmax(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_max_pd(lo, hi);
  lo = _mm_max_sd(lo, _mm_unpackhi_pd(lo, lo));
  return _mm_cvtsd_f64(lo);
}

void add_f64(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_f64(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_f64(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void axpy_f64(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_f64(const double* x, double alpha, double* out, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) _mm256_storeu_pd(out + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
  for (; i < n; ++i) out[i] = x[i] * alpha;
}

double dot_f64(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd(), acc1 = _mm256_setzero_pd();
  __m256d acc2 = _mm256_setzero_pd(), acc3 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
    acc2 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 8), _mm256_loadu_pd(b + i + 8), acc2);
    acc3 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 12), _mm256_loadu_pd(b + i + 12), acc3);
  }
  for (; i + 4 <= n; i += 4)
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  double tail = 0.0;
  for (; i < n; ++i) tail += a[i] * b[i];
  acc0 = _mm256_add_pd(_mm256_add_pd(acc0, acc1), _mm256_add_pd(acc2, acc3));
  return hsum(acc0) + tail;
}

double sum_f64(const double* x, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd(), acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(x + i));
    acc1 = _mm256_add_pd(acc1, _mm256_loadu_pd(x + i + 4));
  }
  for (; i + 4 <= n; i += 4) acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(x + i));
  double tail = 0.0;
  for (; i < n; ++i) tail += x[i];
  return hsum(_mm256_add_pd(acc0, acc1)) + tail;
}

double vmax_f64(const double* x, std::size_t n) {
  if (n < 4) {
    double best = x[0];
    for (std::size_t i = 1; i < n; ++i)
      if (x[i] > best) best = x[i];
    return best;
  }
  __m256d acc = _mm256_loadu_pd(x);
  std::size_t i = 4;
  for (; i + 4 <= n; i += 4) acc = _mm256_max_pd(acc, _mm256_loadu_pd(x + i));
  double best = hmax(acc);
  for (; i < n; ++i)
    if (x[i] > best) best = x[i];
  return best;
}

void relu_f64(const double* x, double* out, std::size_t n) {
  const __m256d z = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) _mm256_storeu_pd(out + i, _mm256_max_pd(z, _mm256_loadu_pd(x + i)));
  for (; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
}

bool all_finite_f64(const double* x, std::size_t n) {
  const __m256i expmask = _mm256_set1_epi64x(0x7ff0000000000000LL);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256i bits = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(x + i));
    const __m256i exp = _mm256_and_si256(bits, expmask);
    if (_mm256_movemask_epi8(_mm256_cmpeq_epi64(exp, expmask)) != 0) return false;
  }
  for (; i < n; ++i)
    if (!std::isfinite(x[i])) return false;
  return true;
}

void gemm_nn_f64(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c, bool acc) {
  for (std::size_t j0 = 0; j0 < n; j0 += 8) {
    const std::size_t jw = n - j0 < 8 ? n - j0 : 8;
    std::size_t i0 = 0;
    if (jw == 8) {
      for (; i0 + 4 <= m; i0 += 4) {
        __m256d c00, c01, c10, c11, c20, c21, c30, c31;
        if (acc) {
          c00 = _mm256_loadu_pd(c + (i0 + 0) * n + j0); c01 = _mm256_loadu_pd(c + (i0 + 0) * n + j0 + 4);
          c10 = _mm256_loadu_pd(c + (i0 + 1) * n + j0); c11 = _mm256_loadu_pd(c + (i0 + 1) * n + j0 + 4);
          c20 = _mm256_loadu_pd(c + (i0 + 2) * n + j0); c21 = _mm256_loadu_pd(c + (i0 + 2) * n + j0 + 4);
          c30 = _mm256_loadu_pd(c + (i0 + 3) * n + j0); c31 = _mm256_loadu_pd(c + (i0 + 3) * n + j0 + 4);
        } else {
          c00 = c01 = c10 = c11 = c20 = c21 = c30 = c31 = _mm256_setzero_pd();
        }
        for (std::size_t p = 0; p < k; ++p) {
          const __m256d b0 = _mm256_loadu_pd(b + p * n + j0);
          const __m256d b1 = _mm256_loadu_pd(b + p * n + j0 + 4);
          __m256d av;
          av = _mm256_set1_pd(a[(i0 + 0) * k + p]); c00 = _mm256_fmadd_pd(av, b0, c00); c01 = _mm256_fmadd_pd(av, b1, c01);
          av = _mm256_set1_pd(a[(i0 + 1) * k + p]); c10 = _mm256_fmadd_pd(av, b0, c10); c11 = _mm256_fmadd_pd(av, b1, c11);
          av = _mm256_set1_pd(a[(i0 + 2) * k + p]); c20 = _mm256_fmadd_pd(av, b0, c20); c21 = _mm256_fmadd_pd(av, b1, c21);
          av = _mm256_set1_pd(a[(i0 + 3) * k + p]); c30 = _mm256_fmadd_pd(av, b0, c30); c31 = _mm256_fmadd_pd(av, b1, c31);
        }
        _mm256_storeu_pd(c + (i0 + 0) * n + j0, c00); _mm256_storeu_pd(c + (i0 + 0) * n + j0 + 4, c01);
        _mm256_storeu_pd(c + (i0 + 1) * n + j0, c10); _mm256_storeu_pd(c + (i0 + 1) * n + j0 + 4, c11);
        _mm256_storeu_pd(c + (i0 + 2) * n + j0, c20); _mm256_storeu_pd(c + (i0 + 2) * n + j0 + 4, c21);
        _mm256_storeu_pd(c + (i0 + 3) * n + j0, c30); _mm256_storeu_pd(c + (i0 + 3) * n + j0 + 4, c31);
      }
    }
    for (; i0 < m; ++i0) {
      double tile[8];
      if (acc) {
        std::memcpy(tile, c + i0 * n + j0, jw * sizeof(double));
      } else {
        std::memset(tile, 0, jw * sizeof(double));
      }
      for (std::size_t p = 0; p < k; ++p) {
        const double av = a[i0 * k + p];
        const double* bp = b + p * n + j0;
        for (std::size_t j = 0; j < jw; ++j) tile[j] += av * bp[j];
      }
      std::memcpy(c + i0 * n + j0, tile, jw * sizeof(double));
    }
  }
}

void gemm_nt_f64(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c, bool acc) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = dot_f64(ai, b + j * k, k);
      c[i * n + j] = acc ? c[i * n + j] + d : d;
    }
  }
}

void gemm_tn_f64(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c, bool acc) {
  if (!acc) std::memset(c, 0, m * n * sizeof(double));
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      axpy_f64(ap[i], bp, c + i * n, n);
    }
  }
}

}  // namespace avx2

template <>
const Backend<float>* avx2_backend<float>() {
  static const Backend<float> be = {
      &avx2::add_f32,  &avx2::sub_f32,  &avx2::mul_f32,       &avx2::axpy_f32,
      &avx2::scale_f32, &avx2::dot_f32,  &avx2::sum_f32,       &avx2::vmax_f32,
      &avx2::relu_f32, &avx2::all_finite_f32,
      &avx2::gemm_nn_f32, &avx2::gemm_nt_f32, &avx2::gemm_tn_f32};
  return &be;
}

template <>
const Backend<double>* avx2_backend<double>() {
  static const Backend<double> be = {
      &avx2::add_f64,  &avx2::sub_f64,  &avx2::mul_f64,       &avx2::axpy_f64,
      &avx2::scale_f64, &avx2::dot_f64,  &avx2::sum_f64,       &avx2::vmax_f64,
      &avx2::relu_f64, &avx2::all_finite_f64,
      &avx2::gemm_nn_f64, &avx2::gemm_nt_f64, &avx2::gemm_tn_f64};
  return &be;
}

}  // namespace milforge::kernels

#else  // !(__AVX2__ && __FMA__)

namespace milforge::kernels {

template <>
const Backend<float>* avx2_backend<float>() { return nullptr; }

template <>
const Backend<double>* avx2_backend<double>() { return nullptr; }

}  // namespace milforge::kernels

#endif
