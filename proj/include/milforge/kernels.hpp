#pragma once

#include <cstddef>

// Data-parallel inner loops behind the tensor layer. Every entry point has a
// scalar reference implementation and (on x86-64) an AVX2+FMA variant; the
// active backend is selected once at startup. The two backends are
// equivalence-tested against each other, and within one process the selection
// is fixed, so seeded runs stay bit-reproducible.
//
// Row-locality contract: for gemm_nn and gemm_nt, output row i is computed
// from row i of A alone with a fixed accumulation order, so the bits of row i
// do not depend on the other rows of A. The instance-locality guarantee of
// the attention scorer rests on this.
namespace milforge::kernels {

enum class Isa { scalar, avx2 };

const char* isa_name(Isa isa);
bool cpu_supports_avx2();

// Resolved once from MILFORGE_KERNELS (auto | scalar | avx2); "auto" picks
// AVX2 when the CPU supports it.
Isa active_isa();

// All matrices are dense row-major.
//   gemm_nn: c[m x n] = a[m x k] * b[k x n]
//   gemm_nt: c[m x n] = a[m x k] * b[n x k]^T
//   gemm_tn: c[m x n] = a[k x m]^T * b[k x n]
// acc=true accumulates into c instead of overwriting.
template <typename T>
struct Backend {
  void (*add)(const T* a, const T* b, T* out, std::size_t n);
  void (*sub)(const T* a, const T* b, T* out, std::size_t n);
  void (*mul)(const T* a, const T* b, T* out, std::size_t n);
  void (*axpy)(T alpha, const T* x, T* y, std::size_t n);  // y += alpha * x
  void (*scale)(const T* x, T alpha, T* out, std::size_t n);
  T (*dot)(const T* a, const T* b, std::size_t n);
  T (*sum)(const T* x, std::size_t n);
  T (*vmax)(const T* x, std::size_t n);  // n >= 1
  void (*relu)(const T* x, T* out, std::size_t n);
  bool (*all_finite)(const T* x, std::size_t n);
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool acc);
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool acc);
  void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool acc);
};

template <typename T>
const Backend<T>& active();

template <typename T>
const Backend<T>& scalar_backend();

// nullptr when the binary was built without the AVX2 translation unit or the
// CPU lacks AVX2/FMA.
template <typename T>
const Backend<T>* avx2_backend();

}  // namespace milforge::kernels
