#include "milforge/kernels.hpp"

#include <cstdlib>
#include <cstring>
#include <stdexcept>

namespace milforge::kernels {

const char* isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar: return "scalar";
    case Isa::avx2: return "avx2";
  }
  return "?";
}

bool cpu_supports_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

namespace {

Isa resolve() {
  const bool have_avx2 = cpu_supports_avx2() && avx2_backend<float>() != nullptr;
  const char* env = std::getenv("MILFORGE_KERNELS");
  if (env == nullptr || std::strcmp(env, "auto") == 0)
    return have_avx2 ? Isa::avx2 : Isa::scalar;
  if (std::strcmp(env, "scalar") == 0) return Isa::scalar;
  if (std::strcmp(env, "avx2") == 0) {
    if (!have_avx2) throw std::runtime_error("MILFORGE_KERNELS=avx2 but AVX2/FMA is unavailable");
    return Isa::avx2;
  }
  throw std::runtime_error(std::string("MILFORGE_KERNELS: unknown value '") + env + "' (use auto|scalar|avx2)");
}

}  // namespace

Isa active_isa() {
  static const Isa isa = resolve();
  return isa;
}

template <>
const Backend<float>& active<float>() {
  static const Backend<float>& be =
      active_isa() == Isa::avx2 ? *avx2_backend<float>() : scalar_backend<float>();
  return be;
}

template <>
const Backend<double>& active<double>() {
  static const Backend<double>& be =
      active_isa() == Isa::avx2 ? *avx2_backend<double>() : scalar_backend<double>();
  return be;
}

}  // namespace milforge::kernels
