#include <cstdlib>
#include <stdexcept>
#include <string_view>

#include "cue/simd/kernels.hpp"

namespace cue::simd {

#if !defined(CUE_HAVE_AVX2_TU)
const KernelTable* avx2_kernels() { return nullptr; }
#endif

bool cpu_supports(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
#if defined(__x86_64__) || defined(__i386__)
      return avx2_kernels() != nullptr && __builtin_cpu_supports("avx2") &&
             __builtin_cpu_supports("fma");
#else
      return false;
#endif
  }
  return false;
}

const KernelTable& select(Isa isa) {
  if (!cpu_supports(isa)) throw std::runtime_error("requested SIMD kernels are not available");
  return isa == Isa::avx2 ? *avx2_kernels() : scalar_kernels();
}

namespace {

const KernelTable& choose() {
  if (const char* env = std::getenv("CUE_SIMD")) {
    const std::string_view v(env);
    if (v == "scalar") return scalar_kernels();
    if (v == "avx2") return select(Isa::avx2);
  }
  return cpu_supports(Isa::avx2) ? *avx2_kernels() : scalar_kernels();
}

}  // namespace

const KernelTable& active() {
  static const KernelTable& table = choose();
  return table;
}

}  // namespace cue::simd
