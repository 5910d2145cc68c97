#include <cstdlib>
#include <string_view>

#include "clipdesk/simd/kernels.hpp"

namespace clipdesk::simd {

#if defined(CLIPDESK_HAVE_AVX2)
namespace detail {
const KernelTable& avx2_table();
}
#endif

const KernelTable* avx2_kernels() {
#if defined(CLIPDESK_HAVE_AVX2)
  static const bool supported = __builtin_cpu_supports("avx2");
  return supported ? &detail::avx2_table() : nullptr;
#else
  return nullptr;
#endif
}

const KernelTable& active() {
  static const KernelTable& chosen = [] () -> const KernelTable& {
    const char* env = std::getenv("CLIPDESK_SIMD");
    const std::string_view want = env ? env : "auto";
    if (want == "scalar") return scalar_kernels();
    if (const KernelTable* avx2 = avx2_kernels()) return *avx2;
    return scalar_kernels();
  }();
  return chosen;
}

}  // namespace clipdesk::simd
