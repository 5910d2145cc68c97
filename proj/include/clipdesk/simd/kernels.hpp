#pragma once

#include <cstddef>
#include <string_view>

// Data-parallel inner loops used by matmul and index scoring.
//
// Every variant is bitwise identical to the scalar reference: the scalar
// kernels accumulate in the same four-lane order the vector units use, and
// nothing is contracted into fused multiply-adds. Training traces, checkpoints
// and search results therefore do not depend on which variant ran.
namespace clipdesk::simd {

inline constexpr std::size_t kLanes = 4;

struct KernelTable {
  std::string_view name;
  // y[i] += alpha * x[i]
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // four-lane dot product: lane sums combined as (l0 + l1) + (l2 + l3),
  // remainder added sequentially
  double (*dot)(const double* a, const double* b, std::size_t n);
  // same as dot, with the 32-bit operand widened to 64 bits first
  double (*dot_widen)(const float* stored, const double* query, std::size_t n);
};

const KernelTable& scalar_kernels();

// nullptr when the build or the running CPU has no AVX2.
const KernelTable* avx2_kernels();

// Selected once per process. CLIPDESK_SIMD=scalar forces the reference
// kernels; CLIPDESK_SIMD=avx2 or unset picks AVX2 when available.
const KernelTable& active();

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  active().axpy(alpha, x, y, n);
}

inline double dot(const double* a, const double* b, std::size_t n) {
  return active().dot(a, b, n);
}

inline double dot_widen(const float* stored, const double* query, std::size_t n) {
  return active().dot_widen(stored, query, n);
}

}  // namespace clipdesk::simd
