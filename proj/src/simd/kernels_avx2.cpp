// Compiled with -mavx2 only (no -mfma): mul and add stay separate roundings.
#include "clipdesk/simd/kernels.hpp"

#include <immintrin.h>

namespace clipdesk::simd::detail {
namespace {

double combine(__m256d acc) {
  alignas(32) double lane[kLanes];
  _mm256_store_pd(lane, acc);
  return (lane[0] + lane[1]) + (lane[2] + lane[3]);
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d a = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    const __m256d prod = _mm256_mul_pd(a, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
  }
  for (; i < n; ++i) y[i] = y[i] + alpha * x[i];
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    acc = _mm256_add_pd(acc, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  double sum = combine(acc);
  for (; i < n; ++i) sum = sum + a[i] * b[i];
  return sum;
}

double dot_widen_avx2(const float* stored, const double* query, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    const __m256d wide = _mm256_cvtps_pd(_mm_loadu_ps(stored + i));
    acc = _mm256_add_pd(acc, _mm256_mul_pd(wide, _mm256_loadu_pd(query + i)));
  }
  double sum = combine(acc);
  for (; i < n; ++i) sum = sum + static_cast<double>(stored[i]) * query[i];
  return sum;
}

}  // namespace

const KernelTable& avx2_table() {
  static const KernelTable table{"avx2", axpy_avx2, dot_avx2, dot_widen_avx2};
  return table;
}

}  // namespace clipdesk::simd::detail
