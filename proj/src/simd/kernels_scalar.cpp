#include "clipdesk/simd/kernels.hpp"

namespace clipdesk::simd {
namespace {

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = y[i] + alpha * x[i];
}

double dot_scalar(const double* a, const double* b, std::size_t n) {
  double lane[kLanes] = {0.0, 0.0, 0.0, 0.0};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    for (std::size_t l = 0; l < kLanes; ++l) lane[l] = lane[l] + a[i + l] * b[i + l];
  }
  double sum = (lane[0] + lane[1]) + (lane[2] + lane[3]);
  for (; i < n; ++i) sum = sum + a[i] * b[i];
  return sum;
}

double dot_widen_scalar(const float* stored, const double* query, std::size_t n) {
  double lane[kLanes] = {0.0, 0.0, 0.0, 0.0};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    for (std::size_t l = 0; l < kLanes; ++l) {
      lane[l] = lane[l] + static_cast<double>(stored[i + l]) * query[i + l];
    }
  }
  double sum = (lane[0] + lane[1]) + (lane[2] + lane[3]);
  for (; i < n; ++i) sum = sum + static_cast<double>(stored[i]) * query[i];
  return sum;
}

}  // namespace

const KernelTable& scalar_kernels() {
  static const KernelTable table{"scalar", axpy_scalar, dot_scalar, dot_widen_scalar};
  return table;
}

}  // namespace clipdesk::simd
