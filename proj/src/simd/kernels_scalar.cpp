#include <cmath>

#include "maskft/simd/kernels.hpp"

namespace maskft::simd {
namespace {

void axpy_scalar(std::size_t n, double a, const double* x, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = y[i] + a * x[i];
}

void add_scalar(std::size_t n, const double* a, const double* b, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void mul_scalar(std::size_t n, const double* a, const double* b, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void mul_acc_scalar(std::size_t n, const double* a, const double* b, double* acc) {
  for (std::size_t i = 0; i < n; ++i) acc[i] = acc[i] + a[i] * b[i];
}

void scale_scalar(std::size_t n, double s, const double* x, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = s * x[i];
}

void accumulate_scalar(std::size_t n, const double* x, double* acc) {
  for (std::size_t i = 0; i < n; ++i) acc[i] = acc[i] + x[i];
}

void gemm_scalar(std::size_t m, std::size_t n, std::size_t k, const double* a,
                 const double* b, double* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    if (!accumulate) {
      for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    }
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] = crow[j] + aip * brow[j];
    }
  }
}

void adam_scalar(std::size_t n, double* param, const double* grad, double* m,
                 double* v, double lr, double beta1, double beta2, double eps,
                 double bc1, double bc2) {
  const double one_minus_b1 = 1.0 - beta1;
  const double one_minus_b2 = 1.0 - beta2;
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad[i];
    m[i] = beta1 * m[i] + one_minus_b1 * g;
    v[i] = beta2 * v[i] + one_minus_b2 * (g * g);
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    param[i] = param[i] - lr * (mhat / (std::sqrt(vhat) + eps));
  }
}

}  // namespace

const KernelTable& scalar_kernels() {
  static const KernelTable table{Isa::scalar, axpy_scalar, add_scalar,
                                 mul_scalar,  mul_acc_scalar, scale_scalar,
                                 accumulate_scalar, gemm_scalar, adam_scalar};
  return table;
}

}  // namespace maskft::simd
