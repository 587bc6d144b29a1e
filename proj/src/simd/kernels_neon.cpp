// NEON variants for aarch64. vfmaq is avoided on purpose; see kernels.hpp.

#include "maskft/simd/kernels.hpp"

#if defined(__aarch64__) && defined(__ARM_NEON)

#include <arm_neon.h>

#include <cmath>

namespace maskft::simd {
namespace {

void axpy_neon(std::size_t n, double a, const double* x, double* y) {
  const float64x2_t va = vdupq_n_f64(a);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    vst1q_f64(y + i, vaddq_f64(vld1q_f64(y + i), vmulq_f64(va, vld1q_f64(x + i))));
  }
  for (; i < n; ++i) y[i] = y[i] + a * x[i];
}

void add_neon(std::size_t n, const double* a, const double* b, double* out) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vaddq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void mul_neon(std::size_t n, const double* a, const double* b, double* out) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void mul_acc_neon(std::size_t n, const double* a, const double* b, double* acc) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    vst1q_f64(acc + i, vaddq_f64(vld1q_f64(acc + i), vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i))));
  }
  for (; i < n; ++i) acc[i] = acc[i] + a[i] * b[i];
}

void scale_neon(std::size_t n, double s, const double* x, double* out) {
  const float64x2_t vs = vdupq_n_f64(s);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vmulq_f64(vs, vld1q_f64(x + i)));
  for (; i < n; ++i) out[i] = s * x[i];
}

void accumulate_neon(std::size_t n, const double* x, double* acc) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(acc + i, vaddq_f64(vld1q_f64(acc + i), vld1q_f64(x + i)));
  for (; i < n; ++i) acc[i] = acc[i] + x[i];
}

void gemm_neon(std::size_t m, std::size_t n, std::size_t k, const double* a,
               const double* b, double* c, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < m * n; ++i) c[i] = 0.0;
  }
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) axpy_neon(n, a[i * k + p], b + p * n, crow);
  }
}

void adam_neon(std::size_t n, double* param, const double* grad, double* m,
               double* v, double lr, double beta1, double beta2, double eps,
               double bc1, double bc2) {
  const double one_minus_b1 = 1.0 - beta1;
  const double one_minus_b2 = 1.0 - beta2;
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    const float64x2_t g = vld1q_f64(grad + i);
    const float64x2_t mv = vaddq_f64(vmulq_f64(vdupq_n_f64(beta1), vld1q_f64(m + i)),
                                     vmulq_f64(vdupq_n_f64(one_minus_b1), g));
    const float64x2_t vv = vaddq_f64(vmulq_f64(vdupq_n_f64(beta2), vld1q_f64(v + i)),
                                     vmulq_f64(vdupq_n_f64(one_minus_b2), vmulq_f64(g, g)));
    vst1q_f64(m + i, mv);
    vst1q_f64(v + i, vv);
    const float64x2_t mhat = vdivq_f64(mv, vdupq_n_f64(bc1));
    const float64x2_t vhat = vdivq_f64(vv, vdupq_n_f64(bc2));
    const float64x2_t denom = vaddq_f64(vsqrtq_f64(vhat), vdupq_n_f64(eps));
    const float64x2_t step = vmulq_f64(vdupq_n_f64(lr), vdivq_f64(mhat, denom));
    vst1q_f64(param + i, vsubq_f64(vld1q_f64(param + i), step));
  }
  for (; i < n; ++i) {
    const double g = grad[i];
    m[i] = beta1 * m[i] + one_minus_b1 * g;
    v[i] = beta2 * v[i] + one_minus_b2 * (g * g);
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    param[i] = param[i] - lr * (mhat / (std::sqrt(vhat) + eps));
  }
}

}  // namespace

const KernelTable* neon_kernels() {
  static const KernelTable table{Isa::neon, axpy_neon, add_neon,
                                 mul_neon,  mul_acc_neon, scale_neon,
                                 accumulate_neon, gemm_neon, adam_neon};
  return &table;
}

}  // namespace maskft::simd

#else

namespace maskft::simd {
const KernelTable* neon_kernels() { return nullptr; }
}  // namespace maskft::simd

#endif
