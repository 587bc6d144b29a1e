// AVX2 variants. This translation unit is compiled with -mavx2 and only
// reached after a cpuid check. FMA is deliberately not enabled: products and
// sums are rounded separately, exactly like the scalar reference.

#include "maskft/simd/kernels.hpp"

#if defined(MASKFT_HAVE_AVX2)

#include <immintrin.h>

#include <cmath>

namespace maskft::simd {
namespace {

void axpy_avx2(std::size_t n, double a, const double* x, double* y) {
  const __m256d va = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d vy = _mm256_loadu_pd(y + i);
    vy = _mm256_add_pd(vy, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
    _mm256_storeu_pd(y + i, vy);
  }
  for (; i < n; ++i) y[i] = y[i] + a * x[i];
}

void add_avx2(std::size_t n, const double* a, const double* b, double* out) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void mul_avx2(std::size_t n, const double* a, const double* b, double* out) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void mul_acc_avx2(std::size_t n, const double* a, const double* b, double* acc) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d prod = _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
    _mm256_storeu_pd(acc + i, _mm256_add_pd(_mm256_loadu_pd(acc + i), prod));
  }
  for (; i < n; ++i) acc[i] = acc[i] + a[i] * b[i];
}

void scale_avx2(std::size_t n, double s, const double* x, double* out) {
  const __m256d vs = _mm256_set1_pd(s);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_mul_pd(vs, _mm256_loadu_pd(x + i)));
  }
  for (; i < n; ++i) out[i] = s * x[i];
}

void accumulate_avx2(std::size_t n, const double* x, double* acc) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(acc + i, _mm256_add_pd(_mm256_loadu_pd(acc + i), _mm256_loadu_pd(x + i)));
  }
  for (; i < n; ++i) acc[i] = acc[i] + x[i];
}

// 4 x 8 register tile: four rows of C, two ymm per row.
inline void gemm_tile_4x8(std::size_t n, std::size_t k, const double* a,
                          const double* b, double* c) {
  __m256d c00 = _mm256_loadu_pd(c + 0 * n), c01 = _mm256_loadu_pd(c + 0 * n + 4);
  __m256d c10 = _mm256_loadu_pd(c + 1 * n), c11 = _mm256_loadu_pd(c + 1 * n + 4);
  __m256d c20 = _mm256_loadu_pd(c + 2 * n), c21 = _mm256_loadu_pd(c + 2 * n + 4);
  __m256d c30 = _mm256_loadu_pd(c + 3 * n), c31 = _mm256_loadu_pd(c + 3 * n + 4);
  for (std::size_t p = 0; p < k; ++p) {
    const __m256d b0 = _mm256_loadu_pd(b + p * n);
    const __m256d b1 = _mm256_loadu_pd(b + p * n + 4);
    __m256d av = _mm256_set1_pd(a[0 * k + p]);
    c00 = _mm256_add_pd(c00, _mm256_mul_pd(av, b0));
    c01 = _mm256_add_pd(c01, _mm256_mul_pd(av, b1));
    av = _mm256_set1_pd(a[1 * k + p]);
    c10 = _mm256_add_pd(c10, _mm256_mul_pd(av, b0));
    c11 = _mm256_add_pd(c11, _mm256_mul_pd(av, b1));
    av = _mm256_set1_pd(a[2 * k + p]);
    c20 = _mm256_add_pd(c20, _mm256_mul_pd(av, b0));
    c21 = _mm256_add_pd(c21, _mm256_mul_pd(av, b1));
    av = _mm256_set1_pd(a[3 * k + p]);
    c30 = _mm256_add_pd(c30, _mm256_mul_pd(av, b0));
    c31 = _mm256_add_pd(c31, _mm256_mul_pd(av, b1));
  }
  _mm256_storeu_pd(c + 0 * n, c00); _mm256_storeu_pd(c + 0 * n + 4, c01);
  _mm256_storeu_pd(c + 1 * n, c10); _mm256_storeu_pd(c + 1 * n + 4, c11);
  _mm256_storeu_pd(c + 2 * n, c20); _mm256_storeu_pd(c + 2 * n + 4, c21);
  _mm256_storeu_pd(c + 3 * n, c30); _mm256_storeu_pd(c + 3 * n + 4, c31);
}

void gemm_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a,
               const double* b, double* c, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < m * n; ++i) c[i] = 0.0;
  }
  const std::size_t m4 = m - m % 4;
  const std::size_t n8 = n - n % 8;
  for (std::size_t i = 0; i < m4; i += 4) {
    for (std::size_t j = 0; j < n8; j += 8) {
      gemm_tile_4x8(n, k, a + i * k, b + j, c + i * n + j);
    }
  }
  // Column remainder for the tiled rows, then the row remainder.
  if (n8 < n) {
    for (std::size_t i = 0; i < m4; ++i) {
      double* crow = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = a[i * k + p];
        const double* brow = b + p * n;
        for (std::size_t j = n8; j < n; ++j) crow[j] = crow[j] + aip * brow[j];
      }
    }
  }
  for (std::size_t i = m4; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) axpy_avx2(n, a[i * k + p], b + p * n, crow);
  }
}

void adam_avx2(std::size_t n, double* param, const double* grad, double* m,
               double* v, double lr, double beta1, double beta2, double eps,
               double bc1, double bc2) {
  const double one_minus_b1 = 1.0 - beta1;
  const double one_minus_b2 = 1.0 - beta2;
  const __m256d vb1 = _mm256_set1_pd(beta1), vb2 = _mm256_set1_pd(beta2);
  const __m256d v1b1 = _mm256_set1_pd(one_minus_b1), v1b2 = _mm256_set1_pd(one_minus_b2);
  const __m256d vbc1 = _mm256_set1_pd(bc1), vbc2 = _mm256_set1_pd(bc2);
  const __m256d vlr = _mm256_set1_pd(lr), veps = _mm256_set1_pd(eps);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d g = _mm256_loadu_pd(grad + i);
    __m256d mv = _mm256_add_pd(_mm256_mul_pd(vb1, _mm256_loadu_pd(m + i)), _mm256_mul_pd(v1b1, g));
    __m256d vv = _mm256_add_pd(_mm256_mul_pd(vb2, _mm256_loadu_pd(v + i)),
                               _mm256_mul_pd(v1b2, _mm256_mul_pd(g, g)));
    _mm256_storeu_pd(m + i, mv);
    _mm256_storeu_pd(v + i, vv);
    const __m256d mhat = _mm256_div_pd(mv, vbc1);
    const __m256d vhat = _mm256_div_pd(vv, vbc2);
    const __m256d step =
        _mm256_mul_pd(vlr, _mm256_div_pd(mhat, _mm256_add_pd(_mm256_sqrt_pd(vhat), veps)));
    _mm256_storeu_pd(param + i, _mm256_sub_pd(_mm256_loadu_pd(param + i), step));
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

const KernelTable* avx2_kernels() {
  static const KernelTable table{Isa::avx2, axpy_avx2, add_avx2,
                                 mul_avx2,  mul_acc_avx2, scale_avx2,
                                 accumulate_avx2, gemm_avx2, adam_avx2};
  return &table;
}

}  // namespace maskft::simd

#else

namespace maskft::simd {
const KernelTable* avx2_kernels() { return nullptr; }
}  // namespace maskft::simd

#endif
