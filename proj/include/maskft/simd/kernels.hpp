#pragma once
// Data-parallel inner loops used by the tensor ops and the optimizer.
//
// Every kernel has a scalar reference implementation and vectorized variants
// (AVX2 on x86-64, NEON on aarch64). The variants never reassociate sums: each
// output element is accumulated in the same order as the scalar loop and
// multiply/add are issued as separate instructions (no FMA contraction), so all
// variants are bit-identical to the reference. The equivalence tests rely on
// this.

#include <cstddef>
#include <string_view>

namespace maskft::simd {

enum class Isa { scalar, avx2, neon };

std::string_view isa_name(Isa isa);

struct KernelTable {
  Isa isa;

  // y[i] += a * x[i]
  void (*axpy)(std::size_t n, double a, const double* x, double* y);
  // out[i] = a[i] + b[i]
  void (*add)(std::size_t n, const double* a, const double* b, double* out);
  // out[i] = a[i] * b[i]
  void (*mul)(std::size_t n, const double* a, const double* b, double* out);
  // acc[i] += a[i] * b[i]
  void (*mul_acc)(std::size_t n, const double* a, const double* b, double* acc);
  // out[i] = s * x[i]
  void (*scale)(std::size_t n, double s, const double* x, double* out);
  // acc[i] += x[i]
  void (*accumulate)(std::size_t n, const double* x, double* acc);

  // C[m x n] (+)= A[m x k] * B[k x n], all row-major and contiguous.
  // With accumulate == false C is overwritten. Each C element is summed over
  // k in increasing order starting from its initial value.
  void (*gemm)(std::size_t m, std::size_t n, std::size_t k, const double* a,
               const double* b, double* c, bool accumulate);

  // One Adam step over n parameters.
  //   m = b1*m + (1-b1)*g ; v = b2*v + (1-b2)*g*g
  //   p -= lr * (m / bc1) / (sqrt(v / bc2) + eps)
  void (*adam)(std::size_t n, double* param, const double* grad, double* m,
               double* v, double lr, double beta1, double beta2, double eps,
               double bc1, double bc2);
};

const KernelTable& scalar_kernels();
// nullptr when the variant was not compiled in for this target.
const KernelTable* avx2_kernels();
const KernelTable* neon_kernels();

bool cpu_supports(Isa isa);

// Table used by the library. Chosen once: the best ISA the CPU supports,
// unless MASKFT_SIMD=scalar|avx2|neon asks for a specific one.
const KernelTable& active();

// Overrides the active table (tests and benchmarks). Throws if the ISA is
// unavailable on this machine.
void force(Isa isa);

}  // namespace maskft::simd
