#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "maskft/simd/kernels.hpp"

namespace maskft::simd {
namespace {

const KernelTable* table_for(Isa isa) {
  switch (isa) {
    case Isa::scalar: return &scalar_kernels();
    case Isa::avx2: return avx2_kernels();
    case Isa::neon: return neon_kernels();
  }
  return nullptr;
}

const KernelTable* select_default() {
  if (const char* env = std::getenv("MASKFT_SIMD")) {
    const std::string want(env);
    for (Isa isa : {Isa::scalar, Isa::avx2, Isa::neon}) {
      if (want == isa_name(isa) && cpu_supports(isa)) return table_for(isa);
    }
  }
  if (cpu_supports(Isa::avx2)) return avx2_kernels();
  if (cpu_supports(Isa::neon)) return neon_kernels();
  return &scalar_kernels();
}

std::atomic<const KernelTable*>& slot() {
  static std::atomic<const KernelTable*> current{select_default()};
  return current;
}

}  // namespace

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar: return "scalar";
    case Isa::avx2: return "avx2";
    case Isa::neon: return "neon";
  }
  return "unknown";
}

bool cpu_supports(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
#if defined(__x86_64__) || defined(__i386__)
      return avx2_kernels() != nullptr && __builtin_cpu_supports("avx2");
#else
      return false;
#endif
    case Isa::neon:
      return neon_kernels() != nullptr;
  }
  return false;
}

const KernelTable& active() { return *slot().load(std::memory_order_acquire); }

void force(Isa isa) {
  if (!cpu_supports(isa)) {
    throw std::runtime_error("SIMD variant '" + std::string(isa_name(isa)) +
                             "' is not available on this machine");
  }
  slot().store(table_for(isa), std::memory_order_release);
}

}  // namespace maskft::simd
