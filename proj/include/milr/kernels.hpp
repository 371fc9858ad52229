#pragma once

// Dense inner-loop kernels. Every kernel has a scalar reference
// implementation and, where the CPU allows it, an AVX2/FMA variant. The
// variant is chosen once per process (see active()); MILR_KERNELS=scalar
// forces the reference path.

#include <cstddef>
#include <string_view>

namespace milr::kernels {

enum class Isa { scalar, avx2 };

struct KernelTable {
  Isa isa;
  std::string_view name;

  // C[m x n] (+)= A[m x k] * B[k x n], all row-major with leading dimensions.
  // Each output element is reduced over k in increasing order, so an
  // element's value does not depend on m, n or its position in the tile.
  void (*gemm)(std::size_t m, std::size_t n, std::size_t k, const double* a,
               std::size_t lda, const double* b, std::size_t ldb, double* c,
               std::size_t ldc, bool accumulate);

  double (*dot)(std::size_t n, const double* a, const double* b);

  // y += alpha * x
  void (*axpy)(std::size_t n, double alpha, const double* x, double* y);

  void (*add)(std::size_t n, const double* a, const double* b, double* out);
  void (*mul)(std::size_t n, const double* a, const double* b, double* out);
};

bool supported(Isa isa);

/// Kernel table for a specific ISA. Throws ContractError if unsupported.
const KernelTable& table(Isa isa);

/// Kernel table selected for this process.
const KernelTable& active();

const KernelTable& scalar_table();
const KernelTable& avx2_table();

}  // namespace milr::kernels
