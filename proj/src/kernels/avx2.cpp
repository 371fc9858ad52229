#include "milr/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)
#define MILR_HAVE_X86 1
#include <immintrin.h>
#else
#define MILR_HAVE_X86 0
#endif

#include <cmath>

#include "milr/errors.hpp"

namespace milr::kernels {

#if MILR_HAVE_X86

#define MILR_AVX2 __attribute__((target("avx2,fma")))

namespace {

MILR_AVX2 inline __m256i tail_mask(std::size_t count) {
  // lanes [0, count) enabled
  const __m256i idx = _mm256_setr_epi64x(0, 1, 2, 3);
  return _mm256_cmpgt_epi64(_mm256_set1_epi64x(static_cast<long long>(count)),
                            idx);
}

// One row of C, columns [j, j + width) with width <= 4, masked.
MILR_AVX2 void gemm_row_tail(std::size_t k, const double* arow,
                             const double* b, std::size_t ldb, double* crow,
                             std::size_t width, bool accumulate) {
  const __m256i mask = tail_mask(width);
  __m256d acc = accumulate ? _mm256_maskload_pd(crow, mask)
                           : _mm256_setzero_pd();
  for (std::size_t p = 0; p < k; ++p) {
    const __m256d bv = _mm256_maskload_pd(b + p * ldb, mask);
    acc = _mm256_fmadd_pd(_mm256_set1_pd(arow[p]), bv, acc);
  }
  _mm256_maskstore_pd(crow, mask, acc);
}

MILR_AVX2 void gemm_avx2(std::size_t m, std::size_t n, std::size_t k,
                         const double* a, std::size_t lda, const double* b,
                         std::size_t ldb, double* c, std::size_t ldc,
                         bool accumulate) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const double* a0 = a + (i + 0) * lda;
    const double* a1 = a + (i + 1) * lda;
    const double* a2 = a + (i + 2) * lda;
    const double* a3 = a + (i + 3) * lda;
    double* c0 = c + (i + 0) * ldc;
    double* c1 = c + (i + 1) * ldc;
    double* c2 = c + (i + 2) * ldc;
    double* c3 = c + (i + 3) * ldc;
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
      __m256d r00, r01, r10, r11, r20, r21, r30, r31;
      if (accumulate) {
        r00 = _mm256_loadu_pd(c0 + j);
        r01 = _mm256_loadu_pd(c0 + j + 4);
        r10 = _mm256_loadu_pd(c1 + j);
        r11 = _mm256_loadu_pd(c1 + j + 4);
        r20 = _mm256_loadu_pd(c2 + j);
        r21 = _mm256_loadu_pd(c2 + j + 4);
        r30 = _mm256_loadu_pd(c3 + j);
        r31 = _mm256_loadu_pd(c3 + j + 4);
      } else {
        r00 = r01 = r10 = r11 = r20 = r21 = r30 = r31 = _mm256_setzero_pd();
      }
      for (std::size_t p = 0; p < k; ++p) {
        const double* brow = b + p * ldb + j;
        const __m256d b0 = _mm256_loadu_pd(brow);
        const __m256d b1 = _mm256_loadu_pd(brow + 4);
        __m256d av = _mm256_set1_pd(a0[p]);
        r00 = _mm256_fmadd_pd(av, b0, r00);
        r01 = _mm256_fmadd_pd(av, b1, r01);
        av = _mm256_set1_pd(a1[p]);
        r10 = _mm256_fmadd_pd(av, b0, r10);
        r11 = _mm256_fmadd_pd(av, b1, r11);
        av = _mm256_set1_pd(a2[p]);
        r20 = _mm256_fmadd_pd(av, b0, r20);
        r21 = _mm256_fmadd_pd(av, b1, r21);
        av = _mm256_set1_pd(a3[p]);
        r30 = _mm256_fmadd_pd(av, b0, r30);
        r31 = _mm256_fmadd_pd(av, b1, r31);
      }
      _mm256_storeu_pd(c0 + j, r00);
      _mm256_storeu_pd(c0 + j + 4, r01);
      _mm256_storeu_pd(c1 + j, r10);
      _mm256_storeu_pd(c1 + j + 4, r11);
      _mm256_storeu_pd(c2 + j, r20);
      _mm256_storeu_pd(c2 + j + 4, r21);
      _mm256_storeu_pd(c3 + j, r30);
      _mm256_storeu_pd(c3 + j + 4, r31);
    }
    for (; j < n; j += 4) {
      const std::size_t width = (n - j < 4) ? n - j : 4;
      gemm_row_tail(k, a0, b + j, ldb, c0 + j, width, accumulate);
      gemm_row_tail(k, a1, b + j, ldb, c1 + j, width, accumulate);
      gemm_row_tail(k, a2, b + j, ldb, c2 + j, width, accumulate);
      gemm_row_tail(k, a3, b + j, ldb, c3 + j, width, accumulate);
    }
  }
  for (; i < m; ++i) {
    const double* arow = a + i * lda;
    double* crow = c + i * ldc;
    for (std::size_t j = 0; j < n; j += 4) {
      const std::size_t width = (n - j < 4) ? n - j : 4;
      gemm_row_tail(k, arow, b + j, ldb, crow + j, width, accumulate);
    }
  }
}

MILR_AVX2 double dot_avx2(std::size_t n, const double* a, const double* b) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4),
                           _mm256_loadu_pd(b + i + 4), acc1);
  }
  if (i < n) {
    const std::size_t rest = n - i;
    const __m256i m0 = tail_mask(rest);
    acc0 = _mm256_fmadd_pd(_mm256_maskload_pd(a + i, m0),
                           _mm256_maskload_pd(b + i, m0), acc0);
    if (rest > 4) {
      const __m256i m1 = tail_mask(rest - 4);
      acc1 = _mm256_fmadd_pd(_mm256_maskload_pd(a + i + 4, m1),
                             _mm256_maskload_pd(b + i + 4, m1), acc1);
    }
  }
  const __m256d acc = _mm256_add_pd(acc0, acc1);
  const __m128d lo = _mm256_castpd256_pd128(acc);
  const __m128d hi = _mm256_extractf128_pd(acc, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

MILR_AVX2 void axpy_avx2(std::size_t n, double alpha, const double* x,
                         double* y) {
  const __m256d av = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i),
                                            _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

MILR_AVX2 void add_avx2(std::size_t n, const double* a, const double* b,
                        double* out) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i),
                                            _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

MILR_AVX2 void mul_avx2(std::size_t n, const double* a, const double* b,
                        double* out) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i),
                                            _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

}  // namespace

bool avx2_available() {
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
}

const KernelTable& avx2_table() {
  static const KernelTable t{Isa::avx2, "avx2", gemm_avx2, dot_avx2,
                             axpy_avx2, add_avx2,  mul_avx2};
  return t;
}

#else

bool avx2_available() { return false; }

const KernelTable& avx2_table() {
  throw ContractError("AVX2 kernels are not compiled for this architecture");
}

#endif

}  // namespace milr::kernels
