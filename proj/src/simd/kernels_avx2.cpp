// Compiled with -mavx2 -mfma. Only reached after the dispatcher has checked
// cpuid, so nothing in here may run at static-initialisation time.

#include <algorithm>
#include <vector>

#include "volssl/simd.hpp"

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#define VOLSSL_HAVE_AVX2 1
#else
#define VOLSSL_HAVE_AVX2 0
#endif

namespace volssl::simd::avx2 {

#if VOLSSL_HAVE_AVX2

namespace {

constexpr std::size_t kMr = 4;
constexpr std::size_t kKc = 128;
constexpr std::size_t kNc = 256;

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d sh = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

// C[0..mr, 0..nc] += alpha * Ap * Bp with Ap packed [kc][4] and Bp packed [kc][nc].
void micro_panel(std::size_t mr, std::size_t nc, std::size_t kc, double alpha, const double* ap,
                 const double* bp, double* c, std::size_t ldc) {
  const __m256d valpha = _mm256_set1_pd(alpha);
  std::size_t j = 0;
  for (; j + 8 <= nc; j += 8) {
    __m256d acc00 = _mm256_setzero_pd(), acc01 = _mm256_setzero_pd();
    __m256d acc10 = _mm256_setzero_pd(), acc11 = _mm256_setzero_pd();
    __m256d acc20 = _mm256_setzero_pd(), acc21 = _mm256_setzero_pd();
    __m256d acc30 = _mm256_setzero_pd(), acc31 = _mm256_setzero_pd();
    for (std::size_t p = 0; p < kc; ++p) {
      const double* brow = bp + p * nc + j;
      const __m256d b0 = _mm256_loadu_pd(brow);
      const __m256d b1 = _mm256_loadu_pd(brow + 4);
      const double* arow = ap + p * kMr;
      __m256d a = _mm256_broadcast_sd(arow);
      acc00 = _mm256_fmadd_pd(a, b0, acc00);
      acc01 = _mm256_fmadd_pd(a, b1, acc01);
      a = _mm256_broadcast_sd(arow + 1);
      acc10 = _mm256_fmadd_pd(a, b0, acc10);
      acc11 = _mm256_fmadd_pd(a, b1, acc11);
      a = _mm256_broadcast_sd(arow + 2);
      acc20 = _mm256_fmadd_pd(a, b0, acc20);
      acc21 = _mm256_fmadd_pd(a, b1, acc21);
      a = _mm256_broadcast_sd(arow + 3);
      acc30 = _mm256_fmadd_pd(a, b0, acc30);
      acc31 = _mm256_fmadd_pd(a, b1, acc31);
    }
    const __m256d accs[4][2] = {{acc00, acc01}, {acc10, acc11}, {acc20, acc21}, {acc30, acc31}};
    for (std::size_t r = 0; r < mr; ++r) {
      double* crow = c + r * ldc + j;
      _mm256_storeu_pd(crow, _mm256_fmadd_pd(valpha, accs[r][0], _mm256_loadu_pd(crow)));
      _mm256_storeu_pd(crow + 4, _mm256_fmadd_pd(valpha, accs[r][1], _mm256_loadu_pd(crow + 4)));
    }
  }
  for (; j + 4 <= nc; j += 4) {
    __m256d acc[kMr] = {_mm256_setzero_pd(), _mm256_setzero_pd(), _mm256_setzero_pd(),
                        _mm256_setzero_pd()};
    for (std::size_t p = 0; p < kc; ++p) {
      const __m256d b0 = _mm256_loadu_pd(bp + p * nc + j);
      for (std::size_t r = 0; r < kMr; ++r) {
        acc[r] = _mm256_fmadd_pd(_mm256_broadcast_sd(ap + p * kMr + r), b0, acc[r]);
      }
    }
    for (std::size_t r = 0; r < mr; ++r) {
      double* crow = c + r * ldc + j;
      _mm256_storeu_pd(crow, _mm256_fmadd_pd(valpha, acc[r], _mm256_loadu_pd(crow)));
    }
  }
  for (; j < nc; ++j) {
    for (std::size_t r = 0; r < mr; ++r) {
      double s = 0.0;
      for (std::size_t p = 0; p < kc; ++p) s += ap[p * kMr + r] * bp[p * nc + j];
      c[r * ldc + j] += alpha * s;
    }
  }
}

}  // namespace

bool compiled() { return true; }

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta, double* c,
          std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * ldc;
    if (beta == 0.0) {
      std::fill(crow, crow + n, 0.0);
    } else if (beta != 1.0) {
      for (std::size_t j = 0; j < n; ++j) crow[j] *= beta;
    }
  }
  if (m == 0 || n == 0 || k == 0) return;

  thread_local std::vector<double> bpack;
  thread_local std::vector<double> apack;
  apack.resize(kKc * kMr);
  for (std::size_t jb = 0; jb < n; jb += kNc) {
    const std::size_t nc = std::min(kNc, n - jb);
    for (std::size_t kb = 0; kb < k; kb += kKc) {
      const std::size_t kc = std::min(kKc, k - kb);
      bpack.resize(kc * nc);
      for (std::size_t p = 0; p < kc; ++p) {
        double* dst = bpack.data() + p * nc;
        if (trans_b) {
          for (std::size_t j = 0; j < nc; ++j) dst[j] = b[(jb + j) * ldb + kb + p];
        } else {
          const double* src = b + (kb + p) * ldb + jb;
          std::copy(src, src + nc, dst);
        }
      }
      for (std::size_t i = 0; i < m; i += kMr) {
        const std::size_t mr = std::min(kMr, m - i);
        for (std::size_t p = 0; p < kc; ++p) {
          for (std::size_t r = 0; r < kMr; ++r) {
            double v = 0.0;
            if (r < mr) v = trans_a ? a[(kb + p) * lda + i + r] : a[(i + r) * lda + kb + p];
            apack[p * kMr + r] = v;
          }
        }
        micro_panel(mr, nc, kc, alpha, apack.data(), bpack.data(), c + i * ldc + jb, ldc);
      }
    }
  }
}

double dot(const double* x, const double* y, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd(), acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
  }
  double s = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

void axpy(std::size_t n, double alpha, const double* x, double* y) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

#else

bool compiled() { return false; }

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta, double* c,
          std::size_t ldc) {
  scalar::gemm(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}
double dot(const double* x, const double* y, std::size_t n) { return scalar::dot(x, y, n); }
void axpy(std::size_t n, double alpha, const double* x, double* y) { scalar::axpy(n, alpha, x, y); }

#endif

}  // namespace volssl::simd::avx2
