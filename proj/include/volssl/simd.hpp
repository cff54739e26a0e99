#pragma once
// Dense double-precision kernels with a scalar reference path and an AVX2/FMA
// path selected at runtime. All hot loops of the autograd engine go through here.

#include <cstddef>
#include <string_view>

namespace volssl::simd {

enum class Isa { scalar, avx2 };

/// Best instruction set supported by the running CPU and compiled in.
Isa detected_isa();

/// Instruction set currently used by the dispatching entry points.
Isa active_isa();

/// Pin the dispatch target. Requesting avx2 on a machine without it falls
/// back to scalar. The scalar path is the fixed-precision reference mode.
void set_isa(Isa isa);

std::string_view isa_name(Isa isa);

/// RAII override of the active ISA, restored on scope exit.
class IsaScope {
 public:
  explicit IsaScope(Isa isa) : saved_(active_isa()) { set_isa(isa); }
  ~IsaScope() { set_isa(saved_); }
  IsaScope(const IsaScope&) = delete;
  IsaScope& operator=(const IsaScope&) = delete;

 private:
  Isa saved_;
};

// C = alpha * op(A) * op(B) + beta * C, row-major, op(X) = X or X^T.
// op(A) is M x K, op(B) is K x N. beta == 0 overwrites C (NaNs in C ignored).
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta, double* c,
          std::size_t ldc);

double dot(const double* x, const double* y, std::size_t n);

// y += alpha * x
void axpy(std::size_t n, double alpha, const double* x, double* y);

// Per-ISA entry points, exposed for equivalence tests.
namespace scalar {
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta, double* c,
          std::size_t ldc);
double dot(const double* x, const double* y, std::size_t n);
void axpy(std::size_t n, double alpha, const double* x, double* y);
}  // namespace scalar

namespace avx2 {
bool compiled();
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta, double* c,
          std::size_t ldc);
double dot(const double* x, const double* y, std::size_t n);
void axpy(std::size_t n, double alpha, const double* x, double* y);
}  // namespace avx2

}  // namespace volssl::simd
