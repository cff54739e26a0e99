#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "volssl/simd.hpp"

using namespace volssl;

namespace {

std::vector<double> rand_vec(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

}  // namespace

TEST_CASE("dispatch reports a usable ISA and can be pinned") {
  const auto before = simd::active_isa();
  {
    simd::IsaScope scope(simd::Isa::scalar);
    CHECK(simd::active_isa() == simd::Isa::scalar);
  }
  CHECK(simd::active_isa() == before);
  MESSAGE("detected ISA: " << simd::isa_name(simd::detected_isa()));
}

TEST_CASE("avx2 gemm matches scalar reference across shapes and transposes") {
  if (simd::detected_isa() != simd::Isa::avx2) {
    MESSAGE("AVX2 unavailable, equivalence trivially holds");
    return;
  }
  std::mt19937_64 rng(11);
  const std::size_t sizes[] = {1, 3, 4, 5, 7, 8, 9, 17, 33, 130, 257};
  for (bool ta : {false, true})
    for (bool tb : {false, true})
      for (std::size_t m : sizes)
        for (std::size_t n : {std::size_t{1}, std::size_t{6}, std::size_t{8}, std::size_t{13}, std::size_t{300}})
          for (std::size_t k : {std::size_t{1}, std::size_t{5}, std::size_t{129}}) {
            auto a = rand_vec(m * k, rng), b = rand_vec(k * n, rng), c0 = rand_vec(m * n, rng);
            auto c1 = c0;
            const std::size_t lda = ta ? m : k, ldb = tb ? k : n;
            simd::scalar::gemm(ta, tb, m, n, k, 0.7, a.data(), lda, b.data(), ldb, 0.3, c0.data(), n);
            simd::avx2::gemm(ta, tb, m, n, k, 0.7, a.data(), lda, b.data(), ldb, 0.3, c1.data(), n);
            double err = 0.0;
            for (std::size_t i = 0; i < c0.size(); ++i) err = std::max(err, std::abs(c0[i] - c1[i]));
            REQUIRE(err < 1e-11 * static_cast<double>(k + 1));
          }
}

TEST_CASE("gemm with beta zero ignores garbage in C") {
  std::vector<double> a{1, 2, 3, 4}, b{1, 0, 0, 1};
  for (auto isa : {simd::Isa::scalar, simd::Isa::avx2}) {
    simd::IsaScope scope(isa);
    std::vector<double> c{NAN, NAN, NAN, NAN};
    simd::gemm(false, false, 2, 2, 2, 1.0, a.data(), 2, b.data(), 2, 0.0, c.data(), 2);
    CHECK(c == std::vector<double>{1, 2, 3, 4});
  }
}

TEST_CASE("avx2 dot and axpy match scalar including tails") {
  std::mt19937_64 rng(5);
  for (std::size_t n = 0; n < 40; ++n) {
    auto x = rand_vec(n, rng), y = rand_vec(n, rng);
    CHECK(simd::avx2::dot(x.data(), y.data(), n) == doctest::Approx(simd::scalar::dot(x.data(), y.data(), n)).epsilon(1e-12));
    auto y0 = y, y1 = y;
    simd::scalar::axpy(n, -1.25, x.data(), y0.data());
    simd::avx2::axpy(n, -1.25, x.data(), y1.data());
    for (std::size_t i = 0; i < n; ++i) CHECK(y0[i] == doctest::Approx(y1[i]).epsilon(1e-14));
  }
}

TEST_CASE("each ISA path is bitwise deterministic") {
  std::mt19937_64 rng(3);
  auto a = rand_vec(37 * 53, rng), b = rand_vec(53 * 29, rng);
  for (auto isa : {simd::Isa::scalar, simd::Isa::avx2}) {
    simd::IsaScope scope(isa);
    std::vector<double> c1(37 * 29), c2(37 * 29);
    simd::gemm(false, false, 37, 29, 53, 1.0, a.data(), 53, b.data(), 29, 0.0, c1.data(), 29);
    simd::gemm(false, false, 37, 29, 53, 1.0, a.data(), 53, b.data(), 29, 0.0, c2.data(), 29);
    CHECK(c1 == c2);
  }
}
