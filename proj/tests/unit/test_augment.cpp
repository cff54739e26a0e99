#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <cmath>
#include <numeric>
#include <random>

#include "volssl/augment.hpp"
#include "volssl/errors.hpp"
#include "volssl/prep.hpp"

using namespace volssl;

namespace {

CanonicalVolume random_canonical(Dims d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  CanonicalVolume c;
  c.voxels = Volume(d);
  for (auto& v : c.voxels.voxels()) v = n(rng);
  c.norm_stats = {-300.0, 500.0, d.count()};
  c.source_id = "rand";
  return c;
}

aug::AugmentConfig small_config() {
  aug::AugmentConfig c;
  c.global_target = {28, 28, 28};
  c.local_target = {14, 14, 14};
  return c;
}

std::vector<std::uint64_t> slice_checksums(const Volume& v) {
  std::vector<std::uint64_t> out;
  const std::size_t plane = v.dims().h * v.dims().w;
  for (std::size_t z = 0; z < v.dims().d; ++z) {
    std::uint64_t h = 1469598103934665603ull;
    for (std::size_t i = 0; i < plane; ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, &v.voxels()[z * plane + i], 4);
      h = (h ^ bits) * 1099511628211ull;
    }
    out.push_back(h);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST_CASE("views: identity config reproduces the resized source") {
  auto vol = random_canonical({30, 34, 32}, 1);
  auto cfg = aug::AugmentConfig::identity();
  cfg.global_target = {28, 28, 28};
  cfg.local_target = {14, 14, 14};
  auto b = aug::sample_views(vol, cfg, 5);
  const Volume resized = prep::resample_trilinear(
      vol.voxels, {prep::AxisMap{0, 30.0 / 28, 28}, prep::AxisMap{0, 34.0 / 28, 28}, prep::AxisMap{0, 32.0 / 28, 28}});
  REQUIRE(b.global_views.size() == 2);
  CHECK(b.global_views[0] == resized);
  CHECK(b.global_views[1] == resized);
}

TEST_CASE("views: counts, shapes, masks and determinism") {
  auto vol = random_canonical({40, 36, 44}, 2);
  auto cfg = small_config();
  auto a = aug::sample_views(vol, cfg, 77);
  auto b = aug::sample_views(vol, cfg, 77);
  CHECK(a.global_views.size() == 2);
  CHECK(a.local_views.size() == 8);
  CHECK(a.specs.size() == 10);
  CHECK(a.masks.size() == 2);
  for (const auto& v : a.global_views) CHECK(v.dims() == Dims{28, 28, 28});
  for (const auto& v : a.local_views) CHECK(v.dims() == Dims{14, 14, 14});
  for (const auto& m : a.masks) CHECK(m.count() == 4);
  CHECK(a.global_views == b.global_views);
  CHECK(a.local_views == b.local_views);
  CHECK(a.masks[0].masked == b.masks[0].masked);
  auto c = aug::sample_views(vol, cfg, 78);
  CHECK_FALSE(c.global_views == a.global_views);

  for (std::size_t i = 0; i < a.specs.size(); ++i) {
    const auto& s = a.specs[i];
    const aug::Range r = s.is_global ? cfg.global_scale : cfg.local_scale;
    CHECK(s.scale >= r.lo);
    CHECK(s.scale <= r.hi);
    const std::array<double, 3> dims{40, 36, 44};
    for (int ax = 0; ax < 3; ++ax) {
      CHECK(s.offset[ax] >= 0.0);
      CHECK(s.offset[ax] + s.extent[ax] <= dims[ax] + 1e-9);
    }
  }
}

TEST_CASE("views: undersized volumes and bad configs are rejected") {
  auto cfg = small_config();
  CHECK_THROWS_AS(aug::sample_views(random_canonical({10, 40, 40}, 3), cfg, 1), DataError);
  cfg.global_target = {30, 28, 28};
  CHECK_THROWS_AS(aug::sample_views(random_canonical({40, 40, 40}, 3), cfg, 1), ConfigError);
  cfg = small_config();
  cfg.local_scale = {0.3, 0.05};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("crop scale is uniform over the global range (KS)") {
  std::mt19937_64 rng(11);
  const Dims src{64, 64, 64};
  const aug::Range scale{0.30, 1.00};
  std::vector<double> frac;
  for (int i = 0; i < 10000; ++i) {
    auto c = aug::sample_crop(src, scale, {0.75, 1.33}, {28, 28, 28}, true, rng);
    // realised box volume, not the drawn parameter
    frac.push_back(c.extent[0] * c.extent[1] * c.extent[2] / static_cast<double>(src.count()));
    for (int a = 0; a < 3; ++a) REQUIRE(c.offset[a] + c.extent[a] <= 64.0 + 1e-9);
  }
  std::sort(frac.begin(), frac.end());
  double ks = 0.0;
  const double n = static_cast<double>(frac.size());
  for (std::size_t i = 0; i < frac.size(); ++i) {
    const double cdf = (frac[i] - scale.lo) / (scale.hi - scale.lo);
    ks = std::max({ks, std::abs(cdf - i / n), std::abs((i + 1) / n - cdf)});
  }
  CHECK(frac.front() >= 0.30 - 1e-9);
  CHECK(frac.back() <= 1.00 + 1e-9);
  CHECK(ks < 0.02);
}

TEST_CASE("crop aspect stays in range when the box fits without capping") {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 500; ++i) {
    auto c = aug::sample_crop({60, 60, 60}, {0.05, 0.30}, {0.75, 1.33}, {14, 14, 14}, false, rng);
    CHECK(c.aspect[0] * c.aspect[1] * c.aspect[2] == doctest::Approx(1.0));
    for (double a : c.aspect) {
      CHECK(a >= 0.75 / std::cbrt(1.33 * 1.33) - 1e-9);
      CHECK(a <= 1.33 / std::cbrt(0.75 * 0.75) + 1e-9);
    }
  }
}

TEST_CASE("window perturbation") {
  Volume ramp({1, 1, 9});
  for (std::size_t i = 0; i < 9; ++i) ramp.voxels()[i] = static_cast<float>(i) * 0.5f - 2.0f;
  const auto st = aug::iqr_stats(ramp.voxels());
  CHECK(st.iqr() == doctest::Approx(2.0));

  CHECK(aug::perturb_hu_window(ramp, st, 0.0, 0.0, 9, -10, 10) == ramp);

  // shift of +0.5 * IQR with IQR = 2
  auto shifted = aug::apply_window(ramp, st, 1.0, 0.5 * st.iqr(), -10, 10);
  for (std::size_t i = 0; i < 9; ++i) CHECK(shifted.voxels()[i] == doctest::Approx(ramp.voxels()[i] + 1.0));
  auto clamped = aug::apply_window(ramp, st, 1.0, 1.0, -10, 1.5);
  CHECK(clamped.voxels()[8] == doctest::Approx(1.5));

  Volume flat({2, 2, 2}, 0.3f);
  CHECK(aug::perturb_hu_window(flat, aug::iqr_stats(flat.voxels()), 0.5, 0.1, 3, -10, 10) == flat);

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto p = aug::perturb_hu_window(ramp, st, 0.5, 0.1, seed, -10, 10);
    for (std::size_t i = 1; i < 9; ++i) CHECK(p.voxels()[i] > p.voxels()[i - 1]);
    const double shift = p.voxels()[4] - st.median;  // the median is the pivot
    CHECK(std::abs(shift) <= 0.5 * st.iqr() + 1e-6);
  }
}

TEST_CASE("slice permutation and flips") {
  Volume v({4, 2, 3});
  for (std::size_t i = 0; i < v.size(); ++i) v.voxels()[i] = static_cast<float>(i);
  CHECK(aug::permute_slices(v, 0, std::vector<std::size_t>{0, 1, 2, 3}) == v);
  auto rev = aug::permute_slices(v, 0, std::vector<std::size_t>{3, 2, 1, 0});
  for (std::size_t z = 0; z < 4; ++z)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 3; ++x) CHECK(rev.at(z, y, x) == v.at(3 - z, y, x));
  CHECK(aug::flip(v, 0) == rev);
  CHECK(aug::flip(aug::flip(v, 2), 2) == v);
  CHECK(aug::flip(v, 1).at(0, 0, 2) == v.at(0, 1, 2));
  CHECK_THROWS_AS(aug::permute_slices(v, 0, std::vector<std::size_t>{0, 0, 1, 2}), DataError);

  std::mt19937_64 rng(8);
  std::normal_distribution<float> n;
  Volume big({9, 5, 6});
  for (auto& x : big.voxels()) x = n(rng);
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    auto p = aug::permute_slices(big, 0, seed);
    CHECK(slice_checksums(p) == slice_checksums(big));
    for (int axis = 0; axis < 3; ++axis) {
      auto f = aug::permute_slices(big, axis, seed);
      auto a = f.voxels(), b = big.voxels();
      std::sort(a.begin(), a.end());
      std::sort(b.begin(), b.end());
      CHECK(a == b);
    }
  }
}

TEST_CASE("mask sampling") {
  CHECK(aug::sample_mask(512, 0.5, 1).count() == 256);
  CHECK(aug::sample_mask(512, 0.0, 1).count() == 0);
  CHECK(aug::sample_mask(512, 1.0, 1).count() == 512);
  CHECK(aug::sample_mask(7, 0.5, 1).count() == 4);
  CHECK(aug::sample_mask(64, 0.5, 9).masked == aug::sample_mask(64, 0.5, 9).masked);
  CHECK_THROWS_AS(aug::sample_mask(8, 1.5, 1), ConfigError);

  std::vector<int> hits(8, 0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    auto m = aug::sample_mask(8, 0.5, aug::derive_seed(123, i));
    REQUIRE(m.count() == 4);
    for (int j = 0; j < 8; ++j) hits[j] += m.masked[j];
  }
  for (int h : hits) CHECK(std::abs(h / static_cast<double>(draws) - 0.5) <= 0.02);
}

TEST_CASE("flips and permutations preserve the view histogram inside sample_views") {
  auto vol = random_canonical({32, 32, 32}, 6);
  auto cfg = aug::AugmentConfig::identity();
  cfg.global_target = {28, 28, 28};
  cfg.local_target = {14, 14, 14};
  cfg.flip_prob = 1.0;
  cfg.slice_perm_prob = 1.0;
  auto plain = aug::AugmentConfig::identity();
  plain.global_target = cfg.global_target;
  plain.local_target = cfg.local_target;
  auto a = aug::sample_views(vol, cfg, 3);
  auto b = aug::sample_views(vol, plain, 3);
  for (std::size_t i = 0; i < 2; ++i) {
    auto x = a.global_views[i].voxels(), y = b.global_views[i].voxels();
    CHECK_FALSE(x == y);
    std::sort(x.begin(), x.end());
    std::sort(y.begin(), y.end());
    CHECK(x == y);
  }
}
