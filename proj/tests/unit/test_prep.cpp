#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <map>
#include <random>

#include "volssl/errors.hpp"
#include "volssl/prep.hpp"

using namespace volssl;
namespace fs = std::filesystem;

namespace {

// Independent per-voxel trilinear resampler: physical centres, edge-cell
// extrapolation inside the half-voxel rim, clamping outside it.
double oracle_sample(const Volume& v, double cz, double cy, double cx) {
  auto axis = [](double c, std::size_t n, std::size_t& i0, double& w) {
    const double last = static_cast<double>(n - 1);
    if (c < -0.5 || c > last + 0.5) c = std::min(std::max(c, 0.0), last);
    double cell = std::floor(c);
    if (cell < 0) cell = 0;
    if (cell > last - 1) cell = last - 1;
    i0 = static_cast<std::size_t>(cell);
    w = c - cell;
  };
  std::size_t z0, y0, x0;
  double wz, wy, wx;
  axis(cz, v.dims().d, z0, wz);
  axis(cy, v.dims().h, y0, wy);
  axis(cx, v.dims().w, x0, wx);
  double s = 0.0;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b)
      for (int c = 0; c < 2; ++c) {
        const double wgt = (a ? wz : 1 - wz) * (b ? wy : 1 - wy) * (c ? wx : 1 - wx);
        s += wgt * v.at(z0 + a, y0 + b, x0 + c);
      }
  return s;
}

RawVolume ramp_volume(Dims d, Vec3 spacing) {
  RawVolume r;
  r.voxels = Volume(d);
  r.spacing = spacing;
  for (std::size_t z = 0; z < d.d; ++z)
    for (std::size_t y = 0; y < d.h; ++y)
      for (std::size_t x = 0; x < d.w; ++x) r.voxels.at(z, y, x) = static_cast<float>(z * spacing.z);
  r.source_id = "ramp";
  return r;
}

CanonicalVolume canonical_from_hu(const Volume& hu) {
  RawVolume r;
  r.voxels = hu;
  return prep::clip_and_normalize(r, {-300.0, 500.0, 1});
}

}  // namespace

TEST_CASE("resample: anisotropic ramp becomes isotropic and stays exact") {
  // 100x100x50 voxels (x,y,z) at (1,1,2) mm.
  auto raw = ramp_volume({50, 100, 100}, {1.0, 1.0, 2.0});
  auto out = prep::resample_isotropic(raw, 768);
  CHECK(out.voxels.dims() == Dims{100, 100, 100});
  CHECK(out.spacing == Vec3{1.0, 1.0, 1.0});
  for (std::size_t z = 0; z < 100; ++z) {
    const double phys_z = out.origin.z + static_cast<double>(z) * out.spacing.z;
    CHECK(out.voxels.at(z, 37, 11) == doctest::Approx(phys_z).epsilon(1e-6));
    CHECK(out.voxels.at(z, 0, 99) == doctest::Approx(phys_z).epsilon(1e-6));
  }
}

TEST_CASE("resample: matches an independent scalar-loop resampler on random data") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<float> u(-1000, 1000);
  RawVolume raw;
  raw.voxels = Volume({7, 9, 6});
  for (auto& v : raw.voxels.voxels()) v = u(rng);
  raw.spacing = {0.8, 1.1, 2.3};
  auto out = prep::resample_isotropic(raw, 768);
  const double s = out.spacing.x;
  for (std::size_t z = 0; z < out.voxels.dims().d; ++z)
    for (std::size_t y = 0; y < out.voxels.dims().h; ++y)
      for (std::size_t x = 0; x < out.voxels.dims().w; ++x) {
        const double e = oracle_sample(raw.voxels, (z + 0.5) * s / 2.3 - 0.5, (y + 0.5) * s / 1.1 - 0.5,
                                       (x + 0.5) * s / 0.8 - 0.5);
        REQUIRE(out.voxels.at(z, y, x) == doctest::Approx(e).epsilon(1e-5));
      }
}

TEST_CASE("resample: exact on general affine fields") {
  RawVolume raw;
  raw.voxels = Volume({12, 10, 8});
  raw.spacing = {0.9, 1.3, 2.0};
  auto f = [](double px, double py, double pz) { return 3.0 + 0.5 * px - 1.5 * py + 2.0 * pz; };
  for (std::size_t z = 0; z < 12; ++z)
    for (std::size_t y = 0; y < 10; ++y)
      for (std::size_t x = 0; x < 8; ++x) raw.voxels.at(z, y, x) = static_cast<float>(f(x * 0.9, y * 1.3, z * 2.0));
  auto out = prep::resample_isotropic(raw, 768);
  const double s = out.spacing.x;
  double worst = 0.0;
  for (std::size_t z = 0; z < out.voxels.dims().d; ++z)
    for (std::size_t y = 0; y < out.voxels.dims().h; ++y)
      for (std::size_t x = 0; x < out.voxels.dims().w; ++x) {
        const double e = f(out.origin.x + x * s, out.origin.y + y * s, out.origin.z + z * s);
        worst = std::max(worst, std::abs(out.voxels.at(z, y, x) - e) / std::max(1.0, std::abs(e)));
      }
  CHECK(worst < 1e-6);
}

TEST_CASE("resample: already isotropic input is untouched") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> u(-1000, 1000);
  RawVolume raw;
  raw.voxels = Volume({64, 64, 64});
  for (auto& v : raw.voxels.voxels()) v = u(rng);
  raw.spacing = {0.7, 0.7, 0.7};
  auto out = prep::resample_isotropic(raw, 768);
  CHECK(out.voxels == raw.voxels);
  CHECK(out.spacing == raw.spacing);
}

TEST_CASE("resample: side limit drives spacing") {
  auto plan = prep::plan_isotropic({1024, 512, 512}, {0.5, 0.5, 0.5}, 768);
  CHECK(plan.spacing == doctest::Approx(0.5 * 1024.0 / 768.0));
  CHECK(plan.dims == Dims{768, 384, 384});
  CHECK(plan.spacing * 768 == doctest::Approx(1024 * 0.5));

  // Same rule executed on a small analogue.
  auto raw = ramp_volume({64, 32, 32}, {0.5, 0.5, 0.5});
  auto out = prep::resample_isotropic(raw, 48);
  CHECK(out.voxels.dims() == Dims{48, 24, 24});
  CHECK(out.spacing.x == doctest::Approx(0.5 * 64.0 / 48.0));
}

TEST_CASE("resample: degenerate volumes are rejected") {
  RawVolume raw;
  raw.voxels = Volume({1, 10, 10});
  CHECK_THROWS_AS(prep::resample_isotropic(raw, 768), DataError);
}

TEST_CASE("clip and normalise follows the formula") {
  RawVolume raw;
  raw.voxels = Volume({1, 1, 3}, std::vector<float>{2500.0f, -300.0f, -1500.0f});
  auto c = prep::clip_and_normalize(raw, {-300.0, 500.0, 1});
  CHECK(c.voxels.voxels()[0] == doctest::Approx(4.4));
  CHECK(c.voxels.voxels()[1] == doctest::Approx(0.0));
  CHECK(c.voxels.voxels()[2] == doctest::Approx(-1.4));
  CHECK(c.norm_stats.mu_hu == -300.0);

  raw.voxels.voxels()[1] = NAN;
  CHECK_THROWS_AS(prep::clip_and_normalize(raw, {-300.0, 500.0, 1}), DataError);
  CHECK_THROWS(prep::clip_and_normalize(raw, {-300.0, 0.0, 1}));
}

TEST_CASE("clip and normalise is monotone and idempotent after inverting the affine map") {
  RawVolume raw;
  std::vector<float> v;
  for (int i = -2000; i <= 3000; i += 50) v.push_back(static_cast<float>(i));
  raw.voxels = Volume({1, 1, v.size()}, v);
  const GlobalNormStats st{-100.0, 300.0, 1};
  auto c = prep::clip_and_normalize(raw, st);
  for (std::size_t i = 1; i < v.size(); ++i) CHECK(c.voxels.voxels()[i] >= c.voxels.voxels()[i - 1]);
  RawVolume back = raw;
  for (std::size_t i = 0; i < v.size(); ++i) back.voxels.voxels()[i] = static_cast<float>(c.voxels.voxels()[i] * st.sigma_hu + st.mu_hu);
  auto c2 = prep::clip_and_normalize(back, st);
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(c2.voxels.voxels()[i] == doctest::Approx(c.voxels.voxels()[i]).epsilon(1e-6));
}

TEST_CASE("norm stats: pooled moments and degenerate cases") {
  RawVolume a, b;
  a.voxels = Volume({1, 1, 2}, 0.0f);
  b.voxels = Volume({1, 1, 2}, 2.0f);
  std::vector<RawVolume> vols{a, b};
  auto st = prep::accumulate_norm_stats(vols);
  CHECK(st.mu_hu == doctest::Approx(1.0));
  CHECK(st.sigma_hu == doctest::Approx(1.0));

  prep::NormAccumulator acc;
  acc.add(Volume({2, 2, 2}, 40.0f).voxels());
  CHECK(acc.mean() == doctest::Approx(40.0));
  CHECK_THROWS_AS(acc.finish(), NumericalError);
  CHECK_THROWS_AS(prep::accumulate_norm_stats(std::span<const RawVolume>{}), DataError);
}

TEST_CASE("norm stats: merging partial statistics equals a single pass") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<float> u(-1200, 2000);
  std::vector<RawVolume> vols(6);
  std::vector<double> all;
  for (auto& v : vols) {
    v.voxels = Volume({8, 8, 8});
    for (auto& x : v.voxels.voxels()) {
      x = u(rng);
      all.push_back(prep::clip_hu(x));
    }
  }
  // single-pass oracle over the concatenated voxels
  const double mu = std::accumulate(all.begin(), all.end(), 0.0) / static_cast<double>(all.size());
  double ss = 0.0;
  for (double x : all) ss += (x - mu) * (x - mu);
  const double sigma = std::sqrt(ss / static_cast<double>(all.size()));

  prep::NormAccumulator left, right, chained;
  for (int i = 0; i < 3; ++i) left.add(vols[i]);
  for (int i = 5; i >= 3; --i) right.add(vols[i]);
  for (auto& v : vols) chained.add(v);
  prep::NormAccumulator merged = right;
  merged.merge(left);
  CHECK(std::abs(merged.mean() - mu) < 1e-9);
  CHECK(std::abs(merged.stddev() - sigma) < 1e-9);
  CHECK(std::abs(chained.mean() - mu) < 1e-9);
  CHECK(std::abs(chained.stddev() - sigma) < 1e-9);
}

TEST_CASE("strip background: sphere phantom cropped to its extent") {
  Volume hu({64, 64, 64}, -1000.0f);
  const double r = 16.0, c = 31.5;
  for (std::size_t z = 0; z < 64; ++z)
    for (std::size_t y = 0; y < 64; ++y)
      for (std::size_t x = 0; x < 64; ++x) {
        const double d2 = (z - c) * (z - c) + (y - c) * (y - c) + (x - c) * (x - c);
        if (d2 <= r * r) hu.at(z, y, x) = 0.0f;
      }
  auto res = prep::strip_background(canonical_from_hu(hu), -500.0);
  CHECK_FALSE(res.no_foreground);
  const auto d = res.volume.voxels.dims();
  for (std::size_t side : {d.d, d.h, d.w}) CHECK(std::abs(static_cast<double>(side) - 2 * r) <= 1.0);
  for (long off : res.volume.crop_offset) CHECK(std::abs(static_cast<double>(off) - (c - r)) <= 1.0);

  auto again = prep::strip_background(res.volume, -500.0);
  CHECK(again.volume.voxels == res.volume.voxels);
  CHECK(again.volume.crop_offset == res.volume.crop_offset);
}

TEST_CASE("strip background: full foreground is an identity crop, empty flags a warning") {
  Volume hu({5, 6, 7}, 100.0f);
  auto res = prep::strip_background(canonical_from_hu(hu), -500.0);
  CHECK(res.volume.voxels == canonical_from_hu(hu).voxels);
  CHECK(res.volume.crop_offset == std::array<long, 3>{0, 0, 0});

  Volume air({5, 6, 7}, -1000.0f);
  auto none = prep::strip_background(canonical_from_hu(air), -500.0);
  CHECK(none.no_foreground);
  CHECK(none.volume.voxels == canonical_from_hu(air).voxels);
  CHECK_THROWS_AS(prep::strip_background(canonical_from_hu(air), -1500.0), ConfigError);
}

namespace {
// Union-find labelling used as an oracle for largest_component.
struct Dsu {
  std::vector<std::size_t> p;
  explicit Dsu(std::size_t n) : p(n) { std::iota(p.begin(), p.end(), 0); }
  std::size_t find(std::size_t x) { return p[x] == x ? x : p[x] = find(p[x]); }
  void unite(std::size_t a, std::size_t b) { p[find(a)] = find(b); }
};
}  // namespace

TEST_CASE("strip background: keeps only the larger of two components") {
  Volume hu({12, 12, 12}, -1000.0f);
  // 100-voxel slab (4x5x5) and a 10-voxel bar.
  for (std::size_t z = 1; z < 5; ++z)
    for (std::size_t y = 1; y < 6; ++y)
      for (std::size_t x = 1; x < 6; ++x) hu.at(z, y, x) = 50.0f;
  for (std::size_t x = 0; x < 10; ++x) hu.at(10, 10, x) = 50.0f;

  const Dims d = hu.dims();
  Dsu dsu(d.count());
  for (std::size_t z = 0; z < d.d; ++z)
    for (std::size_t y = 0; y < d.h; ++y)
      for (std::size_t x = 0; x < d.w; ++x) {
        if (hu.at(z, y, x) <= -500) continue;
        if (x + 1 < d.w && hu.at(z, y, x + 1) > -500) dsu.unite(hu.index(z, y, x), hu.index(z, y, x + 1));
        if (y + 1 < d.h && hu.at(z, y + 1, x) > -500) dsu.unite(hu.index(z, y, x), hu.index(z, y + 1, x));
        if (z + 1 < d.d && hu.at(z + 1, y, x) > -500) dsu.unite(hu.index(z, y, x), hu.index(z + 1, y, x));
      }
  std::map<std::size_t, std::size_t> sizes;
  for (std::size_t i = 0; i < d.count(); ++i)
    if (hu.voxels()[i] > -500) ++sizes[dsu.find(i)];
  REQUIRE(sizes.size() == 2);
  std::vector<std::size_t> counts;
  for (auto& [root, n] : sizes) counts.push_back(n);
  std::sort(counts.begin(), counts.end());
  CHECK(counts == std::vector<std::size_t>{10, 100});

  auto res = prep::strip_background(canonical_from_hu(hu), -500.0);
  CHECK(res.volume.voxels.dims() == Dims{4, 5, 5});
  CHECK(res.volume.crop_offset == std::array<long, 3>{1, 1, 1});
}

TEST_CASE("volume files round-trip through sidecar and NIfTI readers") {
  const fs::path dir = fs::temp_directory_path() / "volssl_test_io";
  fs::remove_all(dir);
  RawVolume raw = ramp_volume({3, 4, 5}, {0.5, 0.75, 1.5});
  raw.origin = {1, 2, 3};
  write_raw_volume(dir / "a", raw);
  write_nifti(dir / "b.nii", raw);
  auto a = read_raw_volume(dir / "a.json");
  auto b = read_raw_volume(dir / "b.nii");
  CHECK(a.voxels == raw.voxels);
  CHECK(b.voxels == raw.voxels);
  CHECK(a.spacing == raw.spacing);
  CHECK(b.spacing.z == doctest::Approx(1.5));
  CHECK(list_volume_inputs(dir).size() == 2);

  CanonicalVolume c = prep::clip_and_normalize(raw, {0.0, 2.0, 60});
  c.crop_offset = {1, 2, 3};
  write_canonical_volume(dir / "c", c);
  auto c2 = read_canonical_volume(dir / "c.json");
  CHECK(c2.voxels == c.voxels);
  CHECK(c2.crop_offset == c.crop_offset);
  CHECK(c2.norm_stats.sigma_hu == 2.0);

  // Truncated payloads are rejected.
  auto bytes = read_binary(dir / "a.vol");
  write_binary_atomic(dir / "a.vol", bytes.substr(0, bytes.size() - 4));
  CHECK_THROWS_AS(read_raw_volume(dir / "a.json"), DataError);
  fs::remove_all(dir);
}
