#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "volssl/errors.hpp"
#include "volssl/metrics.hpp"

using namespace volssl;
namespace m = volssl::metrics;

namespace {

double auroc_pairs(const std::vector<double>& s, const std::vector<std::uint8_t>& l) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (l[i] && !l[j]) {
        den += 1.0;
        num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return num / den;
}

double c_index_pairs(const std::vector<double>& r, const std::vector<double>& t, const std::vector<std::uint8_t>& e) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i)
    for (std::size_t j = 0; j < r.size(); ++j) {
      if (i == j || !e[i] || t[i] >= t[j]) continue;
      den += 1.0;
      num += r[i] > r[j] ? 1.0 : (r[i] == r[j] ? 0.5 : 0.0);
    }
  return num / den;
}

}  // namespace

TEST_CASE("auroc: separation, single class and the pairwise oracle") {
  std::vector<double> s{0.1, 0.2, 0.8, 0.9};
  std::vector<std::uint8_t> l{0, 0, 1, 1};
  const auto r = m::auroc(s, l);
  CHECK(r.point == 1.0);
  CHECK(r.se == 0.0);
  CHECK(r.ci_hi == 1.0);
  CHECK(r.method == "hanley_mcneil");
  std::vector<std::uint8_t> one{1, 1, 1, 1};
  CHECK_THROWS_AS(m::auroc(s, one), DataError);

  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> coarse(0, 5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> sc(20);
    std::vector<std::uint8_t> lb(20);
    for (std::size_t i = 0; i < 20; ++i) {
      sc[i] = coarse(rng) * 0.25;  // forces ties
      lb[i] = i % 2 ? 1 : (rng() % 2);
    }
    lb[0] = 0;
    CHECK(m::auroc_value(sc, lb) == auroc_pairs(sc, lb));

    // Strictly monotone transform and sample permutation leave it unchanged.
    std::vector<double> tr(sc.size());
    for (std::size_t i = 0; i < sc.size(); ++i) tr[i] = std::exp(3.0 * sc[i]) - 7.0;
    CHECK(m::auroc_value(tr, lb) == m::auroc_value(sc, lb));
    std::vector<std::size_t> perm(20);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> ps;
    std::vector<std::uint8_t> pl;
    for (auto i : perm) {
      ps.push_back(sc[i]);
      pl.push_back(lb[i]);
    }
    CHECK(m::auroc_value(ps, pl) == m::auroc_value(sc, lb));
  }
}

TEST_CASE("Hanley-McNeil SE at A=0.5 with 10 per class") {
  CHECK(m::hanley_mcneil_se(0.5, 10, 10) == doctest::Approx(std::sqrt(1.75 / 100.0)).epsilon(1e-12));
  CHECK(std::abs(m::hanley_mcneil_se(0.5, 10, 10) - 0.1323) < 1e-4);

  // A set with AUROC exactly 0.5: positive ranks sum to 105.
  std::vector<double> s(20);
  std::vector<std::uint8_t> l(20, 0);
  for (std::size_t i = 0; i < 20; ++i) s[i] = static_cast<double>(i + 1);
  for (int r : {1, 4, 5, 8, 9, 12, 13, 16, 17, 20}) l[r - 1] = 1;
  const auto hm = m::auroc(s, l);
  CHECK(hm.point == 0.5);
  const auto boot = m::bootstrap_ci(
      "auroc",
      [&](std::span<const std::size_t> idx) {
        std::vector<double> bs;
        std::vector<std::uint8_t> bl;
        for (auto i : idx) {
          bs.push_back(s[i]);
          bl.push_back(l[i]);
        }
        return m::auroc_value(bs, bl);
      },
      20, 10000, 3);
  CHECK(std::abs(boot.se - hm.se) / hm.se < 0.2);
}

TEST_CASE("bootstrap: determinism, constant metrics, normal-mean width") {
  std::vector<double> x(100);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g;
  for (double& v : x) v = g(rng);
  auto mean = [&](std::span<const std::size_t> idx) {
    double s = 0.0;
    for (auto i : idx) s += x[i];
    return s / static_cast<double>(idx.size());
  };
  const auto a = m::bootstrap_ci("mean", mean, 100, 10000, 9);
  const auto b = m::bootstrap_ci("mean", mean, 100, 10000, 9);
  CHECK(a == b);
  CHECK(std::abs((a.ci_hi - a.ci_lo) - 0.392) / 0.392 < 0.2);
  CHECK(a.ci_lo <= a.point);
  CHECK(a.point <= a.ci_hi);

  const auto c = m::bootstrap_ci("const", [](std::span<const std::size_t>) { return 1.0; }, 10, 500, 1);
  CHECK(c.ci_lo == c.ci_hi);
  CHECK(c.se == 0.0);

  CHECK_THROWS_AS(m::bootstrap_ci("x", mean, 1, 10, 1), DataError);
}

TEST_CASE("bootstrap: undefined resamples are redrawn up to the cap") {
  // Two positives among 10 rows: some resamples draw no positive at all.
  std::vector<double> s{0.9, 0.8, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.35, 0.45};
  std::vector<std::uint8_t> l{1, 1, 0, 0, 0, 0, 0, 0, 0, 0};
  auto metric = [&](std::span<const std::size_t> idx) {
    std::vector<double> bs;
    std::vector<std::uint8_t> bl;
    for (auto i : idx) {
      bs.push_back(s[i]);
      bl.push_back(l[i]);
    }
    return m::auroc_value(bs, bl);
  };
  const auto r = m::bootstrap_ci("auroc", metric, 10, 200, 2, 1000);
  CHECK(r.redraws > 0);
  CHECK(r.point == 1.0);
  CHECK_THROWS_AS(m::bootstrap_ci("auroc", metric, 10, 2000, 2, 5), NumericalError);
}

TEST_CASE("bootstrap SE of AUROC agrees with Hanley-McNeil on balanced data") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g;
  std::vector<double> s(200);
  std::vector<std::uint8_t> l(200);
  for (std::size_t i = 0; i < 200; ++i) {
    l[i] = i % 2;
    s[i] = g(rng) + (l[i] ? 1.0 : 0.0);
  }
  const auto hm = m::auroc(s, l);
  const auto boot = m::bootstrap_ci(
      "auroc",
      [&](std::span<const std::size_t> idx) {
        std::vector<double> bs;
        std::vector<std::uint8_t> bl;
        for (auto i : idx) {
          bs.push_back(s[i]);
          bl.push_back(l[i]);
        }
        return m::auroc_value(bs, bl);
      },
      200, 2000, 6);
  CHECK(std::abs(boot.se - hm.se) / hm.se < 0.25);
}

TEST_CASE("c-index: extremes, brute force and sign symmetry") {
  std::vector<double> t{1, 2, 3, 4, 5};
  std::vector<std::uint8_t> e{1, 1, 1, 1, 1};
  CHECK(m::c_index(std::vector<double>{5, 4, 3, 2, 1}, t, e) == 1.0);
  CHECK(m::c_index(std::vector<double>(5, 0.3), t, e) == 0.5);

  std::vector<double> t6{2, 5, 3, 8, 6, 4};
  std::vector<std::uint8_t> e6{1, 0, 1, 1, 0, 1};
  std::vector<double> r6{0.9, 0.1, 0.4, -0.2, 0.3, 0.5};
  CHECK(m::c_index(r6, t6, e6) == c_index_pairs(r6, t6, e6));
  std::vector<double> neg(r6.size());
  for (std::size_t i = 0; i < r6.size(); ++i) neg[i] = -r6[i];
  CHECK(m::c_index(neg, t6, e6) == doctest::Approx(1.0 - m::c_index(r6, t6, e6)).epsilon(1e-15));

  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> r(12), tt(12);
    std::vector<std::uint8_t> ee(12);
    for (std::size_t i = 0; i < 12; ++i) {
      r[i] = std::round(u(rng) * 4);
      tt[i] = std::round(u(rng) * 6) + 1;
      ee[i] = u(rng) < 0.6;
    }
    ee[0] = 1;
    tt[0] = 0.5;
    CHECK(m::c_index(r, tt, ee) == c_index_pairs(r, tt, ee));
  }
  CHECK_THROWS_AS(m::c_index(std::vector<double>{1, 2}, std::vector<double>{1, 2}, std::vector<std::uint8_t>{0, 0}),
                  DataError);
}

TEST_CASE("time-dependent AUROC excludes early censoring") {
  std::vector<double> r{3, 2, 1, 0, 5};
  std::vector<double> t{100, 500, 2000, 3000, 200};
  std::vector<std::uint8_t> e{1, 1, 0, 0, 0};
  // Subject 4 is censored before the horizon and dropped.
  CHECK(m::time_auroc(r, t, e, 1095) == 1.0);
}

TEST_CASE("dice: identity, hand counts and a voxel oracle") {
  std::vector<std::int32_t> truth(64, 0), pred(64, 0);
  for (int i = 0; i < 8; ++i) truth[i] = pred[i] = 1;
  for (int i = 8; i < 16; ++i) truth[i] = 2;
  for (int i = 16; i < 24; ++i) pred[i] = 2;
  auto same = m::dice(truth, truth, 3);
  CHECK(same.micro == 1.0);
  CHECK(same.macro == 1.0);
  auto d = m::dice(pred, truth, 3);
  CHECK(d.per_class[1] == 1.0);
  CHECK(d.per_class[2] == 0.0);
  CHECK(d.macro == 0.5);
  CHECK(d.micro == doctest::Approx(16.0 / 32.0));

  auto absent = m::dice(truth, truth, 4);
  CHECK(absent.absent == std::vector<std::size_t>{3});
  CHECK(std::isnan(absent.per_class[3]));
  CHECK(absent.macro == 1.0);

  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::int32_t> p(512), t(512);
    for (std::size_t i = 0; i < 512; ++i) {
      p[i] = static_cast<std::int32_t>(rng() % 3);
      t[i] = static_cast<std::int32_t>(rng() % 3);
    }
    const auto r = m::dice(p, t, 3);
    double macro = 0.0;
    std::size_t tp_all = 0, sz_all = 0;
    for (int c = 1; c < 3; ++c) {
      std::size_t tp = 0, np = 0, nt = 0;
      for (std::size_t i = 0; i < 512; ++i) {
        tp += p[i] == c && t[i] == c;
        np += p[i] == c;
        nt += t[i] == c;
      }
      const double dc = 2.0 * static_cast<double>(tp) / static_cast<double>(np + nt);
      CHECK(r.per_class[c] == dc);
      macro += dc / 2.0;
      tp_all += tp;
      sz_all += np + nt;
    }
    CHECK(r.macro == doctest::Approx(macro).epsilon(1e-15));
    CHECK(r.micro == 2.0 * static_cast<double>(tp_all) / static_cast<double>(sz_all));
  }
  CHECK_THROWS_AS(m::dice(std::vector<std::int32_t>{0}, std::vector<std::int32_t>{0, 1}, 2), DataError);
}

TEST_CASE("dice: micro equals macro when classes share confusion counts") {
  std::vector<std::int32_t> t{1, 1, 2, 2, 0, 0, 0, 0}, p{1, 0, 2, 0, 1, 2, 0, 0};
  const auto r = m::dice(p, t, 3);
  CHECK(r.micro == doctest::Approx(r.macro).epsilon(1e-15));
}

TEST_CASE("significance: equal, boundary and the table-style pair") {
  m::MetricReport a{"a", 0.7, 0.01, 0, 0, 10, "hanley_mcneil"};
  CHECK(m::significance_test(a, a).p == 1.0);
  auto b = a;
  b.point = a.point - 1.959963984540054 * std::sqrt(2.0) * 0.01;
  CHECK(m::significance_test(a, b).p == doctest::Approx(0.05).epsilon(1e-9));

  m::MetricReport ours{"auroc", 0.870, 0.006, 0, 0, 0, "hanley_mcneil"};
  m::MetricReport theirs{"auroc", 0.798, 0.006, 0, 0, 0, "hanley_mcneil"};
  const auto s = m::significance_test(ours, theirs);
  CHECK(s.z == doctest::Approx(8.485).epsilon(1e-3));
  CHECK(s.p < 1e-16);
  CHECK(s.significant);

  m::MetricReport z1{"x", 1.0, 0.0, 0, 0, 0, "none"}, z2{"x", 0.5, 0.0, 0, 0, 0, "none"};
  const auto dg = m::significance_test(z1, z2);
  CHECK(dg.degenerate);
  CHECK(dg.p == 0.0);
}

TEST_CASE("mae, f1, accuracy and recall@k") {
  std::vector<double> p{0.1, 0.5, 0.9};
  CHECK(m::mae(p, p) == 0.0);
  CHECK(m::mae(std::vector<double>{0, 0, 0}, std::vector<double>{0.3, 0.0, 0.6}) == doctest::Approx(0.3));
  std::vector<std::uint8_t> y{0, 1, 1};
  CHECK(m::f1(std::vector<double>{0.0, 1.0, 1.0}, y) == 1.0);
  CHECK(m::f1_counts(1, 1, 1) == 0.5);
  CHECK(m::f1(std::vector<double>{0.7, 0.6, 0.2}, y) == 0.5);
  CHECK(m::accuracy(std::vector<double>{0.7, 0.6, 0.2}, y) == doctest::Approx(1.0 / 3.0));
  CHECK(m::recall_at_k(std::vector<std::size_t>{11}, 10) == 0.0);
  CHECK(m::recall_at_k(std::vector<std::size_t>{1, 10, 11, 50}, 10) == 0.5);
  CHECK_THROWS_AS(m::mae(std::vector<double>{}, std::vector<double>{}), DataError);
  CHECK_THROWS_AS(m::recall_at_k(std::vector<std::size_t>{}, 10), DataError);
}

TEST_CASE("metric report JSON round trip") {
  m::MetricReport r{"auroc", 0.8, 0.05, 0.7, 0.9, 40, "bootstrap", false, 3};
  const auto j = m::to_json(r);
  CHECK(j["ci95"][0] == 0.7);
  CHECK(m::report_from_json(j) == r);
  CHECK_THROWS_AS(m::report_from_json(m::Json{{"name", "x"}}), DataError);
}
