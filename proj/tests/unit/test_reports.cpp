#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <string>

#include "volssl/errors.hpp"
#include "volssl/reports.hpp"

using namespace volssl;
namespace fs = std::filesystem;
namespace r = volssl::report;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("volssl_reports_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::size_t count(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) ++n;
  return n;
}

std::size_t voxels_with(const r::Phantom& ph, std::int32_t l) {
  std::size_t n = 0;
  for (auto v : ph.mask) n += v == l;
  return n;
}

r::ReportRow row(const std::string& group, const std::string& label, double point, bool ci = true, double x = 1.0) {
  r::ReportRow out;
  out.group = group;
  out.label = label;
  out.x = x;
  out.report.name = "auroc";
  out.report.point = point;
  out.report.n = 40;
  if (ci) {
    out.report.method = "bootstrap";
    out.report.se = 0.03;
    out.report.ci_lo = point - 0.06;
    out.report.ci_hi = point + 0.05;
  } else {
    out.report.method = "none";
  }
  return out;
}

}  // namespace

TEST_CASE("sphere phantom: voxel count and centroid match the analytic shape") {
  r::PhantomParams p;
  p.family = r::Family::sphere;
  p.center = {32, 32, 32};
  p.radius = 10;
  const r::Phantom ph = r::render_phantom(p, 64, 40, 0, 1);
  const double expect = 4.0 / 3.0 * std::numbers::pi * 1000.0;
  const double n = static_cast<double>(voxels_with(ph, 1));
  CHECK(std::abs(n - expect) / expect < 0.02);
  for (double c : ph.centroid_norm) CHECK(c == doctest::Approx(0.5).epsilon(1e-12));

  // Empirical centroid of the mask at voxel centres.
  std::array<double, 3> c{};
  std::size_t i = 0;
  for (std::size_t z = 0; z < 64; ++z)
    for (std::size_t y = 0; y < 64; ++y)
      for (std::size_t x = 0; x < 64; ++x, ++i)
        if (ph.mask[i]) {
          c[0] += z + 0.5;
          c[1] += y + 0.5;
          c[2] += x + 0.5;
        }
  for (double v : c) CHECK(v / n == doctest::Approx(32.0).epsilon(1e-9));
  CHECK(ph.round == 1);
  // Noise-free rendering puts the object intensity inside and tissue outside.
  CHECK(ph.volume.voxels.at(32, 32, 32) == doctest::Approx(500.0));
  CHECK(ph.volume.voxels.at(0, 0, 0) == doctest::Approx(40.0));
}

TEST_CASE("rod, shell and two-component masks follow their analytic volumes") {
  r::PhantomParams rod;
  rod.family = r::Family::rod;
  rod.center = {24, 24, 24};
  rod.radius = 5;
  rod.half_length = 12;
  rod.axis = 2;
  const auto pr = r::render_phantom(rod, 48, 40, 0, 1);
  CHECK(std::abs(static_cast<double>(voxels_with(pr, 1)) - r::analytic_volume(rod)) / r::analytic_volume(rod) < 0.05);
  CHECK(pr.round == 0);
  CHECK(r::label_at(rod, 24, 24, 35.9) == 1);  // along the x axis
  CHECK(r::label_at(rod, 35.9, 24, 24) == 0);  // across it

  r::PhantomParams shell;
  shell.family = r::Family::shell;
  shell.center = {24, 24, 24};
  shell.radius = 12;
  const auto ps = r::render_phantom(shell, 48, 40, 0, 1);
  CHECK(std::abs(static_cast<double>(voxels_with(ps, 1)) - r::analytic_volume(shell)) / r::analytic_volume(shell) < 0.03);
  CHECK(r::label_at(shell, 24, 24, 24) == 0);  // hollow centre
  CHECK(ps.round == 1);

  r::PhantomParams two;
  two.family = r::Family::two_component;
  two.center = {14, 24, 24};
  two.radius = 6;
  two.center2 = {34, 24, 24};
  two.radius2 = 4;
  const auto pt = r::render_phantom(two, 48, 40, 0, 1);
  CHECK(voxels_with(pt, 1) > 0);
  CHECK(voxels_with(pt, 2) > 0);
  // Volume-weighted centroid sits between the two centres, nearer the larger.
  const auto c = r::analytic_centroid(two);
  CHECK(c[0] == doctest::Approx((216.0 * 14 + 64.0 * 34) / 280.0));
  CHECK(r::equivalent_radius(two) == doctest::Approx(std::cbrt(216.0 + 64.0)));
}

TEST_CASE("phantom corpus is deterministic and writes consistent labels") {
  r::PhantomSpec spec;
  spec.n = 8;
  spec.side = 32;
  spec.radius_min = 3;
  spec.radius_max = 6;
  spec.seed = 11;
  const auto a = r::generate_phantoms(spec);
  const auto b = r::generate_phantoms(spec);
  REQUIRE(a.size() == 16);  // one rescan per patient
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == b[i].id);
    CHECK(a[i].volume.voxels.voxels() == b[i].volume.voxels.voxels());
    CHECK(a[i].mask == b[i].mask);
  }
  spec.seed = 12;
  CHECK(r::generate_phantoms(spec)[0].volume.voxels.voxels() != a[0].volume.voxels.voxels());

  std::set<r::Family> fams;
  for (std::size_t i = 0; i < a.size(); i += 2) {
    const auto &p = a[i], &q = a[i + 1];
    fams.insert(p.params.family);
    CHECK_FALSE(p.rescan);
    CHECK(q.rescan);
    CHECK(q.id == p.id + "r");
    CHECK(q.patient == p.patient);
    CHECK(q.time_days == p.time_days);
    CHECK(p.time_days >= 1.0);
    CHECK((p.event == 0 || p.event == 1));
    CHECK(p.volume.voxels.voxels() != q.volume.voxels.voxels());
  }
  CHECK(fams.size() == 4);

  const fs::path dir = scratch("corpus");
  r::write_phantom_corpus(a, spec, dir);
  for (const char* t : {"cls", "reg", "loc", "surv", "seg"}) {
    const auto tab = r::read_table(dir / "labels" / (std::string(t) + ".csv"));
    CHECK(tab.size() == 8);  // primaries only
  }
  const auto loc = r::read_table(dir / "labels" / "loc.csv");
  const auto v = r::parse_numbers(loc.at(a[0].id), "loc");
  REQUIRE(v.size() == 3);
  for (int k = 0; k < 3; ++k) CHECK(v[k] == doctest::Approx(a[0].centroid_norm[k]));
  CHECK(r::read_table(dir / "labels" / "retr.csv").size() == 8);
  CHECK(r::read_table(dir / "patients.csv").size() == 16);
  CHECK(fs::exists(dir / "phantoms.json"));
  fs::remove_all(dir);
}

TEST_CASE("phantom spec errors") {
  r::PhantomSpec spec;
  spec.n = 0;
  CHECK_THROWS_AS(r::generate_phantoms(spec), ConfigError);
  spec.n = 2;
  spec.families.clear();
  CHECK_THROWS_AS(r::generate_phantoms(spec), ConfigError);
  spec.families = {r::Family::sphere};
  spec.radius_max = 100;
  CHECK_THROWS_AS(r::generate_phantoms(spec), ConfigError);
  CHECK_THROWS_AS(r::family_from_string("cube"), ConfigError);
  CHECK(r::family_from_string("two-component") == r::Family::two_component);
  CHECK_THROWS_AS(r::render_phantom({}, 1, 0, 0, 0), ConfigError);
}

TEST_CASE("delimited tables: headers, comments, tabs and errors") {
  const fs::path dir = scratch("tables");
  {
    std::ofstream f(dir / "a.csv");
    f << "# comment\nsample_id,target\ns1,1\n\ns2\t0\n";
  }
  const auto t = r::read_table(dir / "a.csv");
  REQUIRE(t.size() == 2);
  CHECK(t.at("s2").at(0) == "0");
  {
    std::ofstream f(dir / "dup.csv");
    f << "s1,1\ns1,0\n";
  }
  CHECK_THROWS_AS(r::read_table(dir / "dup.csv"), DataError);
  CHECK_THROWS_AS(r::read_table(dir / "missing.csv"), DataError);
  CHECK_THROWS_AS(r::parse_numbers({"1.5", "x"}, "row"), DataError);
  CHECK_THROWS_AS(r::parse_numbers({"1.5abc"}, "row"), DataError);
  CHECK(r::parse_numbers({"1.5", "-2e3"}, "row") == std::vector<double>{1.5, -2000.0});
  fs::remove_all(dir);
}

TEST_CASE("report CSV round-trips exactly") {
  std::vector<r::ReportRow> rows{row("cls (auroc)", "mlp", 0.1 + 0.2), row("seg", "decoder", 1.0 / 3.0, false, 0.4)};
  rows[0].report.flagged = true;
  rows[0].report.redraws = 3;
  const std::string csv = r::emit_csv(rows);
  CHECK(csv.rfind("group,label,x,metric,point,se,ci_lo,ci_hi,n,method,flagged,redraws\n", 0) == 0);
  CHECK(r::parse_csv(csv) == rows);
  CHECK_THROWS_AS(r::parse_csv(csv + "a,b,c\n"), DataError);
  rows[0].label = "has,comma";
  CHECK_THROWS_AS(r::emit_csv(rows), DataError);
}

TEST_CASE("bar chart: one bar with whiskers, ordering and missing intervals") {
  const auto one = r::bar_chart({row("cls", "mlp", 0.8)}, "t");
  CHECK(count(one.svg, "class=\"bar\"") == 1);
  CHECK(count(one.svg, "class=\"whisker\"") == 1);
  CHECK(one.warnings.empty());

  std::vector<r::ReportRow> five;
  for (int i = 0; i < 5; ++i) five.push_back(row("cls", "m" + std::to_string(i), 0.5 + 0.05 * i));
  const auto chart = r::bar_chart(five, "t");
  CHECK(count(chart.svg, "class=\"bar\"") == 5);
  std::size_t last = 0;
  for (int i = 0; i < 5; ++i) {
    const auto pos = chart.svg.find("<title>m" + std::to_string(i) + " ");
    REQUIRE(pos != std::string::npos);
    CHECK(pos > last);
    last = pos;
  }

  const auto bare = r::bar_chart({row("cls", "mlp", 0.8, false)}, "t");
  CHECK(count(bare.svg, "class=\"whisker\"") == 0);
  CHECK(bare.warnings.size() == 1);
  CHECK_THROWS_AS(r::bar_chart({}, "t"), DataError);
}

TEST_CASE("fraction curve draws one polyline per label") {
  std::vector<r::ReportRow> rows;
  for (double x : {0.2, 0.6, 1.0}) {
    rows.push_back(row("cls", "a", 0.6 + 0.2 * x, true, x));
    rows.push_back(row("cls", "b", 0.5 + 0.1 * x, true, x));
  }
  const auto c = r::fraction_curve(rows, "t");
  CHECK(count(c.svg, "class=\"curve\"") == 2);
  CHECK(count(c.svg, "class=\"whisker\"") == 6);
  CHECK_THROWS_AS(r::fraction_curve({}, "t"), DataError);
}
