#include "volssl/reports.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "volssl/augment.hpp"
#include "volssl/errors.hpp"

namespace volssl::report {

namespace fs = std::filesystem;

namespace {

double sq(double v) { return v * v; }

double dist2(const std::array<double, 3>& c, double z, double y, double x) {
  return sq(z - c[0]) + sq(y - c[1]) + sq(x - c[2]);
}

std::string xml_escape(const std::string& s) {
  std::string o;
  for (char ch : s) {
    switch (ch) {
      case '&': o += "&amp;"; break;
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '"': o += "&quot;"; break;
      default: o += ch;
    }
  }
  return o;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  write_binary_atomic(path, text);
}

const char* kPalette[] = {"#3b6ea8", "#d1773b", "#4f9a5a", "#b8464b", "#7d62a8", "#8a6d4e", "#c45fa0", "#6f7a82"};

}  // namespace

// ---- phantoms ------------------------------------------------------------------

const char* to_string(Family f) {
  switch (f) {
    case Family::sphere: return "sphere";
    case Family::rod: return "rod";
    case Family::shell: return "shell";
    case Family::two_component: return "two-component";
  }
  return "?";
}

Family family_from_string(const std::string& s) {
  for (Family f : {Family::sphere, Family::rod, Family::shell, Family::two_component})
    if (s == to_string(f)) return f;
  throw ConfigError("unknown phantom family '" + s + "' (sphere, rod, shell, two-component)");
}

std::int32_t label_at(const PhantomParams& p, double z, double y, double x) {
  const double d2 = dist2(p.center, z, y, x);
  switch (p.family) {
    case Family::sphere:
      return d2 <= sq(p.radius) ? 1 : 0;
    case Family::shell:
      return d2 <= sq(p.radius) && d2 >= sq(p.radius * p.inner_ratio) ? 1 : 0;
    case Family::rod: {
      const std::array<double, 3> q{z, y, x};
      const double along = q[p.axis] - p.center[p.axis];
      const double radial2 = d2 - sq(along);
      return std::abs(along) <= p.half_length && radial2 <= sq(p.radius) ? 1 : 0;
    }
    case Family::two_component:
      if (d2 <= sq(p.radius)) return 1;
      return dist2(p.center2, z, y, x) <= sq(p.radius2) ? 2 : 0;
  }
  return 0;
}

double analytic_volume(const PhantomParams& p) {
  const double k = 4.0 / 3.0 * std::numbers::pi;
  switch (p.family) {
    case Family::sphere: return k * std::pow(p.radius, 3);
    case Family::shell: return k * std::pow(p.radius, 3) * (1.0 - std::pow(p.inner_ratio, 3));
    case Family::rod: return std::numbers::pi * sq(p.radius) * 2.0 * p.half_length;
    case Family::two_component: return k * (std::pow(p.radius, 3) + std::pow(p.radius2, 3));
  }
  return 0.0;
}

std::array<double, 3> analytic_centroid(const PhantomParams& p) {
  if (p.family != Family::two_component) return p.center;
  const double w1 = std::pow(p.radius, 3), w2 = std::pow(p.radius2, 3);
  std::array<double, 3> c{};
  for (int a = 0; a < 3; ++a) c[a] = (w1 * p.center[a] + w2 * p.center2[a]) / (w1 + w2);
  return c;
}

double equivalent_radius(const PhantomParams& p) {
  return std::cbrt(analytic_volume(p) * 3.0 / (4.0 * std::numbers::pi));
}

Phantom render_phantom(const PhantomParams& p, std::size_t side, double tissue_hu, double noise_hu,
                       std::uint64_t noise_seed) {
  if (side < 2) throw ConfigError("phantom side must be at least 2");
  Phantom ph;
  ph.params = p;
  const Dims dims{side, side, side};
  ph.volume.voxels = Volume(dims);
  ph.mask.assign(dims.count(), 0);
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> noise(0.0, noise_hu);
  auto& vox = ph.volume.voxels.voxels();
  std::size_t i = 0;
  for (std::size_t z = 0; z < side; ++z)
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x, ++i) {
        const std::int32_t l = label_at(p, z + 0.5, y + 0.5, x + 0.5);
        ph.mask[i] = l;
        const double base = l == 0 ? tissue_hu : (l == 1 ? p.intensity_hu : 0.8 * p.intensity_hu);
        vox[i] = static_cast<float>(base + noise(rng));
      }
  const auto c = analytic_centroid(p);
  for (int a = 0; a < 3; ++a) ph.centroid_norm[a] = c[a] / static_cast<double>(side);
  ph.radius_norm = equivalent_radius(p) / static_cast<double>(side);
  ph.round = p.family == Family::sphere || p.family == Family::shell;
  return ph;
}

std::vector<Phantom> generate_phantoms(const PhantomSpec& spec) {
  if (spec.n == 0) throw ConfigError("phantom count must be positive");
  if (spec.families.empty()) throw ConfigError("at least one phantom family is required");
  const double side = static_cast<double>(spec.side);
  if (!(spec.radius_min > 0.0 && spec.radius_min <= spec.radius_max && 2.0 * spec.radius_max + 6.0 <= side)) {
    throw ConfigError("phantom radii must be positive and fit inside the volume");
  }
  std::vector<Phantom> out;
  for (std::size_t i = 0; i < spec.n; ++i) {
    std::mt19937_64 rng(aug::derive_seed(spec.seed, i));
    auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    PhantomParams p;
    p.family = spec.families[i % spec.families.size()];
    p.intensity_hu = uni(spec.intensity_min_hu, spec.intensity_max_hu);
    auto place = [&](double margin) {
      std::array<double, 3> c{};
      for (auto& v : c) v = uni(margin, side - margin);
      return c;
    };
    switch (p.family) {
      case Family::sphere:
      case Family::shell:
        p.radius = uni(spec.radius_min, spec.radius_max);
        p.center = place(p.radius + 2.0);
        break;
      case Family::rod: {
        p.radius = uni(2.5, 4.0);
        p.half_length = uni(spec.radius_min + 4.0, std::max(spec.radius_min + 4.0, std::min(spec.radius_max + 8.0, side / 2.0 - 4.0)));
        p.axis = static_cast<std::size_t>(rng() % 3);
        p.center = place(p.radius + 2.0);
        p.center[p.axis] = uni(p.half_length + 2.0, side - p.half_length - 2.0);
        break;
      }
      case Family::two_component: {
        p.radius = uni(spec.radius_min, std::max(spec.radius_min, 0.8 * spec.radius_max));
        p.radius2 = uni(0.6 * spec.radius_min, p.radius);
        for (int attempt = 0;; ++attempt) {
          p.center = place(p.radius + 2.0);
          p.center2 = place(p.radius2 + 2.0);
          if (std::sqrt(dist2(p.center, p.center2[0], p.center2[1], p.center2[2])) >= p.radius + p.radius2 + 2.0) break;
          if (attempt > 1000) throw ConfigError("could not place two separated components; enlarge the volume");
        }
        break;
      }
    }
    char id[32];
    std::snprintf(id, sizeof id, "ph%05zu", i);
    Phantom ph = render_phantom(p, spec.side, spec.tissue_hu, spec.noise_hu, aug::derive_seed(spec.seed, 1'000'000 + 2 * i));
    ph.id = id;
    ph.patient = std::string("pt") + (id + 2);
    const double rate = spec.base_hazard * std::exp(spec.hazard_beta * equivalent_radius(p));
    const double t = std::exponential_distribution<double>(rate)(rng);
    const double cens = uni(0.0, spec.censor_max_days);
    ph.event = t <= cens;
    ph.time_days = std::max(1.0, std::ceil(std::min(t, cens)));
    ph.volume.source_id = ph.id;
    const Phantom primary = ph;
    out.push_back(std::move(ph));
    if (spec.rescans) {
      PhantomParams q = p;
      for (int a = 0; a < 3; ++a) {
        const double s = uni(-1.0, 1.0);
        q.center[a] += s;
        q.center2[a] += s;
      }
      q.intensity_hu *= uni(0.95, 1.05);
      Phantom r = render_phantom(q, spec.side, spec.tissue_hu, spec.noise_hu, aug::derive_seed(spec.seed, 1'000'001 + 2 * i));
      r.id = primary.id + "r";
      r.patient = primary.patient;
      r.rescan = true;
      r.round = primary.round;
      r.radius_norm = primary.radius_norm;
      r.time_days = primary.time_days;
      r.event = primary.event;
      r.volume.source_id = r.id;
      out.push_back(std::move(r));
    }
  }
  return out;
}

void write_phantom_corpus(const std::vector<Phantom>& corpus, const PhantomSpec& spec, const fs::path& out_dir) {
  fs::create_directories(out_dir / "volumes");
  fs::create_directories(out_dir / "masks");
  std::ostringstream cls, reg, loc, surv, seg, retr, pats;
  cls << "sample_id,target\n";
  reg << "sample_id,target\n";
  loc << "sample_id,z,y,x\n";
  surv << "sample_id,time_days,event\n";
  seg << "sample_id,mask\n";
  retr << "query_id,positive_id\n";
  pats << "sample_id,patient_id\n";
  metrics::Json items = metrics::Json::array();
  for (const auto& ph : corpus) {
    write_raw_volume(out_dir / "volumes" / ph.id, ph.volume);
    RawVolume m;
    m.voxels = Volume(ph.volume.voxels.dims(), std::vector<float>(ph.mask.begin(), ph.mask.end()));
    m.spacing = ph.volume.spacing;
    m.source_id = ph.id;
    write_raw_volume(out_dir / "masks" / ph.id, m);
    pats << ph.id << ',' << ph.patient << '\n';
    if (ph.rescan) {
      retr << ph.id.substr(0, ph.id.size() - 1) << ',' << ph.id << '\n';
      continue;
    }
    cls << ph.id << ',' << int(ph.round) << '\n';
    reg << ph.id << ',' << fmt(ph.radius_norm) << '\n';
    loc << ph.id << ',' << fmt(ph.centroid_norm[0]) << ',' << fmt(ph.centroid_norm[1]) << ',' << fmt(ph.centroid_norm[2])
        << '\n';
    surv << ph.id << ',' << fmt(ph.time_days) << ',' << int(ph.event) << '\n';
    seg << ph.id << ",../masks/" << ph.id << ".json\n";
    const auto& p = ph.params;
    items.push_back({{"id", ph.id},
                     {"patient", ph.patient},
                     {"family", to_string(p.family)},
                     {"center", p.center},
                     {"radius", p.radius},
                     {"axis", p.axis},
                     {"half_length", p.half_length},
                     {"inner_ratio", p.inner_ratio},
                     {"center2", p.center2},
                     {"radius2", p.radius2},
                     {"intensity_hu", p.intensity_hu},
                     {"analytic_volume", analytic_volume(p)}});
  }
  write_text(out_dir / "labels" / "cls.csv", cls.str());
  write_text(out_dir / "labels" / "reg.csv", reg.str());
  write_text(out_dir / "labels" / "loc.csv", loc.str());
  write_text(out_dir / "labels" / "surv.csv", surv.str());
  write_text(out_dir / "labels" / "seg.csv", seg.str());
  write_text(out_dir / "labels" / "retr.csv", retr.str());
  write_text(out_dir / "patients.csv", pats.str());
  std::vector<std::string> fams;
  for (auto f : spec.families) fams.push_back(to_string(f));
  const metrics::Json meta = {{"n", spec.n},
                              {"side", spec.side},
                              {"families", fams},
                              {"seed", spec.seed},
                              {"synthetic_survival", {{"hazard", "base * exp(beta * equivalent_radius)"},
                                                      {"beta", spec.hazard_beta},
                                                      {"base_per_day", spec.base_hazard},
                                                      {"censoring", "uniform(0, censor_max_days)"},
                                                      {"censor_max_days", spec.censor_max_days}}},
                              {"phantoms", items}};
  write_text(out_dir / "phantoms.json", meta.dump(2) + "\n");
}

// ---- delimited tables ----------------------------------------------------------

std::vector<std::vector<std::string>> read_rows(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const char sep = line.find('\t') != std::string::npos ? '\t' : ',';
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, sep)) f.push_back(cell);
    if (line.back() == sep) f.emplace_back();
    if (rows.empty() && !f.empty() && (f[0] == "sample_id" || f[0] == "query_id")) continue;
    rows.push_back(std::move(f));
  }
  return rows;
}

Table read_table(const fs::path& path) {
  Table t;
  for (auto& r : read_rows(path)) {
    if (r.empty() || r[0].empty()) throw DataError(path.string() + ": row without a sample id");
    const std::string key = r[0];
    r.erase(r.begin());
    if (!t.emplace(key, std::move(r)).second) throw DataError(path.string() + ": duplicate sample id " + key);
  }
  return t;
}

std::vector<double> parse_numbers(const std::vector<std::string>& fields, const std::string& where) {
  std::vector<double> v;
  for (const auto& f : fields) {
    double x = 0.0;
    const auto r = std::from_chars(f.data(), f.data() + f.size(), x);
    if (r.ec != std::errc() || r.ptr != f.data() + f.size()) throw DataError(where + ": '" + f + "' is not a number");
    v.push_back(x);
  }
  return v;
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

// ---- report tables -------------------------------------------------------------

std::string emit_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream o;
  o << "group,label,x,metric,point,se,ci_lo,ci_hi,n,method,flagged,redraws\n";
  for (const auto& r : rows) {
    for (const auto* s : {&r.group, &r.label, &r.report.name, &r.report.method})
      if (s->find_first_of(",\n\t") != std::string::npos) throw DataError("report field '" + *s + "' contains a delimiter");
    const auto& m = r.report;
    o << r.group << ',' << r.label << ',' << fmt(r.x) << ',' << m.name << ',' << fmt(m.point) << ',' << fmt(m.se) << ','
      << fmt(m.ci_lo) << ',' << fmt(m.ci_hi) << ',' << m.n << ',' << m.method << ',' << int(m.flagged) << ','
      << m.redraws << '\n';
  }
  return o.str();
}

std::vector<ReportRow> parse_csv(const std::string& text) {
  std::vector<ReportRow> rows;
  std::stringstream in(text);
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (header) {
      header = false;
      if (line.rfind("group,", 0) == 0) continue;
    }
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 12) throw DataError("summary row has " + std::to_string(f.size()) + " fields, expected 12");
    ReportRow r;
    r.group = f[0];
    r.label = f[1];
    const auto num = parse_numbers({f[2], f[4], f[5], f[6], f[7]}, "summary csv");
    r.x = num[0];
    r.report.name = f[3];
    r.report.point = num[1];
    r.report.se = num[2];
    r.report.ci_lo = num[3];
    r.report.ci_hi = num[4];
    r.report.n = static_cast<std::size_t>(std::stoull(f[8]));
    r.report.method = f[9];
    r.report.flagged = f[10] == "1";
    r.report.redraws = static_cast<std::size_t>(std::stoull(f[11]));
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---- SVG -----------------------------------------------------------------------

namespace {

struct Axis {
  double lo = 0.0, hi = 1.0;
  double top = 40.0, bottom = 300.0;
  double y(double v) const { return bottom - (v - lo) / (hi - lo) * (bottom - top); }
};

Axis value_axis(const std::vector<ReportRow>& rows) {
  Axis a;
  double hi = 0.0, lo = 0.0;
  for (const auto& r : rows) {
    const auto& m = r.report;
    hi = std::max({hi, m.point, m.has_ci() ? m.ci_hi : m.point});
    lo = std::min({lo, m.point, m.has_ci() ? m.ci_lo : m.point});
  }
  a.hi = hi > 0.0 ? hi * 1.1 : 1.0;
  a.lo = lo < 0.0 ? lo * 1.1 : 0.0;
  return a;
}

bool ci_usable(const metrics::MetricReport& m) {
  return m.has_ci() && std::isfinite(m.ci_lo) && std::isfinite(m.ci_hi) && m.ci_lo <= m.ci_hi;
}

void axis_svg(std::ostringstream& o, const Axis& a, double left, double right) {
  o << "<line x1=\"" << left << "\" y1=\"" << a.bottom << "\" x2=\"" << right << "\" y2=\"" << a.bottom
    << "\" stroke=\"#333\"/>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << a.top << "\" x2=\"" << left << "\" y2=\"" << a.bottom
    << "\" stroke=\"#333\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = a.lo + (a.hi - a.lo) * t / 4.0;
    char lab[32];
    std::snprintf(lab, sizeof lab, "%.3g", v);
    o << "<text x=\"" << left - 6 << "\" y=\"" << a.y(v) + 4 << "\" font-size=\"11\" text-anchor=\"end\">" << lab
      << "</text>\n";
  }
}

}  // namespace

PlotResult bar_chart(const std::vector<ReportRow>& rows, const std::string& title) {
  if (rows.empty()) throw DataError("bar chart needs at least one report");
  std::vector<std::string> groups;
  std::vector<std::string> labels;
  for (const auto& r : rows) {
    if (std::find(groups.begin(), groups.end(), r.group) == groups.end()) groups.push_back(r.group);
    if (std::find(labels.begin(), labels.end(), r.label) == labels.end()) labels.push_back(r.label);
  }
  const double left = 60.0, bar_w = 22.0, gap = 26.0;
  std::vector<double> group_x;
  double x = left + gap;
  std::vector<std::vector<const ReportRow*>> members(groups.size());
  for (const auto& r : rows) {
    const auto g = std::find(groups.begin(), groups.end(), r.group) - groups.begin();
    members[g].push_back(&r);
  }
  for (const auto& m : members) {
    group_x.push_back(x);
    x += static_cast<double>(m.size()) * bar_w + gap;
  }
  const double width = x + 150.0;
  const Axis a = value_axis(rows);
  PlotResult res;
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"360\" font-family=\"sans-serif\">\n";
  o << "<text x=\"" << left << "\" y=\"22\" font-size=\"14\">" << xml_escape(title) << "</text>\n";
  axis_svg(o, a, left, x);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (std::size_t k = 0; k < members[g].size(); ++k) {
      const ReportRow& r = *members[g][k];
      const auto& m = r.report;
      const auto colour = kPalette[(std::find(labels.begin(), labels.end(), r.label) - labels.begin()) % 8];
      const double bx = group_x[g] + static_cast<double>(k) * bar_w;
      const double y0 = a.y(std::max(0.0, a.lo)), y1 = a.y(m.point);
      o << "<rect class=\"bar\" x=\"" << bx << "\" y=\"" << std::min(y0, y1) << "\" width=\"" << bar_w - 2
        << "\" height=\"" << std::abs(y0 - y1) << "\" fill=\"" << colour << "\"><title>" << xml_escape(r.label) << ' '
        << xml_escape(m.name) << ' ' << fmt(m.point) << "</title></rect>\n";
      if (ci_usable(m)) {
        const double cx = bx + (bar_w - 2) / 2;
        o << "<path class=\"whisker\" d=\"M" << cx << ' ' << a.y(m.ci_lo) << " V" << a.y(m.ci_hi) << " M" << cx - 5
          << ' ' << a.y(m.ci_lo) << " h10 M" << cx - 5 << ' ' << a.y(m.ci_hi) << " h10\" stroke=\"#111\" fill=\"none\"/>\n";
      } else {
        res.warnings.push_back(r.group + "/" + r.label + ": no confidence interval, bar drawn without whiskers");
      }
    }
    o << "<text x=\"" << group_x[g] << "\" y=\"" << a.bottom + 18 << "\" font-size=\"11\">" << xml_escape(groups[g])
      << "</text>\n";
  }
  for (std::size_t l = 0; l < labels.size(); ++l) {
    o << "<rect x=\"" << x + 10 << "\" y=\"" << 40 + 18 * l << "\" width=\"12\" height=\"12\" fill=\"" << kPalette[l % 8]
      << "\"/><text x=\"" << x + 28 << "\" y=\"" << 50 + 18 * l << "\" font-size=\"11\">" << xml_escape(labels[l])
      << "</text>\n";
  }
  o << "</svg>\n";
  res.svg = o.str();
  return res;
}

PlotResult fraction_curve(const std::vector<ReportRow>& rows, const std::string& title) {
  if (rows.empty()) throw DataError("fraction curve needs at least one report");
  std::vector<std::string> labels;
  for (const auto& r : rows)
    if (std::find(labels.begin(), labels.end(), r.label) == labels.end()) labels.push_back(r.label);
  double xmin = rows[0].x, xmax = rows[0].x;
  for (const auto& r : rows) {
    xmin = std::min(xmin, r.x);
    xmax = std::max(xmax, r.x);
  }
  if (xmax == xmin) xmax = xmin + 1.0;
  const double left = 60.0, right = 420.0;
  auto px = [&](double v) { return left + 10 + (v - xmin) / (xmax - xmin) * (right - left - 20); };
  const Axis a = value_axis(rows);
  PlotResult res;
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"580\" height=\"360\" font-family=\"sans-serif\">\n";
  o << "<text x=\"" << left << "\" y=\"22\" font-size=\"14\">" << xml_escape(title) << "</text>\n";
  axis_svg(o, a, left, right);
  for (std::size_t l = 0; l < labels.size(); ++l) {
    std::vector<const ReportRow*> pts;
    for (const auto& r : rows)
      if (r.label == labels[l]) pts.push_back(&r);
    std::stable_sort(pts.begin(), pts.end(), [](auto* p, auto* q) { return p->x < q->x; });
    const char* colour = kPalette[l % 8];
    o << "<polyline class=\"curve\" fill=\"none\" stroke=\"" << colour << "\" points=\"";
    for (auto* p : pts) o << px(p->x) << ',' << a.y(p->report.point) << ' ';
    o << "\"/>\n";
    for (auto* p : pts) {
      const auto& m = p->report;
      o << "<circle cx=\"" << px(p->x) << "\" cy=\"" << a.y(m.point) << "\" r=\"3\" fill=\"" << colour << "\"/>\n";
      if (ci_usable(m)) {
        o << "<path class=\"whisker\" d=\"M" << px(p->x) << ' ' << a.y(m.ci_lo) << " V" << a.y(m.ci_hi)
          << "\" stroke=\"" << colour << "\"/>\n";
      } else {
        res.warnings.push_back(p->label + " at " + fmt(p->x) + ": no confidence interval, point drawn without whiskers");
      }
    }
    o << "<text x=\"" << right + 10 << "\" y=\"" << 50 + 18 * l << "\" font-size=\"11\" fill=\"" << colour << "\">"
      << xml_escape(labels[l]) << "</text>\n";
  }
  o << "<text x=\"" << (left + right) / 2 << "\" y=\"" << a.bottom + 30 << "\" font-size=\"11\">training fraction</text>\n";
  o << "</svg>\n";
  res.svg = o.str();
  return res;
}

}  // namespace volssl::report
