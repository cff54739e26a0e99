#pragma once
// Synthetic phantom corpora with analytic ground truth, delimited label files,
// and static SVG/CSV report emission.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "volssl/metrics.hpp"
#include "volssl/volume.hpp"

namespace volssl::report {

// ---- phantoms ------------------------------------------------------------------
enum class Family { sphere, rod, shell, two_component };

const char* to_string(Family f);
Family family_from_string(const std::string& s);

/// Analytic object description. Positions are continuous voxel coordinates
/// (z, y, x) where voxel k spans [k, k+1) and its centre sits at k + 0.5.
struct PhantomParams {
  Family family = Family::sphere;
  std::array<double, 3> center{0, 0, 0};
  double radius = 1.0;
  std::size_t axis = 0;          // rod axis (0 z, 1 y, 2 x)
  double half_length = 0.0;      // rod
  double inner_ratio = 0.6;      // shell inner radius / outer radius
  std::array<double, 3> center2{0, 0, 0};  // second component
  double radius2 = 0.0;
  double intensity_hu = 500.0;
};

/// 1 inside the primary object, 2 inside the second component, else 0.
std::int32_t label_at(const PhantomParams& p, double z, double y, double x);
/// Analytic volume of the labelled region in voxels^3.
double analytic_volume(const PhantomParams& p);
/// Analytic centroid of the labelled region, continuous voxel coordinates.
std::array<double, 3> analytic_centroid(const PhantomParams& p);
/// Radius of the sphere with the same analytic volume.
double equivalent_radius(const PhantomParams& p);

struct PhantomSpec {
  std::size_t n = 200;  // patients
  std::size_t side = 56;
  std::vector<Family> families{Family::sphere, Family::rod, Family::shell, Family::two_component};
  double radius_min = 5.0, radius_max = 12.0;
  double tissue_hu = 40.0;
  double noise_hu = 25.0;
  double intensity_min_hu = 300.0, intensity_max_hu = 800.0;
  bool rescans = true;         // a second scan per patient for retrieval
  double hazard_beta = 0.1;    // per voxel of equivalent radius
  double base_hazard = 1.0 / 3000.0;  // per day
  double censor_max_days = 4000.0;
  std::uint64_t seed = 0;
};

struct Phantom {
  std::string id;
  std::string patient;
  bool rescan = false;
  PhantomParams params;
  RawVolume volume;                 // HU
  std::vector<std::int32_t> mask;   // voxel labels, depth-major
  std::array<double, 3> centroid_norm{};  // (z, y, x) / side
  double radius_norm = 0.0;         // equivalent radius / side
  std::uint8_t round = 0;           // classification target: sphere or shell
  double time_days = 0.0;
  std::uint8_t event = 0;
};

/// Rasterises a phantom: tissue background with Gaussian noise plus the object.
Phantom render_phantom(const PhantomParams& p, std::size_t side, double tissue_hu, double noise_hu,
                       std::uint64_t noise_seed);

/// Draws the full corpus; deterministic under spec.seed. Rescans follow their
/// primary scan and share its patient id, labels and survival record.
std::vector<Phantom> generate_phantoms(const PhantomSpec& spec);

/// Writes volumes/, masks/, labels/{cls,reg,loc,surv,seg,retr}.csv,
/// patients.csv and phantoms.json under out_dir.
void write_phantom_corpus(const std::vector<Phantom>& corpus, const PhantomSpec& spec,
                          const std::filesystem::path& out_dir);

// ---- delimited tables ----------------------------------------------------------
/// Comma- or tab-separated rows; blank lines and lines starting with '#' are
/// skipped, as is a header row whose first field is "sample_id" or "query_id".
using Table = std::map<std::string, std::vector<std::string>>;

std::vector<std::vector<std::string>> read_rows(const std::filesystem::path& path);
/// First column is the key; duplicate keys raise DataError.
Table read_table(const std::filesystem::path& path);
std::vector<double> parse_numbers(const std::vector<std::string>& fields, const std::string& where);
/// Shortest representation that round-trips a double.
std::string fmt(double v);

// ---- reports -------------------------------------------------------------------
struct ReportRow {
  std::string group;  // task or benchmark
  std::string label;  // model or setting
  double x = 0.0;     // data fraction for curve plots
  metrics::MetricReport report;
  bool operator==(const ReportRow&) const = default;
};

std::string emit_csv(const std::vector<ReportRow>& rows);
std::vector<ReportRow> parse_csv(const std::string& text);

struct PlotResult {
  std::string svg;
  std::vector<std::string> warnings;  // rows drawn without whiskers
};

/// Grouped bars, one group per distinct `group` in first-seen order and one bar
/// per row within it in input order, with whiskers at ci95.
PlotResult bar_chart(const std::vector<ReportRow>& rows, const std::string& title);
/// One polyline per `label` over x with CI whiskers.
PlotResult fraction_curve(const std::vector<ReportRow>& rows, const std::string& title);

}  // namespace volssl::report
