#pragma once
// Evaluation metrics and their uncertainty: AUROC with Hanley-McNeil standard
// errors, percentile bootstrap, concordance, Dice, MAE, F1, Recall@k and a
// two-sided z test between reports.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace volssl::metrics {

using Json = nlohmann::ordered_json;

struct MetricReport {
  std::string name;
  double point = 0.0;
  double se = 0.0;
  double ci_lo = 0.0, ci_hi = 0.0;
  std::size_t n = 0;
  std::string method;  // "hanley_mcneil", "bootstrap" or "none"
  bool flagged = false;  // point outside its percentile interval
  std::size_t redraws = 0;

  bool has_ci() const { return method != "none"; }
  bool operator==(const MetricReport&) const = default;
};

Json to_json(const MetricReport& r);
MetricReport report_from_json(const Json& j);

// ---- AUROC -------------------------------------------------------------------
/// P(score_pos > score_neg) + 0.5 P(tie), from midranks. DataError on one class.
double auroc_value(std::span<const double> scores, std::span<const std::uint8_t> labels);
double hanley_mcneil_se(double a, std::size_t n_pos, std::size_t n_neg);
/// AUROC with Hanley-McNeil SE and a normal 95% interval clipped to [0, 1].
MetricReport auroc(std::span<const double> scores, std::span<const std::uint8_t> labels);

// ---- bootstrap ---------------------------------------------------------------
/// Metric over a resample given as row indices. Throwing DataError or returning
/// a non-finite value marks the resample undefined.
using ResampleMetric = std::function<double(std::span<const std::size_t>)>;

/// Percentile bootstrap over n rows. Undefined resamples are redrawn, at most
/// max_redraws times in total (NumericalError beyond that).
MetricReport bootstrap_ci(const std::string& name, const ResampleMetric& metric, std::size_t n,
                          std::size_t n_resamples, std::uint64_t seed, std::size_t max_redraws = 100);

// ---- survival ----------------------------------------------------------------
/// Harrell's C: pairs (i, j) with event_i and t_i < t_j; higher risk for i is
/// concordant, risk ties count one half. DataError without comparable pairs.
double c_index(std::span<const double> risks, std::span<const double> times, std::span<const std::uint8_t> events);

/// AUROC at a horizon: positives die before it, negatives survive past it;
/// subjects censored before the horizon are excluded.
double time_auroc(std::span<const double> risks, std::span<const double> times, std::span<const std::uint8_t> events,
                  double horizon);

// ---- segmentation ------------------------------------------------------------
struct DiceResult {
  double micro = 0.0;
  double macro = 0.0;
  std::vector<double> per_class;       // NaN where the class is absent from the truth
  std::vector<std::size_t> absent;     // foreground classes missing from the truth
};

/// Foreground classes are 1 .. n_classes-1; label 0 is background.
DiceResult dice(std::span<const std::int32_t> pred, std::span<const std::int32_t> truth, std::size_t n_classes);

// ---- regression and classification ------------------------------------------
/// Mean absolute error over every element (per-axis average for coordinates).
double mae(std::span<const double> pred, std::span<const double> target);
/// F1 of probabilities thresholded at `threshold`.
double f1(std::span<const double> probs, std::span<const std::uint8_t> labels, double threshold = 0.5);
double f1_counts(std::size_t tp, std::size_t fp, std::size_t fn);
double accuracy(std::span<const double> probs, std::span<const std::uint8_t> labels, double threshold = 0.5);
/// Fraction of queries whose positive ranks within the top k (ranks are 1-based).
double recall_at_k(std::span<const std::size_t> positive_ranks, std::size_t k);

// ---- significance ------------------------------------------------------------
struct Significance {
  double z = 0.0;
  double p = 1.0;
  bool significant = false;  // p < 0.05
  bool degenerate = false;   // zero combined SE with differing points
};

Significance significance_test(const MetricReport& a, const MetricReport& b);

/// Linear-interpolated percentile (q in [0, 100]) of unsorted values.
double percentile(std::vector<double> values, double q);

}  // namespace volssl::metrics
