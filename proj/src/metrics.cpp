#include "volssl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "volssl/errors.hpp"

namespace volssl::metrics {

Json to_json(const MetricReport& r) {
  Json j = {{"name", r.name}, {"point", r.point}, {"se", r.se}, {"ci95", {r.ci_lo, r.ci_hi}}, {"n", r.n},
            {"method", r.method}};
  if (r.flagged) j["flagged"] = true;
  if (r.redraws) j["redraws"] = r.redraws;
  return j;
}

MetricReport report_from_json(const Json& j) {
  MetricReport r;
  try {
    r.name = j.at("name").get<std::string>();
    r.point = j.at("point").get<double>();
    r.se = j.at("se").get<double>();
    r.ci_lo = j.at("ci95").at(0).get<double>();
    r.ci_hi = j.at("ci95").at(1).get<double>();
    r.n = j.at("n").get<std::size_t>();
    r.method = j.at("method").get<std::string>();
    r.flagged = j.value("flagged", false);
    r.redraws = j.value("redraws", std::size_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed metric report: ") + e.what());
  }
  return r;
}

double auroc_value(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  const std::size_t n = scores.size();
  if (labels.size() != n) throw DataError("auroc: scores and labels differ in length");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t p = 0; p < n;) {
    std::size_t q = p;
    while (q < n && scores[idx[q]] == scores[idx[p]]) ++q;
    const double midrank = 0.5 * static_cast<double>(p + q - 1) + 1.0;
    for (std::size_t t = p; t < q; ++t)
      if (labels[idx[t]]) {
        pos_rank_sum += midrank;
        ++n_pos;
      }
    p = q;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw DataError("auroc needs both classes present");
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

double hanley_mcneil_se(double a, std::size_t n_pos, std::size_t n_neg) {
  if (n_pos == 0 || n_neg == 0) throw DataError("Hanley-McNeil SE needs both classes present");
  const double q1 = a / (2.0 - a), q2 = 2.0 * a * a / (1.0 + a);
  const double n1 = static_cast<double>(n_pos), n2 = static_cast<double>(n_neg);
  const double var = (a * (1.0 - a) + (n1 - 1.0) * (q1 - a * a) + (n2 - 1.0) * (q2 - a * a)) / (n1 * n2);
  return std::sqrt(std::max(0.0, var));
}

MetricReport auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  MetricReport r;
  r.name = "auroc";
  r.point = auroc_value(scores, labels);
  const auto n_pos = static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](auto v) { return v != 0; }));
  r.se = hanley_mcneil_se(r.point, n_pos, labels.size() - n_pos);
  r.ci_lo = std::max(0.0, r.point - 1.96 * r.se);
  r.ci_hi = std::min(1.0, r.point + 1.96 * r.se);
  r.n = labels.size();
  r.method = "hanley_mcneil";
  return r;
}

double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw DataError("percentile of an empty set");
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

MetricReport bootstrap_ci(const std::string& name, const ResampleMetric& metric, std::size_t n,
                          std::size_t n_resamples, std::uint64_t seed, std::size_t max_redraws) {
  if (n < 2) throw DataError("bootstrap needs at least 2 predictions");
  if (n_resamples == 0) throw ConfigError("bootstrap needs at least 1 resample");
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  MetricReport r;
  r.name = name;
  r.point = metric(all);
  if (!std::isfinite(r.point)) throw NumericalError(name + " is not finite on the full sample");
  r.n = n;
  r.method = "bootstrap";

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<double> values;
  values.reserve(n_resamples);
  std::vector<std::size_t> idx(n);
  while (values.size() < n_resamples) {
    for (auto& i : idx) i = pick(rng);
    double v;
    try {
      v = metric(idx);
    } catch (const DataError&) {
      v = NAN;
    }
    if (std::isfinite(v)) {
      values.push_back(v);
    } else if (++r.redraws > max_redraws) {
      throw NumericalError(name + ": more than " + std::to_string(max_redraws) +
                           " bootstrap resamples left the metric undefined");
    }
  }
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  r.se = values.size() > 1 ? std::sqrt(ss / static_cast<double>(values.size() - 1)) : 0.0;
  r.ci_lo = percentile(values, 2.5);
  r.ci_hi = percentile(values, 97.5);
  r.flagged = r.point < r.ci_lo || r.point > r.ci_hi;
  return r;
}

double c_index(std::span<const double> risks, std::span<const double> times, std::span<const std::uint8_t> events) {
  const std::size_t n = risks.size();
  if (times.size() != n || events.size() != n) throw DataError("c_index: length mismatch");
  double concordant = 0.0;
  std::size_t comparable = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!events[i]) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (!(times[i] < times[j])) continue;
      ++comparable;
      if (risks[i] > risks[j]) concordant += 1.0;
      else if (risks[i] == risks[j]) concordant += 0.5;
    }
  }
  if (comparable == 0) throw DataError("c_index: no comparable pairs");
  return concordant / static_cast<double>(comparable);
}

double time_auroc(std::span<const double> risks, std::span<const double> times, std::span<const std::uint8_t> events,
                  double horizon) {
  std::vector<double> s;
  std::vector<std::uint8_t> l;
  for (std::size_t i = 0; i < risks.size(); ++i) {
    if (times[i] <= horizon && events[i]) {
      s.push_back(risks[i]);
      l.push_back(1);
    } else if (times[i] > horizon) {
      s.push_back(risks[i]);
      l.push_back(0);
    }
  }
  return auroc_value(s, l);
}

DiceResult dice(std::span<const std::int32_t> pred, std::span<const std::int32_t> truth, std::size_t n_classes) {
  if (pred.size() != truth.size()) throw DataError("dice: prediction and truth shapes differ");
  if (n_classes < 2) throw ConfigError("dice needs at least one foreground class");
  std::vector<std::size_t> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0), present(n_classes, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto p = pred[i], t = truth[i];
    if (p < 0 || t < 0 || static_cast<std::size_t>(p) >= n_classes || static_cast<std::size_t>(t) >= n_classes) {
      throw DataError("dice: label outside [0, n_classes)");
    }
    ++present[t];
    if (p == t) ++tp[p];
    else {
      ++fp[p];
      ++fn[t];
    }
  }
  DiceResult r;
  r.per_class.assign(n_classes, NAN);
  std::size_t stp = 0, sfp = 0, sfn = 0, counted = 0;
  double macro = 0.0;
  for (std::size_t c = 1; c < n_classes; ++c) {
    stp += tp[c];
    sfp += fp[c];
    sfn += fn[c];
    if (!present[c]) {
      r.absent.push_back(c);
      continue;
    }
    r.per_class[c] = 2.0 * static_cast<double>(tp[c]) / static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
    macro += r.per_class[c];
    ++counted;
  }
  r.macro = counted ? macro / static_cast<double>(counted) : NAN;
  const std::size_t denom = 2 * stp + sfp + sfn;
  r.micro = denom ? 2.0 * static_cast<double>(stp) / static_cast<double>(denom) : NAN;
  return r;
}

double mae(std::span<const double> pred, std::span<const double> target) {
  if (pred.empty()) throw DataError("mae of empty input");
  if (pred.size() != target.size()) throw DataError("mae: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - target[i]);
  return s / static_cast<double>(pred.size());
}

double f1_counts(std::size_t tp, std::size_t fp, std::size_t fn) {
  const std::size_t d = 2 * tp + fp + fn;
  return d ? 2.0 * static_cast<double>(tp) / static_cast<double>(d) : 1.0;
}

double f1(std::span<const double> probs, std::span<const std::uint8_t> labels, double threshold) {
  if (probs.empty()) throw DataError("f1 of empty input");
  if (probs.size() != labels.size()) throw DataError("f1: length mismatch");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const bool p = probs[i] >= threshold;
    if (p && labels[i]) ++tp;
    else if (p) ++fp;
    else if (labels[i]) ++fn;
  }
  return f1_counts(tp, fp, fn);
}

double accuracy(std::span<const double> probs, std::span<const std::uint8_t> labels, double threshold) {
  if (probs.empty()) throw DataError("accuracy of empty input");
  if (probs.size() != labels.size()) throw DataError("accuracy: length mismatch");
  std::size_t ok = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) ok += (probs[i] >= threshold) == (labels[i] != 0);
  return static_cast<double>(ok) / static_cast<double>(probs.size());
}

double recall_at_k(std::span<const std::size_t> positive_ranks, std::size_t k) {
  if (positive_ranks.empty()) throw DataError("recall@k of empty input");
  std::size_t hits = 0;
  for (auto r : positive_ranks) {
    if (r == 0) throw DataError("ranks are 1-based");
    hits += r <= k;
  }
  return static_cast<double>(hits) / static_cast<double>(positive_ranks.size());
}

Significance significance_test(const MetricReport& a, const MetricReport& b) {
  if (a.se < 0.0 || b.se < 0.0 || !std::isfinite(a.se) || !std::isfinite(b.se)) {
    throw DataError("significance test needs finite non-negative standard errors");
  }
  Significance s;
  const double se = std::sqrt(a.se * a.se + b.se * b.se);
  const double diff = a.point - b.point;
  if (se == 0.0) {
    s.degenerate = diff != 0.0;
    s.z = diff == 0.0 ? 0.0 : std::copysign(INFINITY, diff);
    s.p = diff == 0.0 ? 1.0 : 0.0;
  } else {
    s.z = diff / se;
    s.p = std::erfc(std::abs(s.z) / std::sqrt(2.0));
  }
  s.significant = s.p < 0.05;
  return s;
}

}  // namespace volssl::metrics
