#include "volssl/probe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <set>

#include "volssl/errors.hpp"
#include "volssl/metrics.hpp"
#include "volssl/ops.hpp"
#include "volssl/augment.hpp"
#include "volssl/trainer.hpp"

namespace volssl::probe {

namespace {

double fan_in_std(std::size_t in) { return 1.0 / std::sqrt(static_cast<double>(in)); }

Tensor class_row(const ProbeSample& s) {
  if (s.class_token.empty()) throw DataError("sample " + s.id + " has no class token");
  return Tensor::from({1, s.class_token.size()}, s.class_token);
}

const Tensor& patch_tokens(const ProbeSample& s) {
  if (!s.patches.tokens.defined() || s.patches.size() == 0) throw DataError("sample " + s.id + " has no patch tokens");
  return s.patches.tokens;
}

void check_dim(const Tensor& x, std::size_t dim, const char* what) {
  if (x.cols() != dim) {
    throw DataError(std::string(what) + ": token dim " + std::to_string(x.cols()) + " does not match probe dim " +
                    std::to_string(dim));
  }
}

}  // namespace

const char* to_string(Task t) {
  switch (t) {
    case Task::cls: return "cls";
    case Task::reg: return "reg";
    case Task::surv: return "surv";
    case Task::loc: return "loc";
    case Task::seg: return "seg";
    case Task::retr: return "retr";
  }
  return "?";
}

Task task_from_string(const std::string& s) {
  for (Task t : {Task::cls, Task::reg, Task::surv, Task::loc, Task::seg, Task::retr})
    if (s == to_string(t)) return t;
  throw ConfigError("unknown probe task '" + s + "' (cls, reg, surv, loc, seg, retr)");
}

const char* to_string(TokenKind k) { return k == TokenKind::cls ? "class" : "patch"; }

TokenKind token_kind_from_string(const std::string& s) {
  if (s == "class" || s == "cls") return TokenKind::cls;
  if (s == "patch") return TokenKind::patch;
  throw ConfigError("token kind must be 'class' or 'patch', got '" + s + "'");
}

// ---- MLP -----------------------------------------------------------------------

MlpProbe::MlpProbe(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng)
    : l1(in, hidden, rng, true, fan_in_std(in)), l2(hidden, out, rng, true, fan_in_std(hidden)) {}

Tensor MlpProbe::operator()(const Tensor& x) const {
  check_dim(x, l1.in(), "mlp probe");
  return l2(ops::gelu(l1(x)));
}

Tensor MlpProbe::forward(const ProbeSample& s) const { return (*this)(class_row(s)); }

void MlpProbe::collect(nn::ParamRefs& out, const std::string& prefix) {
  l1.collect(out, prefix + "fc1.");
  l2.collect(out, prefix + "fc2.");
}

// ---- Q-Former ------------------------------------------------------------------

QFormerProbe::QFormerProbe(std::size_t dim, std::size_t n_queries, std::size_t heads, std::size_t out,
                           std::mt19937_64& rng)
    : n_heads(heads),
      score_scale(1.0 / std::sqrt(static_cast<double>(dim / std::max<std::size_t>(heads, 1)))),
      queries(nn::trunc_normal({n_queries, dim}, 0.02, rng)),
      q(dim, dim, rng, true, fan_in_std(dim)),
      k(dim, dim, rng, true, fan_in_std(dim)),
      v(dim, dim, rng, true, fan_in_std(dim)),
      o(dim, dim, rng, true, fan_in_std(dim)),
      head(dim, out, rng, true, fan_in_std(dim)) {
  if (heads == 0 || dim % heads) throw ConfigError("qformer heads must divide the token dim");
  if (n_queries == 0) throw ConfigError("qformer needs at least one query");
}

Tensor QFormerProbe::pooled(const Tensor& tokens) const {
  if (tokens.rows() == 0) throw DataError("qformer: empty token grid");
  check_dim(tokens, queries.dim(1), "qformer probe");
  const std::size_t nq = queries.dim(0), n = tokens.rows();
  const Tensor att = ops::attention(q(queries), k(tokens), v(tokens), 1, nq, n, n_heads, score_scale);
  return ops::mean_rows(ops::add(queries, o(att)));
}

Tensor QFormerProbe::operator()(const Tensor& tokens) const { return head(pooled(tokens)); }

Tensor QFormerProbe::forward(const ProbeSample& s) const { return (*this)(patch_tokens(s)); }

void QFormerProbe::collect(nn::ParamRefs& out, const std::string& prefix) {
  out.push_back({prefix + "queries", &queries});
  q.collect(out, prefix + "q.");
  k.collect(out, prefix + "k.");
  v.collect(out, prefix + "v.");
  o.collect(out, prefix + "o.");
  head.collect(out, prefix + "head.");
}

// ---- localisation --------------------------------------------------------------

Tensor soft_argmax(const Tensor& scores, std::span<const std::array<double, 3>> centers) {
  const std::size_t n = centers.size();
  if (n == 0 || scores.numel() != n) throw DataError("soft_argmax: scores and centres differ in length");
  std::vector<double> c;
  c.reserve(3 * n);
  for (const auto& p : centers) c.insert(c.end(), p.begin(), p.end());
  const Tensor w = ops::softmax_rows(ops::reshape(scores, {1, n}));
  return ops::matmul(w, Tensor::from({n, 3}, std::move(c)));
}

LocalisationHead::LocalisationHead(std::size_t dim, std::size_t heads, std::mt19937_64& rng)
    : n_heads(heads),
      q(dim, dim, rng, true, fan_in_std(dim)),
      k(dim, dim, rng, true, fan_in_std(dim)),
      v(dim, dim, rng, true, fan_in_std(dim)),
      o(dim, dim, rng, true, fan_in_std(dim)),
      score(dim, 1, rng, true, fan_in_std(dim)) {
  if (heads == 0 || dim % heads) throw ConfigError("localisation heads must divide the token dim");
}

Tensor LocalisationHead::scores(const Tensor& tokens) const {
  check_dim(tokens, q.in(), "localisation head");
  const std::size_t n = tokens.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.in() / n_heads));
  const Tensor h = ops::add(tokens, o(ops::attention(q(tokens), k(tokens), v(tokens), 1, n, n, n_heads, scale)));
  return ops::reshape(score(h), {1, n});
}

Tensor LocalisationHead::operator()(const Tensor& tokens, std::span<const std::array<double, 3>> centers) const {
  return soft_argmax(scores(tokens), centers);
}

Tensor LocalisationHead::forward(const ProbeSample& s) const { return (*this)(patch_tokens(s), s.patches.centers); }

void LocalisationHead::collect(nn::ParamRefs& out, const std::string& prefix) {
  q.collect(out, prefix + "q.");
  k.collect(out, prefix + "k.");
  v.collect(out, prefix + "v.");
  o.collect(out, prefix + "o.");
  score.collect(out, prefix + "score.");
}

// ---- segmentation --------------------------------------------------------------

SegDecoder::SegDecoder(std::size_t dim, std::size_t channels, std::size_t classes, std::mt19937_64& rng)
    : n_classes(classes),
      w1(nn::trunc_normal({channels, dim * 27}, fan_in_std(dim * 27), rng)),
      b1(Tensor::zeros({channels}, true)),
      w2(nn::trunc_normal({channels, channels * 27}, fan_in_std(channels * 27), rng)),
      b2(Tensor::zeros({channels}, true)),
      w3(nn::trunc_normal({classes, channels * 27}, fan_in_std(channels * 27), rng)),
      b3(Tensor::zeros({classes}, true)) {
  if (classes < 2) throw ConfigError("segmentation needs at least 2 classes");
}

Tensor SegDecoder::operator()(const Tensor& tokens, const Dims& grid, const Dims& target) const {
  if (tokens.rows() != grid.count()) throw DataError("segmentation: token count does not match the grid");
  check_dim(tokens, w1.dim(1) / 27, "segmentation decoder");
  if (target.d < grid.d || target.h < grid.h || target.w < grid.w) {
    throw DataError("segmentation target is smaller than the token grid");
  }
  const std::size_t dim = tokens.cols();
  Tensor x = ops::reshape(ops::transpose(tokens), {dim, grid.d, grid.h, grid.w});
  Dims g = grid;
  auto up = [&](const Tensor& t) {
    g = {g.d * 2, g.h * 2, g.w * 2};
    return ops::resize_trilinear(t, g.d, g.h, g.w);
  };
  x = up(ops::relu(ops::conv3d(x, w1, b1)));
  x = up(ops::relu(ops::conv3d(x, w2, b2)));
  x = up(ops::conv3d(x, w3, b3));
  if (!(g == target)) x = ops::resize_trilinear(x, target.d, target.h, target.w);
  return x;
}

Tensor SegDecoder::forward(const ProbeSample& s) const {
  return (*this)(patch_tokens(s), s.patches.grid, s.label_dims);
}

void SegDecoder::collect(nn::ParamRefs& out, const std::string& prefix) {
  out.push_back({prefix + "conv1.weight", &w1});
  out.push_back({prefix + "conv1.bias", &b1});
  out.push_back({prefix + "conv2.weight", &w2});
  out.push_back({prefix + "conv2.bias", &b2});
  out.push_back({prefix + "conv3.weight", &w3});
  out.push_back({prefix + "conv3.bias", &b3});
}

std::vector<std::int32_t> argmax_channels(const Tensor& logits) {
  const std::size_t c = logits.dim(0), n = logits.numel() / c;
  std::vector<std::int32_t> out(n, 0);
  const double* d = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k)
      if (d[k * n + i] > d[best * n + i]) best = k;
    out[i] = static_cast<std::int32_t>(best);
  }
  return out;
}

// ---- survival ------------------------------------------------------------------

SurvivalHead::SurvivalHead(std::size_t dim, std::mt19937_64& rng) : lin(dim, 1, rng, true, fan_in_std(dim)) {}

Tensor SurvivalHead::forward(const ProbeSample& s) const {
  const Tensor x = class_row(s);
  check_dim(x, lin.in(), "survival head");
  return lin(x);
}

void SurvivalHead::collect(nn::ParamRefs& out, const std::string& prefix) { lin.collect(out, prefix + "linear."); }

// ---- retrieval -----------------------------------------------------------------

std::size_t retrieval_rank(std::span<const double> query, const std::vector<std::vector<double>>& candidates,
                           std::size_t positive) {
  if (positive >= candidates.size()) throw DataError("retrieval: positive index out of range");
  auto norm = [](std::span<const double> x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    if (s == 0.0) throw DataError("retrieval: zero-norm embedding");
    return std::sqrt(s);
  };
  const double qn = norm(query);
  std::vector<double> sim(candidates.size());
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    if (candidates[c].size() != query.size()) throw DataError("retrieval: embedding dims differ");
    double dot = 0.0;
    for (std::size_t i = 0; i < query.size(); ++i) dot += query[i] * candidates[c][i];
    sim[c] = dot / (qn * norm(candidates[c]));
  }
  std::size_t rank = 1;
  for (std::size_t c = 0; c < candidates.size(); ++c)
    if (sim[c] > sim[positive] || (sim[c] == sim[positive] && c < positive)) ++rank;
  return rank;
}

bool rank_retrieval(std::span<const double> query, const std::vector<std::vector<double>>& candidates,
                    std::size_t positive, std::size_t k) {
  return retrieval_rank(query, candidates, positive) <= k;
}

// ---- splits --------------------------------------------------------------------

Split make_split(const std::vector<std::string>& patients, double val_fraction, double test_fraction,
                 std::uint64_t seed) {
  if (!(val_fraction >= 0.0 && test_fraction >= 0.0 && val_fraction + test_fraction < 1.0)) {
    throw ConfigError("split fractions must be non-negative and sum below 1");
  }
  std::vector<std::string> unique(patients.begin(), patients.end());
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  std::mt19937_64 rng(seed);
  for (std::size_t i = unique.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(unique[i - 1], unique[pick(rng)]);
  }
  const auto n = static_cast<double>(unique.size());
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * n));
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * n));
  if (n_test + n_val >= unique.size()) throw DataError("too few patients for the requested split");
  std::map<std::string, int> part;
  for (std::size_t i = 0; i < unique.size(); ++i) part[unique[i]] = i < n_test ? 2 : (i < n_test + n_val ? 1 : 0);
  Split s;
  for (std::size_t i = 0; i < patients.size(); ++i) {
    const int p = part[patients[i]];
    (p == 0 ? s.train : p == 1 ? s.val : s.test).push_back(i);
  }
  return s;
}

void check_patient_disjoint(const Split& split, const std::vector<std::string>& patients) {
  std::map<std::string, int> seen;
  const std::vector<std::size_t>* parts[3] = {&split.train, &split.val, &split.test};
  for (int p = 0; p < 3; ++p)
    for (auto i : *parts[p]) {
      if (i >= patients.size()) throw DataError("split index out of range");
      auto [it, fresh] = seen.emplace(patients[i], p);
      if (!fresh && it->second != p) throw DataError("patient " + patients[i] + " appears in more than one split");
    }
}

std::vector<std::size_t> subsample(const std::vector<std::size_t>& train, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("probe fraction must lie in (0, 1]");
  std::vector<std::size_t> s = train;
  std::mt19937_64 rng(seed);
  for (std::size_t i = s.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(s[i - 1], s[pick(rng)]);
  }
  const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(s.size()) - 1e-9));
  s.resize(std::max<std::size_t>(std::min(keep, s.size()), s.empty() ? 0 : 1));
  return s;
}

// ---- training ------------------------------------------------------------------

bool higher_is_better(Task t) { return !(t == Task::reg || t == Task::loc); }

std::string metric_name(Task t) {
  switch (t) {
    case Task::cls: return "auroc";
    case Task::reg: return "mae";
    case Task::loc: return "mae";
    case Task::surv: return "c_index";
    case Task::seg: return "dice_macro";
    case Task::retr: return "recall_at_10";
  }
  return "?";
}

Tensor task_loss(const ProbeModel& m, Task task, std::span<const ProbeSample* const> batch) {
  if (batch.empty()) throw DataError("empty probe batch");
  if (task == Task::seg) {
    std::vector<Tensor> terms;
    for (const auto* s : batch) {
      const Tensor logits = m.forward(*s);
      if (s->labels.size() * logits.dim(0) != logits.numel()) throw DataError("sample " + s->id + ": label volume shape mismatch");
      terms.push_back(ops::cross_entropy_channels_first(logits, s->labels));
    }
    std::vector<double> w(terms.size(), 1.0 / static_cast<double>(terms.size()));
    return ops::weighted_sum(terms, w);
  }
  std::vector<Tensor> rows;
  std::vector<double> target;
  for (const auto* s : batch) {
    rows.push_back(m.forward(*s));
    target.insert(target.end(), s->target.begin(), s->target.end());
  }
  const Tensor out = ops::concat_rows(rows);
  switch (task) {
    case Task::cls:
      return ops::bce_with_logits(out, target);
    case Task::reg:
    case Task::loc:
      if (target.size() != out.numel()) throw DataError("regression targets do not match probe outputs");
      return ops::mse(out, target);
    case Task::surv: {
      std::vector<double> times;
      std::vector<std::uint8_t> events;
      for (const auto* s : batch) {
        if (s->target.size() != 2) throw DataError("survival target must be (time, event)");
        times.push_back(s->target[0]);
        events.push_back(s->target[1] != 0.0);
      }
      return ops::scale(ops::cox_nll(out, times, events), 1.0 / static_cast<double>(batch.size()));
    }
    default:
      throw ConfigError(std::string("task ") + to_string(task) + " has no trainable probe");
  }
}

std::vector<std::vector<double>> predict(const ProbeModel& m, Task task, const std::vector<ProbeSample>& data,
                                         std::span<const std::size_t> idx) {
  ag::NoGradGuard ng;
  std::vector<std::vector<double>> out;
  for (auto i : idx) {
    const Tensor y = m.forward(data[i]);
    std::vector<double> v(y.values().begin(), y.values().end());
    if (task == Task::cls)
      for (double& p : v) p = 1.0 / (1.0 + std::exp(-p));
    out.push_back(std::move(v));
  }
  return out;
}

std::vector<std::vector<std::int32_t>> predict_labels(const ProbeModel& m, const std::vector<ProbeSample>& data,
                                                      std::span<const std::size_t> idx) {
  ag::NoGradGuard ng;
  std::vector<std::vector<std::int32_t>> out;
  for (auto i : idx) out.push_back(argmax_channels(m.forward(data[i])));
  return out;
}

double evaluate(const ProbeModel& m, Task task, const std::vector<ProbeSample>& data, std::span<const std::size_t> idx) {
  if (idx.empty()) throw DataError("cannot evaluate a probe on an empty split");
  if (task == Task::seg) {
    const auto labels = predict_labels(m, data, idx);
    const auto* seg = dynamic_cast<const SegDecoder*>(&m);
    const std::size_t n_classes = seg ? seg->n_classes : 2;
    double total = 0.0;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const auto d = metrics::dice(labels[j], data[idx[j]].labels, n_classes);
      total += std::isnan(d.macro) ? 0.0 : d.macro;
    }
    return total / static_cast<double>(idx.size());
  }
  const auto pred = predict(m, task, data, idx);
  switch (task) {
    case Task::cls: {
      std::vector<double> s;
      std::vector<std::uint8_t> l;
      for (std::size_t j = 0; j < idx.size(); ++j) {
        s.push_back(pred[j][0]);
        l.push_back(data[idx[j]].target.at(0) != 0.0);
      }
      const bool both = std::count(l.begin(), l.end(), 1) > 0 && std::count(l.begin(), l.end(), 0) > 0;
      return both ? metrics::auroc_value(s, l) : metrics::accuracy(s, l);
    }
    case Task::reg:
    case Task::loc: {
      std::vector<double> p, t;
      for (std::size_t j = 0; j < idx.size(); ++j) {
        p.insert(p.end(), pred[j].begin(), pred[j].end());
        t.insert(t.end(), data[idx[j]].target.begin(), data[idx[j]].target.end());
      }
      return metrics::mae(p, t);
    }
    case Task::surv: {
      std::vector<double> r, t;
      std::vector<std::uint8_t> e;
      for (std::size_t j = 0; j < idx.size(); ++j) {
        r.push_back(pred[j][0]);
        t.push_back(data[idx[j]].target.at(0));
        e.push_back(data[idx[j]].target.at(1) != 0.0);
      }
      return metrics::c_index(r, t, e);
    }
    default:
      throw ConfigError(std::string("task ") + to_string(task) + " has no trainable probe");
  }
}

namespace {

/// Mean training loss over the validation split; +inf when undefined.
double val_loss(const ProbeModel& m, Task task, const std::vector<ProbeSample>& data, std::span<const std::size_t> idx) {
  ag::NoGradGuard ng;
  std::vector<const ProbeSample*> batch;
  for (auto i : idx) batch.push_back(&data[i]);
  if (task == Task::surv && std::none_of(batch.begin(), batch.end(), [](const ProbeSample* s) { return s->target.at(1) != 0.0; })) {
    return std::numeric_limits<double>::infinity();
  }
  const double v = task_loss(m, task, batch).item();
  return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
}

}  // namespace

FitResult fit(ProbeModel& m, const std::vector<ProbeSample>& data, const Split& split, const FitOptions& o) {
  if (o.task == Task::retr) throw ConfigError("retrieval is evaluated without a trained probe");
  if (o.epochs == 0 || o.batch_size == 0) throw ConfigError("probe epochs and batch size must be positive");
  std::vector<std::string> patients;
  for (const auto& s : data) patients.push_back(s.patient);
  check_patient_disjoint(split, patients);
  if (!o.expected_fingerprint.empty()) {
    for (const auto& s : data)
      if (s.fingerprint != o.expected_fingerprint) {
        throw DataError("sample " + s.id + " was embedded by backbone " + s.fingerprint + ", expected " +
                        o.expected_fingerprint);
      }
  }
  if (split.train.empty() || split.val.empty()) throw DataError("probe training needs non-empty train and val splits");

  FitResult r;
  r.train_used = subsample(split.train, o.fraction, o.seed);
  const nn::ParamRefs params = m.params();
  nn::set_requires_grad(params, true);
  std::vector<std::uint8_t> decay;
  for (const auto& p : params) decay.push_back(p.name.size() >= 6 && p.name.ends_with("weight"));
  train::AdamW opt;
  std::vector<std::vector<double>> grads(params.size());
  std::vector<std::vector<double>> best;
  auto snapshot = [&] {
    best.clear();
    for (const auto& p : params) best.emplace_back(p.tensor->values().begin(), p.tensor->values().end());
  };

  std::mt19937_64 rng(aug::derive_seed(o.seed, 2));
  std::vector<std::size_t> order = r.train_used;
  const bool up = higher_is_better(o.task);
  std::size_t since_best = 0;
  double best_loss = std::numeric_limits<double>::infinity();
  for (std::size_t epoch = 0; epoch < o.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order[i - 1], order[pick(rng)]);
    }
    const double lr = o.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(o.epochs)));
    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t b = 0; b < order.size(); b += o.batch_size) {
      std::vector<const ProbeSample*> batch;
      for (std::size_t j = b; j < std::min(order.size(), b + o.batch_size); ++j) batch.push_back(&data[order[j]]);
      if (o.task == Task::surv && std::none_of(batch.begin(), batch.end(), [](const ProbeSample* s) { return s->target.at(1) != 0.0; })) {
        continue;  // no events: the partial likelihood is undefined
      }
      if (o.task == Task::surv && batch.size() < 2) continue;
      nn::zero_grad(params);
      const Tensor loss = task_loss(m, o.task, batch);
      if (!std::isfinite(loss.item())) throw NumericalError("probe loss became non-finite at epoch " + std::to_string(epoch));
      loss.backward();
      for (std::size_t i = 0; i < params.size(); ++i) {
        const auto g = params[i].tensor->grad();
        grads[i].assign(params[i].tensor->numel(), 0.0);
        if (!g.empty()) std::copy(g.begin(), g.end(), grads[i].begin());
      }
      opt.step(params, grads, lr, o.weight_decay, decay);
      loss_sum += loss.item();
      ++n_batches;
    }
    nn::zero_grad(params);
    r.loss_trace.push_back(n_batches ? loss_sum / static_cast<double>(n_batches) : NAN);
    const double val = evaluate(m, o.task, data, split.val);
    r.val_trace.push_back(val);
    const double vloss = val_loss(m, o.task, data, split.val);
    r.val_loss_trace.push_back(vloss);
    // Ties on the metric (e.g. Dice stuck at 0 while the decoder still predicts
    // background everywhere) fall back to the validation loss.
    const bool tie = val == r.best_val;
    const bool better = r.val_trace.size() == 1 || (up ? val > r.best_val : val < r.best_val) ||
                        (tie && vloss < best_loss);
    if (better) {
      r.best_val = val;
      best_loss = vloss;
      r.best_epoch = epoch;
      snapshot();
      since_best = 0;
    } else if (++since_best >= o.patience && o.patience > 0) {
      break;
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) std::copy(best[i].begin(), best[i].end(), params[i].tensor->data());
  return r;
}

}  // namespace volssl::probe
