#include "volssl/ssl.hpp"

#include <cmath>

#include "volssl/errors.hpp"
#include "volssl/ops.hpp"

namespace volssl::ssl {

void HeadConfig::validate() const {
  if (in_dim == 0 || hidden == 0 || bottleneck == 0) throw ConfigError("head sizes must be positive");
  if (n_prototypes < 2) throw ConfigError("head needs at least 2 prototypes");
}

HeadConfig HeadConfig::toy(std::size_t in_dim) { return {in_dim, 256, 64, 64}; }

ProjectionHead ProjectionHead::init(const HeadConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ProjectionHead h;
  h.cfg = cfg;
  h.l1 = nn::Linear(cfg.in_dim, cfg.hidden, rng);
  h.l2 = nn::Linear(cfg.hidden, cfg.hidden, rng);
  h.l3 = nn::Linear(cfg.hidden, cfg.bottleneck, rng);
  h.prototypes = nn::trunc_normal({cfg.n_prototypes, cfg.bottleneck}, 0.02, rng);
  h.renormalize_prototypes();
  return h;
}

HeadOutput ProjectionHead::forward(const Tensor& x) const {
  const Tensor z = l3(ops::gelu(l2(ops::gelu(l1(x)))));
  HeadOutput o;
  o.embedding = ops::l2_normalize_rows(z);
  o.logits = ops::matmul_nt(o.embedding, ops::l2_normalize_rows(prototypes));
  return o;
}

void ProjectionHead::renormalize_prototypes() {
  const std::size_t k = prototypes.dim(0), d = prototypes.dim(1);
  double* v = prototypes.data();
  for (std::size_t r = 0; r < k; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += v[r * d + c] * v[r * d + c];
    const double inv = s > 0.0 ? 1.0 / std::sqrt(s) : 0.0;
    for (std::size_t c = 0; c < d; ++c) v[r * d + c] *= inv;
  }
}

void ProjectionHead::collect(nn::ParamRefs& out, const std::string& prefix) {
  l1.collect(out, prefix + "mlp.0.");
  l2.collect(out, prefix + "mlp.1.");
  l3.collect(out, prefix + "mlp.2.");
  out.push_back({prefix + "prototypes", &prototypes});
}

namespace {

void check_temps(const Temperatures& t) {
  if (!(t.teacher > 0.0) || !(t.student > 0.0)) throw ConfigError("temperatures must be positive");
}

}  // namespace

Tensor teacher_probs(const Tensor& teacher_logits, std::span<const double> center, double tau) {
  if (!(tau > 0.0)) throw ConfigError("teacher temperature must be positive");
  ag::NoGradGuard guard;
  const std::size_t n = teacher_logits.rows(), k = teacher_logits.cols();
  if (!center.empty() && center.size() != k) throw DataError("center length does not match prototype count");
  std::vector<double> v(teacher_logits.values().begin(), teacher_logits.values().end());
  if (!center.empty())
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < k; ++c) v[r * k + c] -= center[c];
  return ops::softmax_rows(Tensor::from({n, k}, std::move(v)), tau).detach();
}

Tensor dino_loss(std::span<const Tensor> student_logits, std::span<const Tensor> teacher_logits,
                 std::span<const double> center, const Temperatures& t) {
  check_temps(t);
  if (student_logits.empty() || teacher_logits.empty()) throw DataError("dino_loss: no views");
  const std::size_t k = teacher_logits[0].cols();
  if (k < 2) throw DataError("dino_loss: need at least 2 prototypes");
  std::vector<Tensor> targets;
  for (const auto& tl : teacher_logits) targets.push_back(teacher_probs(tl, center, t.teacher));
  std::vector<Tensor> terms;
  for (std::size_t ti = 0; ti < targets.size(); ++ti)
    for (std::size_t si = 0; si < student_logits.size(); ++si) {
      if (si == ti) continue;
      if (student_logits[si].cols() != k || student_logits[si].rows() != targets[ti].rows()) {
        throw DataError("dino_loss: student and teacher logits disagree in shape");
      }
      terms.push_back(ops::soft_cross_entropy(student_logits[si], targets[ti], t.student));
    }
  if (terms.empty()) throw DataError("dino_loss: no cross-view pairs");
  std::vector<double> w(terms.size(), 1.0 / static_cast<double>(terms.size()));
  return ops::weighted_sum(terms, w);
}

IbotResult ibot_loss(const Tensor& student_patch_logits, std::span<const std::size_t> student_positions,
                     const Tensor& teacher_patch_logits, std::span<const std::size_t> teacher_positions,
                     std::span<const double> center, const Temperatures& t) {
  check_temps(t);
  if (student_positions.size() != teacher_positions.size() ||
      !std::equal(student_positions.begin(), student_positions.end(), teacher_positions.begin())) {
    throw DataError("ibot_loss: student and teacher positions are misaligned");
  }
  IbotResult r;
  if (student_positions.empty()) {
    r.loss = Tensor::scalar(0.0);
    r.empty = true;
    return r;
  }
  if (student_patch_logits.rows() != student_positions.size() ||
      teacher_patch_logits.rows() != teacher_positions.size() ||
      student_patch_logits.cols() != teacher_patch_logits.cols()) {
    throw DataError("ibot_loss: logits do not match the position lists");
  }
  r.loss = ops::soft_cross_entropy(student_patch_logits, teacher_probs(teacher_patch_logits, center, t.teacher),
                                   t.student);
  return r;
}

Tensor koleo_loss(const Tensor& embeddings, double eps) {
  if (embeddings.rank() != 2 || embeddings.rows() < 2) throw DataError("koleo_loss: need at least 2 embeddings");
  return ops::koleo(ops::l2_normalize_rows(embeddings), eps);
}

Tensor koleo_loss_grouped(const Tensor& embeddings, std::size_t group, double eps) {
  const std::size_t n = embeddings.rows();
  if (group < 2 || n % group) throw DataError("koleo_loss_grouped: rows must split into groups of at least 2");
  if (group == n) return koleo_loss(embeddings, eps);
  std::vector<Tensor> parts;
  for (std::size_t g = 0; g < n; g += group) parts.push_back(koleo_loss(ops::slice_rows(embeddings, g, g + group), eps));
  std::vector<double> w(parts.size(), 1.0 / static_cast<double>(parts.size()));
  return ops::weighted_sum(parts, w);
}

std::vector<double> batch_mean(const Tensor& teacher_logits) {
  const std::size_t n = teacher_logits.rows(), k = teacher_logits.cols();
  if (n == 0) throw DataError("center update needs a non-empty teacher batch");
  std::vector<double> m(k, 0.0);
  const double* v = teacher_logits.data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < k; ++c) m[c] += v[r * k + c];
  for (double& x : m) x /= static_cast<double>(n);
  return m;
}

void update_center(CenterState& state, std::span<const double> mean) {
  if (state.center.empty()) state.center.assign(mean.size(), 0.0);
  if (state.center.size() != mean.size()) throw DataError("center length does not match prototype count");
  const double m = state.momentum;
  for (std::size_t i = 0; i < mean.size(); ++i) state.center[i] = m * state.center[i] + (1.0 - m) * mean[i];
}

void update_center(CenterState& state, const Tensor& teacher_logits) {
  const auto m = batch_mean(teacher_logits);
  update_center(state, m);
}

Tensor total_loss(const LossComponents& c, const LossWeights& w) {
  if (w.dino < 0 || w.ibot < 0 || w.koleo < 0) throw ConfigError("loss weights must be non-negative");
  const Tensor terms[] = {c.dino, c.ibot, c.koleo};
  const double weights[] = {w.dino, w.ibot, w.koleo};
  return ops::weighted_sum(terms, weights);
}

}  // namespace volssl::ssl
