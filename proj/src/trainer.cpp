#include "volssl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "volssl/config.hpp"
#include "volssl/errors.hpp"
#include "volssl/ops.hpp"

namespace volssl::train {

using ag::Tensor;

void TrainConfig::validate() const {
  if (per_step_samples == 0 || accumulation_steps == 0) {
    throw ConfigError("trainer.per_step_samples and accumulation_steps must be positive");
  }
  if (world_size != 1) {
    throw ConfigError("trainer.world_size > 1 needs a multi-process launcher; this build trains on one worker");
  }
  if (total_iterations == 0) throw ConfigError("trainer.total_iterations must be positive");
  if (!(base_lr > 0.0) || min_lr < 0.0 || min_lr > base_lr) {
    throw ConfigError("trainer learning rates need 0 <= min_lr <= base_lr, base_lr > 0");
  }
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("trainer.warmup_fraction must be in [0, 1)");
  if (weight_decay_start < 0.0 || weight_decay_end < 0.0) throw ConfigError("trainer weight decay must be >= 0");
  if (!(momentum_start >= 0.0 && momentum_start <= 1.0 && momentum_end >= 0.0 && momentum_end <= 1.0)) {
    throw ConfigError("trainer teacher momentum must lie in [0, 1]");
  }
  if (!(grad_clip >= 0.0)) throw ConfigError("trainer.grad_clip must be >= 0");
  if (loader_threads == 0 || queue_capacity == 0) {
    throw ConfigError("trainer.loader_threads and queue_capacity must be positive");
  }
  if (per_step_samples % resolved_koleo_group()) {
    throw ConfigError("trainer.koleo_group must divide per_step_samples");
  }
}

SslConfig SslConfig::toy() {
  SslConfig c;
  c.backbone = vit::BackboneConfig::toy();
  c.cls_head = ssl::HeadConfig::toy(c.backbone.embed_dim);
  c.patch_head = c.cls_head;
  c.augment.global_target = {56, 56, 56};
  c.augment.local_target = {28, 28, 28};
  c.augment.patch_size = c.backbone.patch_size;
  c.train.per_step_samples = 8;
  c.train.accumulation_steps = 1;
  c.train.total_iterations = 500;
  c.train.base_lr = 1e-3;
  c.train.min_lr = 1e-5;
  c.train.momentum_start = 0.99;
  return c;
}

void SslConfig::validate() const {
  backbone.validate();
  cls_head.validate();
  patch_head.validate();
  if (cls_head.in_dim != backbone.embed_dim || patch_head.in_dim != backbone.embed_dim) {
    throw ConfigError("projection head input must equal backbone.embed_dim");
  }
  augment.validate();
  if (augment.patch_size != backbone.patch_size) throw ConfigError("augment.patch_size must equal backbone.patch_size");
  vit::patch_grid(augment.global_target, backbone.patch_size);
  vit::patch_grid(augment.local_target, backbone.patch_size);
  if (!(temps.teacher > 0.0) || !(temps.student > 0.0)) throw ConfigError("ssl temperatures must be positive");
  if (!(center_momentum >= 0.0 && center_momentum <= 1.0)) throw ConfigError("ssl.center_momentum must lie in [0, 1]");
  if (weights.dino < 0.0 || weights.ibot < 0.0 || weights.koleo < 0.0) throw ConfigError("loss weights must be >= 0");
  if (!(koleo_eps > 0.0)) throw ConfigError("ssl.koleo_eps must be positive");
  train.validate();
  if (weights.koleo > 0.0 && train.resolved_koleo_group() < 2) {
    throw ConfigError("KoLeo needs at least 2 rows per group (trainer.koleo_group)");
  }
}

// ---- schedules ---------------------------------------------------------------

double cosine_between(double start, double end, std::size_t step, std::size_t total) {
  if (total <= 1) return end;
  const double p = static_cast<double>(std::min(step, total - 1)) / static_cast<double>(total - 1);
  return end + (start - end) * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

double learning_rate(const TrainConfig& c, std::size_t step) {
  const auto warm = static_cast<std::size_t>(std::llround(c.warmup_fraction * static_cast<double>(c.total_iterations)));
  if (step < warm) return c.base_lr * static_cast<double>(step + 1) / static_cast<double>(warm);
  return cosine_between(c.base_lr, c.min_lr, step - warm, c.total_iterations - warm);
}

double teacher_momentum(const TrainConfig& c, std::size_t step) {
  return cosine_between(c.momentum_start, c.momentum_end, step, c.total_iterations);
}

double weight_decay(const TrainConfig& c, std::size_t step) {
  return cosine_between(c.weight_decay_start, c.weight_decay_end, step, c.total_iterations);
}

void ema_update(const nn::ParamRefs& teacher, const nn::ParamRefs& student, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("EMA momentum must lie in [0, 1]");
  if (teacher.size() != student.size()) throw ConfigError("EMA update: parameter lists differ in length");
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    Tensor& t = *teacher[i].tensor;
    const Tensor& s = *student[i].tensor;
    if (t.shape() != s.shape()) {
      throw ConfigError("EMA update: shape mismatch for " + teacher[i].name + ": " + ag::shape_str(t.shape()) +
                        " vs " + ag::shape_str(s.shape()));
    }
    double* tv = t.data();
    const double* sv = s.data();
    for (std::size_t j = 0; j < t.numel(); ++j) tv[j] = lambda * tv[j] + (1.0 - lambda) * sv[j];
  }
}

void AdamW::step(const nn::ParamRefs& params, const std::vector<std::vector<double>>& grads, double lr, double wd,
                 const std::vector<std::uint8_t>& decay_mask) {
  if (m.size() != params.size()) {
    m.assign(params.size(), {});
    v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i].assign(params[i].tensor->numel(), 0.0);
      v[i].assign(params[i].tensor->numel(), 0.0);
    }
  }
  ++t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    double* p = params[i].tensor->data();
    const auto& g = grads[i];
    const double decay = decay_mask[i] ? wd : 0.0;
    for (std::size_t j = 0; j < g.size(); ++j) {
      m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * g[j];
      v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * g[j] * g[j];
      const double mh = m[i][j] / c1, vh = v[i][j] / c2;
      p[j] -= lr * (mh / (std::sqrt(vh) + eps) + decay * p[j]);
    }
  }
}

// ---- model and state -----------------------------------------------------------

SslModel SslModel::init(const SslConfig& cfg, std::uint64_t seed) {
  SslModel m;
  m.backbone = vit::Backbone::init(cfg.backbone, seed);
  m.cls_head = ssl::ProjectionHead::init(cfg.cls_head, aug::derive_seed(seed, 1));
  m.patch_head = ssl::ProjectionHead::init(cfg.patch_head, aug::derive_seed(seed, 2));
  return m;
}

void SslModel::collect(nn::ParamRefs& out, const std::string& prefix) {
  backbone.collect(out, prefix + "backbone.");
  cls_head.collect(out, prefix + "cls_head.");
  patch_head.collect(out, prefix + "patch_head.");
}

SslState SslState::init(const SslConfig& cfg) {
  cfg.validate();
  SslState s;
  s.cfg = cfg;
  s.student = SslModel::init(cfg, cfg.train.seed);
  s.teacher = nn::deep_clone(s.student, false);
  s.center_cls = {std::vector<double>(cfg.cls_head.n_prototypes, 0.0), cfg.center_momentum};
  s.center_patch = {std::vector<double>(cfg.patch_head.n_prototypes, 0.0), cfg.center_momentum};
  s.center_cls_sum.assign(cfg.cls_head.n_prototypes, 0.0);
  s.center_patch_sum.assign(cfg.patch_head.n_prototypes, 0.0);
  for (const auto& p : s.student.params()) s.grad_accum.emplace_back(p.tensor->numel(), 0.0);
  s.opt.m = s.grad_accum;
  s.opt.v = s.grad_accum;
  return s;
}

SslState clone(const SslState& state) { return deserialize(serialize(state)); }

// ---- train step ----------------------------------------------------------------

namespace {

std::vector<std::uint8_t> decay_mask_for(const nn::ParamRefs& params) {
  std::vector<std::uint8_t> mask;
  for (const auto& p : params) {
    const bool is_weight = p.name.size() >= 6 && p.name.compare(p.name.size() - 6, 6, "weight") == 0;
    mask.push_back(is_weight ? 1 : 0);
  }
  return mask;
}

void add_column_sums(const Tensor& logits, std::vector<double>& sum) {
  const std::size_t k = logits.cols();
  const double* d = logits.data();
  for (std::size_t r = 0; r < logits.rows(); ++r)
    for (std::size_t c = 0; c < k; ++c) sum[c] += d[r * k + c];
}

void close_center(ssl::CenterState& c, std::vector<double>& sum, std::size_t& rows) {
  if (rows) {
    for (double& v : sum) v /= static_cast<double>(rows);
    ssl::update_center(c, sum);
  }
  std::fill(sum.begin(), sum.end(), 0.0);
  rows = 0;
}

}  // namespace

StepReport train_step(SslState& state, const std::vector<aug::ViewBatch>& batch) {
  const SslConfig& cfg = state.cfg;
  const std::size_t B = batch.size();
  if (B == 0) throw DataError("train_step: empty micro-batch");
  const std::size_t group = cfg.train.resolved_koleo_group();
  if (cfg.weights.koleo > 0.0 && B % group) {
    throw ConfigError("train_step: micro-batch of " + std::to_string(B) + " is not a multiple of koleo_group " +
                      std::to_string(group));
  }
  for (const auto& vb : batch) {
    if (vb.global_views.size() != aug::kGlobalViews || vb.local_views.size() != aug::kLocalViews ||
        vb.masks.size() != aug::kGlobalViews) {
      throw DataError("train_step: every sample needs 2 global views, 8 local views and 2 masks");
    }
  }

  // View-major stacking: all samples of view 0, then view 1, ...
  std::vector<Volume> globals, locals;
  std::vector<const aug::MaskPattern*> masks;
  for (std::size_t v = 0; v < aug::kGlobalViews; ++v)
    for (const auto& vb : batch) {
      globals.push_back(vb.global_views[v]);
      masks.push_back(&vb.masks[v]);
    }
  for (std::size_t v = 0; v < aug::kLocalViews; ++v)
    for (const auto& vb : batch) locals.push_back(vb.local_views[v]);

  nn::ParamRefs sparams = state.student.params();
  nn::zero_grad(sparams);

  const auto s_global = vit::encode_batch(state.student.backbone, globals, masks);
  const auto s_local = vit::encode_batch(state.student.backbone, locals);

  std::vector<vit::EncoderOutput> t_global;
  ssl::HeadOutput t_cls;
  {
    ag::NoGradGuard ng;
    t_global = vit::encode_batch(state.teacher.backbone, globals);
    std::vector<Tensor> cls;
    for (const auto& o : t_global) cls.push_back(o.class_token);
    t_cls = state.teacher.cls_head.forward(ops::concat_rows(cls));
  }

  std::vector<Tensor> s_cls_rows;
  for (const auto& o : s_global) s_cls_rows.push_back(o.class_token);
  for (const auto& o : s_local) s_cls_rows.push_back(o.class_token);
  const ssl::HeadOutput s_cls = state.student.cls_head.forward(ops::concat_rows(s_cls_rows));

  const std::size_t n_views = aug::kGlobalViews + aug::kLocalViews;
  std::vector<Tensor> s_views, t_views;
  for (std::size_t v = 0; v < n_views; ++v) s_views.push_back(ops::slice_rows(s_cls.logits, v * B, (v + 1) * B));
  for (std::size_t v = 0; v < aug::kGlobalViews; ++v) t_views.push_back(ops::slice_rows(t_cls.logits, v * B, (v + 1) * B));
  const Tensor dino = ssl::dino_loss(s_views, t_views, state.center_cls.center, cfg.temps);

  // Masked patch distillation on the global views.
  std::vector<Tensor> s_patch_parts;
  std::vector<std::size_t> positions;
  std::vector<std::vector<std::size_t>> masked_rows(globals.size());
  for (std::size_t g = 0; g < globals.size(); ++g) {
    const std::size_t n = s_global[g].patches.size();
    for (std::size_t j = 0; j < n; ++j)
      if (masks[g]->masked[j]) {
        masked_rows[g].push_back(j);
        positions.push_back(g * n + j);
      }
    if (!masked_rows[g].empty()) s_patch_parts.push_back(ops::gather_rows(s_global[g].patches.tokens, masked_rows[g]));
  }
  Tensor ibot = Tensor::scalar(0.0);
  Tensor t_patch_logits;
  if (!positions.empty()) {
    {
      ag::NoGradGuard ng;
      std::vector<Tensor> parts;
      for (std::size_t g = 0; g < globals.size(); ++g)
        if (!masked_rows[g].empty()) parts.push_back(ops::gather_rows(t_global[g].patches.tokens, masked_rows[g]));
      t_patch_logits = state.teacher.patch_head.forward(ops::concat_rows(parts)).logits;
    }
    const Tensor s_patch_logits = state.student.patch_head.forward(ops::concat_rows(s_patch_parts)).logits;
    ibot = ssl::ibot_loss(s_patch_logits, positions, t_patch_logits, positions, state.center_patch.center, cfg.temps)
               .loss;
  }

  Tensor koleo = Tensor::scalar(0.0);
  if (cfg.weights.koleo > 0.0) {
    koleo = ssl::koleo_loss_grouped(ops::slice_rows(s_cls.embedding, 0, aug::kGlobalViews * B), group, cfg.koleo_eps);
  }

  const Tensor loss = ssl::total_loss({dino, ibot, koleo}, cfg.weights);

  StepReport rep;
  rep.loss = loss.item();
  rep.dino = dino.item();
  rep.ibot = ibot.item();
  rep.koleo = koleo.item();
  rep.step = state.step;
  ++state.micro_total;
  if (!std::isfinite(rep.loss)) {
    rep.skipped = true;
    std::ostringstream msg;
    msg << "non-finite loss at step " << state.step << " micro " << state.micro_step << " (dino " << rep.dino
        << ", ibot " << rep.ibot << ", koleo " << rep.koleo << "); micro-batch skipped";
    rep.diagnostic = msg.str();
    return rep;
  }

  loss.backward();
  for (std::size_t i = 0; i < sparams.size(); ++i) {
    const Tensor& p = *sparams[i].tensor;
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto& acc = state.grad_accum[i];
    for (std::size_t j = 0; j < g.size(); ++j) acc[j] += g[j];
  }
  nn::zero_grad(sparams);

  add_column_sums(t_cls.logits, state.center_cls_sum);
  state.center_cls_rows += t_cls.logits.rows();
  if (t_patch_logits.defined()) {
    add_column_sums(t_patch_logits, state.center_patch_sum);
    state.center_patch_rows += t_patch_logits.rows();
  }

  if (++state.micro_step < cfg.train.accumulation_steps) return rep;

  // Accumulation window closed: sum-then-scale, clip, update.
  const double inv = 1.0 / static_cast<double>(cfg.train.accumulation_steps);
  double sq = 0.0;
  for (auto& g : state.grad_accum)
    for (double& v : g) {
      v *= inv;
      sq += v * v;
    }
  rep.grad_norm = std::sqrt(sq);
  if (!std::isfinite(rep.grad_norm)) throw NumericalError("non-finite gradient norm at step " + std::to_string(state.step));
  if (cfg.train.grad_clip > 0.0 && rep.grad_norm > cfg.train.grad_clip) {
    const double f = cfg.train.grad_clip / (rep.grad_norm + 1e-6);
    for (auto& g : state.grad_accum)
      for (double& v : g) v *= f;
  }
  rep.lr = learning_rate(cfg.train, state.step);
  rep.momentum = teacher_momentum(cfg.train, state.step);
  state.opt.step(sparams, state.grad_accum, rep.lr, weight_decay(cfg.train, state.step), decay_mask_for(sparams));
  state.student.cls_head.renormalize_prototypes();
  state.student.patch_head.renormalize_prototypes();
  ema_update(state.teacher.params(), sparams, rep.momentum);
  close_center(state.center_cls, state.center_cls_sum, state.center_cls_rows);
  close_center(state.center_patch, state.center_patch_sum, state.center_patch_rows);
  for (auto& g : state.grad_accum) std::fill(g.begin(), g.end(), 0.0);
  state.micro_step = 0;
  ++state.step;
  rep.applied = true;
  rep.step = state.step;
  return rep;
}

// ---- data order ----------------------------------------------------------------

std::vector<std::size_t> micro_batch_indices(std::uint64_t seed, std::uint64_t micro, std::size_t batch,
                                             std::size_t corpus_size) {
  if (corpus_size == 0) throw DataError("training corpus is empty");
  std::vector<std::size_t> out;
  std::uint64_t cached_epoch = std::numeric_limits<std::uint64_t>::max();
  std::vector<std::size_t> perm(corpus_size);
  for (std::size_t i = 0; i < batch; ++i) {
    const std::uint64_t g = micro * batch + i;
    const std::uint64_t epoch = g / corpus_size;
    if (epoch != cached_epoch) {
      for (std::size_t k = 0; k < corpus_size; ++k) perm[k] = k;
      std::mt19937_64 rng(aug::derive_seed(aug::derive_seed(seed, 0), epoch));
      for (std::size_t k = corpus_size; k > 1; --k) {
        std::uniform_int_distribution<std::size_t> pick(0, k - 1);
        std::swap(perm[k - 1], perm[pick(rng)]);
      }
      cached_epoch = epoch;
    }
    out.push_back(perm[g % corpus_size]);
  }
  return out;
}

std::uint64_t view_seed(std::uint64_t seed, std::uint64_t micro, std::size_t slot) {
  return aug::derive_seed(aug::derive_seed(aug::derive_seed(seed, 1), micro), slot);
}

std::vector<aug::ViewBatch> make_micro_batch(const std::vector<CanonicalVolume>& corpus, const SslConfig& cfg,
                                             std::uint64_t micro) {
  const std::size_t B = cfg.train.per_step_samples;
  const auto idx = micro_batch_indices(cfg.train.seed, micro, B, corpus.size());
  std::vector<aug::ViewBatch> out;
  out.reserve(B);
  for (std::size_t s = 0; s < B; ++s) out.push_back(aug::sample_views(corpus[idx[s]], cfg.augment, view_seed(cfg.train.seed, micro, s)));
  return out;
}

ViewPrefetcher::ViewPrefetcher(const std::vector<CanonicalVolume>& corpus, const SslConfig& cfg,
                               std::uint64_t first_micro, std::uint64_t n_micro)
    : corpus_(corpus),
      cfg_(cfg),
      next_claim_(first_micro),
      next_out_(first_micro),
      end_micro_(n_micro > std::numeric_limits<std::uint64_t>::max() - first_micro ? std::numeric_limits<std::uint64_t>::max()
                                                                                   : first_micro + n_micro) {
  if (corpus.empty()) throw DataError("training corpus is empty");
  for (std::size_t i = 0; i < cfg.train.loader_threads; ++i) workers_.emplace_back([this] { run(); });
}

ViewPrefetcher::~ViewPrefetcher() {
  {
    std::lock_guard lk(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  for (auto& w : workers_) w.join();
}

void ViewPrefetcher::run() {
  for (;;) {
    std::uint64_t micro;
    {
      std::unique_lock lk(mu_);
      cv_.wait(lk, [&] {
        return stop_ || error_ || next_claim_ >= end_micro_ || next_claim_ - next_out_ < cfg_.train.queue_capacity;
      });
      if (stop_ || error_ || next_claim_ >= end_micro_) return;
      micro = next_claim_++;
    }
    try {
      auto mb = make_micro_batch(corpus_, cfg_, micro);
      std::lock_guard lk(mu_);
      ready_.emplace(micro, std::move(mb));
    } catch (...) {
      std::lock_guard lk(mu_);
      if (!error_) error_ = std::current_exception();
    }
    cv_.notify_all();
  }
}

std::optional<std::vector<aug::ViewBatch>> ViewPrefetcher::next() {
  std::unique_lock lk(mu_);
  if (next_out_ >= end_micro_) return std::nullopt;
  cv_.wait(lk, [&] { return error_ || ready_.count(next_out_); });
  if (error_) std::rethrow_exception(error_);
  auto node = ready_.extract(next_out_);
  ++next_out_;
  lk.unlock();
  cv_.notify_all();
  return std::move(node.mapped());
}

// ---- checkpoints ---------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'V', 'S', 'S', 'L', 'C', 'K', 'P', 'T'};

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ULL;
  }
  return h;
}

class Writer {
 public:
  template <class T>
  void pod(T v) {
    buf_.append(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    buf_ += s;
  }
  void blob(const std::string& name, const ag::Shape& shape, std::span<const double> values) {
    str(name);
    pod<std::uint32_t>(static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) pod<std::uint64_t>(d);
    buf_.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(double));
  }
  std::string finish() {
    pod<std::uint64_t>(fnv1a(buf_.data(), buf_.size()));
    return std::move(buf_);
  }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(const std::string& b) : b_(b) {}
  template <class T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  struct Blob {
    std::string name;
    ag::Shape shape;
    std::vector<double> values;
  };
  Blob blob() {
    Blob out;
    out.name = str();
    const auto rank = pod<std::uint32_t>();
    if (rank > 8) throw DataError("checkpoint blob '" + out.name + "' has implausible rank");
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      out.shape.push_back(pod<std::uint64_t>());
      n *= out.shape.back();
    }
    need(n * sizeof(double));
    out.values.resize(n);
    std::memcpy(out.values.data(), b_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return out;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > b_.size() - pos_) throw DataError("checkpoint is truncated");
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

void write_model(Writer& w, const std::string& prefix, SslModel& m) {
  for (const auto& p : m.params()) w.blob(prefix + p.name, p.tensor->shape(), p.tensor->values());
}

void write_vectors(Writer& w, const std::string& prefix, const nn::ParamRefs& names,
                   const std::vector<std::vector<double>>& vs) {
  for (std::size_t i = 0; i < names.size(); ++i) w.blob(prefix + names[i].name, {vs[i].size()}, vs[i]);
}

std::string header_of(const std::string& bytes, config::Json& cfg_json, Reader& r) {
  if (bytes.size() < sizeof kMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t) ||
      std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw DataError("not a volssl checkpoint (bad magic)");
  }
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, sizeof stored);
  if (stored != fnv1a(bytes.data(), body)) throw DataError("checkpoint checksum mismatch (corrupt or partial file)");
  for (std::size_t i = 0; i < sizeof kMagic; ++i) r.pod<char>();
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw ConfigError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const std::string text = r.str();
  try {
    cfg_json = config::Json::parse(text);
  } catch (const nlohmann::json::exception&) {
    throw DataError("checkpoint config header is not valid JSON");
  }
  return text;
}

void check_compatible(const config::Json& stored, const SslConfig& expected) {
  const config::Json want = config::ssl_to_json(expected);
  for (const char* block : {"backbone", "ssl"}) {
    for (const auto& item : want[block].items()) {
      const auto it = stored[block].find(item.key());
      if (it == stored[block].end() || *it != item.value()) {
        throw ConfigError(std::string("checkpoint config mismatch at ") + block + "." + item.key() + ": checkpoint has " +
                          (it == stored[block].end() ? std::string("nothing") : it->dump()) + ", expected " +
                          item.value().dump());
      }
    }
  }
}

void load_into(const nn::ParamRefs& refs, const std::string& prefix, std::map<std::string, Reader::Blob>& blobs) {
  for (const auto& p : refs) {
    auto it = blobs.find(prefix + p.name);
    if (it == blobs.end()) throw DataError("checkpoint is missing parameter " + prefix + p.name);
    if (it->second.shape != p.tensor->shape()) {
      throw DataError("checkpoint parameter " + prefix + p.name + " has shape " + ag::shape_str(it->second.shape) +
                      ", model expects " + ag::shape_str(p.tensor->shape()));
    }
    std::copy(it->second.values.begin(), it->second.values.end(), p.tensor->data());
  }
}

std::vector<double> take_vector(std::map<std::string, Reader::Blob>& blobs, const std::string& name, std::size_t n) {
  auto it = blobs.find(name);
  if (it == blobs.end() || it->second.values.size() != n) throw DataError("checkpoint entry " + name + " missing or resized");
  return std::move(it->second.values);
}

std::map<std::string, Reader::Blob> read_blobs(Reader& r) {
  std::map<std::string, Reader::Blob> blobs;
  const auto n = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < n; ++i) {
    auto b = r.blob();
    std::string name = b.name;
    blobs.emplace(std::move(name), std::move(b));
  }
  return blobs;
}

}  // namespace

std::string serialize(const SslState& state) {
  auto& s = const_cast<SslState&>(state);  // params() hands out mutable refs; nothing is modified
  Writer w;
  for (char c : kMagic) w.pod(c);
  w.pod<std::uint32_t>(kCheckpointVersion);
  w.str(config::ssl_to_json(state.cfg).dump());
  const nn::ParamRefs sp = s.student.params();
  const std::size_t n_blobs = 2 * sp.size() + 3 * sp.size() + 4;
  w.pod<std::uint64_t>(n_blobs);
  write_model(w, "student.", s.student);
  write_model(w, "teacher.", s.teacher);
  write_vectors(w, "opt.m.", sp, state.opt.m);
  write_vectors(w, "opt.v.", sp, state.opt.v);
  write_vectors(w, "accum.", sp, state.grad_accum);
  w.blob("center.cls", {state.center_cls.center.size()}, state.center_cls.center);
  w.blob("center.patch", {state.center_patch.center.size()}, state.center_patch.center);
  w.blob("center_sum.cls", {state.center_cls_sum.size()}, state.center_cls_sum);
  w.blob("center_sum.patch", {state.center_patch_sum.size()}, state.center_patch_sum);
  w.pod<std::uint64_t>(state.step);
  w.pod<std::uint64_t>(state.micro_step);
  w.pod<std::uint64_t>(state.micro_total);
  w.pod<std::uint64_t>(state.opt.t);
  w.pod<std::uint64_t>(state.center_cls_rows);
  w.pod<std::uint64_t>(state.center_patch_rows);
  return w.finish();
}

SslState deserialize(const std::string& bytes, const SslConfig* expected) {
  Reader r(bytes);
  config::Json cfg_json;
  header_of(bytes, cfg_json, r);
  SslConfig cfg = config::ssl_from_json(cfg_json);
  if (expected) check_compatible(cfg_json, *expected);

  SslState s = SslState::init(cfg);
  auto blobs = read_blobs(r);
  const nn::ParamRefs sp = s.student.params();
  load_into(sp, "student.", blobs);
  load_into(s.teacher.params(), "teacher.", blobs);
  for (std::size_t i = 0; i < sp.size(); ++i) {
    const std::size_t n = sp[i].tensor->numel();
    s.opt.m[i] = take_vector(blobs, "opt.m." + sp[i].name, n);
    s.opt.v[i] = take_vector(blobs, "opt.v." + sp[i].name, n);
    s.grad_accum[i] = take_vector(blobs, "accum." + sp[i].name, n);
  }
  s.center_cls.center = take_vector(blobs, "center.cls", cfg.cls_head.n_prototypes);
  s.center_patch.center = take_vector(blobs, "center.patch", cfg.patch_head.n_prototypes);
  s.center_cls_sum = take_vector(blobs, "center_sum.cls", cfg.cls_head.n_prototypes);
  s.center_patch_sum = take_vector(blobs, "center_sum.patch", cfg.patch_head.n_prototypes);
  s.step = r.pod<std::uint64_t>();
  s.micro_step = r.pod<std::uint64_t>();
  s.micro_total = r.pod<std::uint64_t>();
  s.opt.t = r.pod<std::uint64_t>();
  s.center_cls_rows = r.pod<std::uint64_t>();
  s.center_patch_rows = r.pod<std::uint64_t>();
  if (r.pos() + sizeof(std::uint64_t) != bytes.size()) throw DataError("checkpoint has trailing bytes");
  if (s.micro_step >= cfg.train.accumulation_steps) throw DataError("checkpoint accumulation counter exceeds config");
  if (expected) {
    // Architecture matches; run-level settings come from the caller.
    s.cfg = *expected;
    s.cfg.validate();
  }
  return s;
}

void save_checkpoint(const SslState& state, const std::filesystem::path& path) {
  write_binary_atomic(path, serialize(state));
}

SslState load_checkpoint(const std::filesystem::path& path, const SslConfig* expected) {
  return deserialize(read_binary(path), expected);
}

std::string backbone_fingerprint(const vit::Backbone& b) {
  auto copy = b;
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << nn::checksum(copy.params());
  return os.str();
}

FrozenBackbone load_frozen_backbone(const std::filesystem::path& path) {
  const std::string bytes = read_binary(path);
  Reader r(bytes);
  config::Json cfg_json;
  header_of(bytes, cfg_json, r);
  const SslConfig cfg = config::ssl_from_json(cfg_json);
  FrozenBackbone out{vit::Backbone::init(cfg.backbone, 0), {}};
  auto blobs = read_blobs(r);
  const nn::ParamRefs refs = out.backbone.params();
  load_into(refs, "teacher.backbone.", blobs);
  nn::set_requires_grad(refs, false);
  out.fingerprint = backbone_fingerprint(out.backbone);
  return out;
}

// ---- loop --------------------------------------------------------------------

SslState pretrain(SslState state, const std::vector<CanonicalVolume>& corpus, const PretrainOptions& opts) {
  const TrainConfig& tc = state.cfg.train;
  const std::size_t target = opts.steps ? state.step + opts.steps : tc.total_iterations;
  if (state.step >= target) return state;
  if (corpus.empty()) throw DataError("training corpus is empty");

  std::ofstream metrics;
  const auto ckpt = opts.out_dir / "checkpoint.bin";
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    metrics.open(opts.out_dir / "metrics.jsonl", std::ios::app);
    if (!metrics) throw DataError("cannot write " + (opts.out_dir / "metrics.jsonl").string());
  }

  constexpr std::size_t kMaxConsecutiveSkips = 20;
  std::size_t skips = 0;
  ViewPrefetcher loader(corpus, state.cfg, state.micro_total, std::numeric_limits<std::uint64_t>::max());
  while (state.step < target) {
    auto mb = loader.next();
    const StepReport rep = train_step(state, *mb);
    if (rep.skipped) {
      if (metrics.is_open()) metrics << config::Json{{"step", rep.step}, {"skipped", true}, {"diagnostic", rep.diagnostic}}.dump() << "\n";
      if (++skips >= kMaxConsecutiveSkips) {
        throw NumericalError("training diverged: " + std::to_string(skips) + " consecutive non-finite losses; last: " +
                             rep.diagnostic);
      }
    } else {
      skips = 0;
    }
    if (opts.on_step) opts.on_step(rep);
    if (!rep.applied) continue;
    if (metrics.is_open()) {
      metrics << config::Json{{"step", rep.step},   {"loss", rep.loss}, {"dino", rep.dino},
                              {"ibot", rep.ibot},   {"koleo", rep.koleo}, {"lr", rep.lr},
                              {"momentum", rep.momentum}, {"grad_norm", rep.grad_norm}}
                     .dump()
              << "\n";
      metrics.flush();
    }
    if (!opts.out_dir.empty() && tc.checkpoint_every && rep.step % tc.checkpoint_every == 0) save_checkpoint(state, ckpt);
  }
  if (!opts.out_dir.empty()) save_checkpoint(state, ckpt);
  return state;
}

}  // namespace volssl::train
