#pragma once
// Student/teacher self-distillation training: EMA teacher, gradient
// accumulation, schedules, AdamW and bit-exact checkpoints.

#include <condition_variable>
#include <cstdint>
#include <map>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "volssl/augment.hpp"
#include "volssl/backbone.hpp"
#include "volssl/ssl.hpp"

namespace volssl::train {

struct TrainConfig {
  std::size_t per_step_samples = 16;
  std::size_t accumulation_steps = 16;
  std::size_t world_size = 1;
  std::size_t total_iterations = 100000;
  double base_lr = 5e-4;
  double min_lr = 1e-6;
  double warmup_fraction = 0.1;
  double weight_decay_start = 0.04;
  double weight_decay_end = 0.4;
  double momentum_start = 0.992;
  double momentum_end = 1.0;
  double grad_clip = 3.0;          // global-norm clip; 0 disables
  std::size_t koleo_group = 0;     // rows per KoLeo neighbourhood; 0 = per_step_samples
  std::size_t checkpoint_every = 0;
  std::size_t loader_threads = 1;
  std::size_t queue_capacity = 4;
  std::uint64_t seed = 0;

  std::size_t effective_batch() const { return per_step_samples * accumulation_steps * world_size; }
  std::size_t resolved_koleo_group() const { return koleo_group ? koleo_group : per_step_samples; }
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct SslConfig {
  vit::BackboneConfig backbone;
  ssl::HeadConfig cls_head;
  ssl::HeadConfig patch_head;
  ssl::Temperatures temps;
  ssl::LossWeights weights;
  double center_momentum = 0.9;
  double koleo_eps = ssl::kKoleoEps;
  aug::AugmentConfig augment;
  TrainConfig train;

  /// Toy backbone and heads, desk-scale views.
  static SslConfig toy();
  void validate() const;
};

// Schedules over optimiser steps [0, total).
double cosine_between(double start, double end, std::size_t step, std::size_t total);
double learning_rate(const TrainConfig& c, std::size_t step);
double teacher_momentum(const TrainConfig& c, std::size_t step);
double weight_decay(const TrainConfig& c, std::size_t step);

/// teacher <- lambda * teacher + (1 - lambda) * student, elementwise.
void ema_update(const nn::ParamRefs& teacher, const nn::ParamRefs& student, double lambda);

struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t t = 0;
  std::vector<std::vector<double>> m, v;

  /// One update from the gradients in `grads`; decay applies where decay_mask is set.
  void step(const nn::ParamRefs& params, const std::vector<std::vector<double>>& grads, double lr, double wd,
            const std::vector<std::uint8_t>& decay_mask);
};

struct SslModel {
  vit::Backbone backbone;
  ssl::ProjectionHead cls_head;
  ssl::ProjectionHead patch_head;

  static SslModel init(const SslConfig& cfg, std::uint64_t seed);
  void collect(nn::ParamRefs& out, const std::string& prefix);
  nn::ParamRefs params() { return nn::params_of(*this); }
};

struct SslState {
  SslConfig cfg;
  SslModel student;
  SslModel teacher;  // never receives gradients
  ssl::CenterState center_cls;
  ssl::CenterState center_patch;
  AdamW opt;
  std::size_t step = 0;         // optimiser steps taken
  std::size_t micro_step = 0;   // position inside the accumulation window
  std::uint64_t micro_total = 0;  // micro-steps consumed; drives data order and view seeds
  std::vector<std::vector<double>> grad_accum;
  std::vector<double> center_cls_sum, center_patch_sum;
  std::size_t center_cls_rows = 0, center_patch_rows = 0;

  static SslState init(const SslConfig& cfg);
};

/// Deep copy; copying an SslState directly shares parameter storage.
SslState clone(const SslState& state);

struct StepReport {
  bool applied = false;  // an optimiser update happened on this micro-step
  bool skipped = false;  // non-finite loss; nothing accumulated
  std::string diagnostic;
  double loss = 0.0, dino = 0.0, ibot = 0.0, koleo = 0.0;
  double lr = 0.0, momentum = 0.0, grad_norm = 0.0;
  std::size_t step = 0;
};

/// One micro-step over `batch` (per_step_samples view sets). Applies the
/// optimiser, EMA and center updates when the accumulation window closes.
StepReport train_step(SslState& state, const std::vector<aug::ViewBatch>& batch);

/// Sample indices for micro-step `micro` (epoch-wise shuffles of the corpus).
std::vector<std::size_t> micro_batch_indices(std::uint64_t seed, std::uint64_t micro, std::size_t batch,
                                             std::size_t corpus_size);
std::uint64_t view_seed(std::uint64_t seed, std::uint64_t micro, std::size_t slot);

// ---- checkpoints -----------------------------------------------------------
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize(const SslState& state);
/// Rejects corrupt files; if `expected` is given, architecture fields must match.
SslState deserialize(const std::string& bytes, const SslConfig* expected = nullptr);
void save_checkpoint(const SslState& state, const std::filesystem::path& path);
SslState load_checkpoint(const std::filesystem::path& path, const SslConfig* expected = nullptr);

/// Reads only the teacher backbone (the frozen encoder) and its fingerprint.
struct FrozenBackbone {
  vit::Backbone backbone;
  std::string fingerprint;
};
FrozenBackbone load_frozen_backbone(const std::filesystem::path& path);
std::string backbone_fingerprint(const vit::Backbone& b);

// ---- data loading ----------------------------------------------------------
/// Produces micro-batches of view sets ahead of the trainer on loader_threads
/// background threads with a bounded queue. Output depends only on
/// (seed, micro index), never on thread scheduling.
class ViewPrefetcher {
 public:
  ViewPrefetcher(const std::vector<CanonicalVolume>& corpus, const SslConfig& cfg, std::uint64_t first_micro,
                 std::uint64_t n_micro);
  ~ViewPrefetcher();
  ViewPrefetcher(const ViewPrefetcher&) = delete;
  ViewPrefetcher& operator=(const ViewPrefetcher&) = delete;

  /// Next micro-batch in order; nullopt once exhausted.
  std::optional<std::vector<aug::ViewBatch>> next();

 private:
  void run();

  const std::vector<CanonicalVolume>& corpus_;
  SslConfig cfg_;
  std::uint64_t next_claim_, next_out_, end_micro_;
  std::map<std::uint64_t, std::vector<aug::ViewBatch>> ready_;
  std::exception_ptr error_;
  bool stop_ = false;
  std::mutex mu_;
  std::condition_variable cv_;
  std::vector<std::thread> workers_;
};

std::vector<aug::ViewBatch> make_micro_batch(const std::vector<CanonicalVolume>& corpus, const SslConfig& cfg,
                                             std::uint64_t micro);

struct PretrainOptions {
  std::size_t steps = 0;  // optimiser steps to run (0 = until total_iterations)
  std::filesystem::path out_dir;
  std::function<void(const StepReport&)> on_step;
};

/// Runs optimiser steps, writing metrics.jsonl and checkpoints into out_dir
/// when set. Returns the final state.
SslState pretrain(SslState state, const std::vector<CanonicalVolume>& corpus, const PretrainOptions& opts);

}  // namespace volssl::train
