#pragma once
// Frozen-feature probes: MLP and Q-Former heads for classification and
// regression, attention-pooled localisation, a convolutional segmentation
// decoder, a Cox survival head, cosine retrieval, and the shared training
// loop with patient-disjoint splits and best-epoch selection.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "volssl/backbone.hpp"
#include "volssl/nn.hpp"

namespace volssl::probe {

using ag::Tensor;

enum class Task { cls, reg, surv, loc, seg, retr };
enum class TokenKind { cls, patch };

const char* to_string(Task t);
Task task_from_string(const std::string& s);
const char* to_string(TokenKind k);
TokenKind token_kind_from_string(const std::string& s);

struct ProbeSample {
  std::string id;
  std::string patient;
  std::string fingerprint;
  std::vector<double> class_token;
  vit::TokenGrid patches;
  std::vector<double> target;        // cls {0,1}; reg values; loc (z,y,x); surv (time, event)
  std::vector<std::int32_t> labels;  // seg voxel labels
  Dims label_dims;
};

class ProbeModel {
 public:
  virtual ~ProbeModel() = default;
  virtual void collect(nn::ParamRefs& out, const std::string& prefix) = 0;
  /// Output for one sample: [1, n_out], or [C, D, H, W] for segmentation.
  virtual Tensor forward(const ProbeSample& s) const = 0;
  nn::ParamRefs params() {
    nn::ParamRefs p;
    collect(p, "");
    return p;
  }
};

/// Linear - GELU - Linear on the class token.
class MlpProbe : public ProbeModel {
 public:
  MlpProbe(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const;
  Tensor forward(const ProbeSample& s) const override;
  void collect(nn::ParamRefs& out, const std::string& prefix) override;
  nn::Linear l1, l2;
};

/// Learned queries cross-attend over patch tokens; query outputs (with the
/// query residual) are mean-pooled into a linear head. No positional term.
class QFormerProbe : public ProbeModel {
 public:
  QFormerProbe(std::size_t dim, std::size_t n_queries, std::size_t n_heads, std::size_t out, std::mt19937_64& rng);
  /// Pooled query representation [1, dim].
  Tensor pooled(const Tensor& tokens) const;
  Tensor operator()(const Tensor& tokens) const;
  Tensor forward(const ProbeSample& s) const override;
  void collect(nn::ParamRefs& out, const std::string& prefix) override;

  std::size_t n_heads;
  double score_scale;  // 1/sqrt(head_dim) by default
  Tensor queries;      // [n_queries, dim]
  nn::Linear q, k, v, o, head;
};

/// Self-attention over patch tokens, a per-token score, and the softmax-weighted
/// sum of patch centres. Outputs (z, y, x) in [0,1]^3.
class LocalisationHead : public ProbeModel {
 public:
  LocalisationHead(std::size_t dim, std::size_t n_heads, std::mt19937_64& rng);
  Tensor scores(const Tensor& tokens) const;  // [1, n]
  Tensor operator()(const Tensor& tokens, std::span<const std::array<double, 3>> centers) const;
  Tensor forward(const ProbeSample& s) const override;
  void collect(nn::ParamRefs& out, const std::string& prefix) override;

  std::size_t n_heads;
  nn::Linear q, k, v, o, score;
};

/// sum_i softmax(scores)_i * centers_i, scores [1, n].
Tensor soft_argmax(const Tensor& scores, std::span<const std::array<double, 3>> centers);

/// Three (conv3d, upsample x2) stages from the token grid, then a trilinear
/// resize to the target shape. Output [n_classes, D, H, W] logits.
class SegDecoder : public ProbeModel {
 public:
  SegDecoder(std::size_t dim, std::size_t channels, std::size_t n_classes, std::mt19937_64& rng);
  Tensor operator()(const Tensor& tokens, const Dims& grid, const Dims& target) const;
  Tensor forward(const ProbeSample& s) const override;
  void collect(nn::ParamRefs& out, const std::string& prefix) override;

  std::size_t n_classes;
  Tensor w1, b1, w2, b2, w3, b3;
};

/// Per-voxel argmax of [C, N...] logits.
std::vector<std::int32_t> argmax_channels(const Tensor& logits);

/// Linear map from the class token to a scalar risk.
class SurvivalHead : public ProbeModel {
 public:
  SurvivalHead(std::size_t dim, std::mt19937_64& rng);
  Tensor forward(const ProbeSample& s) const override;
  void collect(nn::ParamRefs& out, const std::string& prefix) override;
  nn::Linear lin;
};

// ---- retrieval ---------------------------------------------------------------
/// 1-based rank of candidates[positive] by cosine similarity to the query,
/// descending; ties keep candidate order. DataError on zero-norm vectors.
std::size_t retrieval_rank(std::span<const double> query, const std::vector<std::vector<double>>& candidates,
                           std::size_t positive);
bool rank_retrieval(std::span<const double> query, const std::vector<std::vector<double>>& candidates,
                    std::size_t positive, std::size_t k);

// ---- splits and training -----------------------------------------------------
struct Split {
  std::vector<std::size_t> train, val, test;
};

/// Patient-grouped random split; every patient lands in exactly one part.
Split make_split(const std::vector<std::string>& patients, double val_fraction, double test_fraction,
                 std::uint64_t seed);
/// DataError if any patient appears in more than one part.
void check_patient_disjoint(const Split& split, const std::vector<std::string>& patients);
/// The first ceil(fraction * n) of a seeded shuffle of `train`.
std::vector<std::size_t> subsample(const std::vector<std::size_t>& train, double fraction, std::uint64_t seed);

struct FitOptions {
  Task task = Task::cls;
  std::size_t epochs = 100;
  std::size_t patience = 10;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double fraction = 1.0;
  std::uint64_t seed = 0;
  std::string expected_fingerprint;  // checked against every sample when set
};

struct FitResult {
  std::vector<double> val_trace;   // validation metric per epoch
  std::vector<double> loss_trace;  // mean training loss per epoch
  std::vector<double> val_loss_trace;  // validation loss, tie-breaker for the metric
  std::size_t best_epoch = 0;
  double best_val = 0.0;
  std::vector<std::size_t> train_used;
};

/// Validation metric for a task: AUROC (cls), MAE (reg, loc), C-index (surv),
/// macro Dice (seg).
bool higher_is_better(Task t);
std::string metric_name(Task t);

/// Task loss over a set of samples.
Tensor task_loss(const ProbeModel& m, Task task, std::span<const ProbeSample* const> batch);

/// Trains the probe on split.train (subsampled by fraction), selects the
/// epoch with the best validation metric and restores its parameters.
FitResult fit(ProbeModel& m, const std::vector<ProbeSample>& data, const Split& split, const FitOptions& o);

/// Flat predictions per sample: probability (cls), values (reg, loc), risk (surv).
std::vector<std::vector<double>> predict(const ProbeModel& m, Task task, const std::vector<ProbeSample>& data,
                                         std::span<const std::size_t> idx);
std::vector<std::vector<std::int32_t>> predict_labels(const ProbeModel& m, const std::vector<ProbeSample>& data,
                                                      std::span<const std::size_t> idx);

double evaluate(const ProbeModel& m, Task task, const std::vector<ProbeSample>& data, std::span<const std::size_t> idx);

}  // namespace volssl::probe
