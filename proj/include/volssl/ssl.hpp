#pragma once
// Projection heads and the self-distillation objectives: class-token
// distillation across views, masked patch-token distillation, and the KoLeo
// nearest-neighbour spreading term.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "volssl/nn.hpp"

namespace volssl::ssl {

using ag::Tensor;

struct HeadConfig {
  std::size_t in_dim = 864;
  std::size_t hidden = 2048;
  std::size_t bottleneck = 256;
  std::size_t n_prototypes = 65536;

  void validate() const;
  bool operator==(const HeadConfig&) const = default;
  /// hidden 256, bottleneck 64, 64 prototypes.
  static HeadConfig toy(std::size_t in_dim);
};

struct HeadOutput {
  Tensor embedding;  // l2-normalised bottleneck [n, bottleneck]
  Tensor logits;     // cosine logits [n, K]
};

/// Linear-GELU-Linear-GELU-Linear to the bottleneck, l2 normalisation, then a
/// weight-normalised prototype layer (rows of `prototypes` are unit vectors).
struct ProjectionHead {
  HeadConfig cfg;
  nn::Linear l1, l2, l3;
  Tensor prototypes;  // [K, bottleneck]

  static ProjectionHead init(const HeadConfig& cfg, std::uint64_t seed);
  HeadOutput forward(const Tensor& x) const;
  /// Rescales every prototype row to unit norm.
  void renormalize_prototypes();
  void collect(nn::ParamRefs& out, const std::string& prefix);
};

struct Temperatures {
  double teacher = 0.07;
  double student = 0.1;
};

struct LossWeights {
  double dino = 1.0;
  double ibot = 1.0;
  double koleo = 0.1;
};

inline constexpr double kKoleoEps = 1e-8;

/// softmax((teacher - center) / tau) row-wise, without gradient.
Tensor teacher_probs(const Tensor& teacher_logits, std::span<const double> center, double tau);

/// Mean over (teacher global view t, student view v), v != t, of the batch-mean
/// cross-entropy H(teacher_probs_t, softmax(student_v / tau_s)). Student views
/// list the global crops first, so index equality marks the same crop.
Tensor dino_loss(std::span<const Tensor> student_logits, std::span<const Tensor> teacher_logits,
                 std::span<const double> center, const Temperatures& t);

struct IbotResult {
  Tensor loss;
  bool empty = false;  // no masked positions; loss is 0
};

/// Mean cross-entropy over masked positions. Positions identify (view, token)
/// and must agree between student and teacher rows.
IbotResult ibot_loss(const Tensor& student_patch_logits, std::span<const std::size_t> student_positions,
                     const Tensor& teacher_patch_logits, std::span<const std::size_t> teacher_positions,
                     std::span<const double> center, const Temperatures& t);

/// -(1/n) sum_i log(min_{j != i} ||x_i - x_j|| + eps) after row normalisation.
Tensor koleo_loss(const Tensor& embeddings, double eps = kKoleoEps);

/// KoLeo averaged over consecutive groups of `group` rows.
Tensor koleo_loss_grouped(const Tensor& embeddings, std::size_t group, double eps = kKoleoEps);

struct CenterState {
  std::vector<double> center;
  double momentum = 0.9;
};

/// Row mean of a batch of teacher logits.
std::vector<double> batch_mean(const Tensor& teacher_logits);

/// center <- m * center + (1 - m) * mean.
void update_center(CenterState& state, std::span<const double> mean);
void update_center(CenterState& state, const Tensor& teacher_logits);

struct LossComponents {
  Tensor dino, ibot, koleo;
};

Tensor total_loss(const LossComponents& c, const LossWeights& w);

}  // namespace volssl::ssl
