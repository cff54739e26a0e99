#pragma once
// Differentiable operations on ag::Tensor. Matrices are row-major [rows, cols];
// volumes used by the convolutional decoder are channels-first [C, D, H, W].

#include <cstdint>
#include <span>
#include <vector>

#include "volssl/tensor.hpp"

namespace volssl::ops {

using ag::Tensor;

// ---- linear algebra ------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k] x [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k] x [n,k]^T
/// x [n,in] * w [in,out] + b [out]; b may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {});
Tensor transpose(const Tensor& x);  // 2D

// ---- elementwise ---------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
/// a [n,c] + row [c] broadcast over rows.
Tensor add_row(const Tensor& a, const Tensor& row);
Tensor gelu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor log(const Tensor& a);

// ---- normalisation & softmax --------------------------------------------
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
Tensor softmax_rows(const Tensor& x, double temperature = 1.0);
Tensor log_softmax_rows(const Tensor& x, double temperature = 1.0);
Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12);

// ---- reductions ----------------------------------------------------------
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mean_rows(const Tensor& x);  // [n,c] -> [1,c]
/// Mean of consecutive row groups: [g*k, c] -> [g, c].
Tensor group_mean_rows(const Tensor& x, std::size_t group_size);
/// Weighted sum of scalar tensors.
Tensor weighted_sum(std::span<const Tensor> terms, std::span<const double> weights);

// ---- structure -----------------------------------------------------------
Tensor reshape(const Tensor& x, ag::Shape shape);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
/// Row i becomes `row` where mask[i] != 0, otherwise stays x[i].
Tensor replace_rows(const Tensor& x, std::span<const std::uint8_t> mask, const Tensor& row);
/// Repeat a [k,c] block n times along rows -> [n*k, c].
Tensor tile_rows(const Tensor& x, std::size_t n);

// ---- attention -----------------------------------------------------------
/// Multi-head scaled dot-product attention over `n_seq` independent sequences.
/// q is [n_seq*seq_q, d], k and v are [n_seq*seq_k, d]; heads split d evenly.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_seq, std::size_t seq_q,
                 std::size_t seq_k, std::size_t n_heads, double scale);

/// Per-row rotation angles for rotary embeddings. angles is [rows, pairs_per_head];
/// rows with active == 0 pass through unrotated.
struct RotaryTable {
  std::size_t rows = 0;
  std::size_t pairs = 0;
  std::vector<double> cos;
  std::vector<double> sin;
  std::vector<std::uint8_t> active;
};
/// Rotates interleaved channel pairs (2i, 2i+1) of every head.
Tensor rotary(const Tensor& x, std::size_t n_heads, const RotaryTable& table);

// ---- volumes -------------------------------------------------------------
/// 3x3x3 convolution, stride 1, zero padding 1. x [Cin,D,H,W], w [Cout, Cin*27], b [Cout].
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b);
/// Trilinear resize with half-voxel centres and edge clamping. x [C,D,H,W].
Tensor resize_trilinear(const Tensor& x, std::size_t d, std::size_t h, std::size_t w);

// ---- losses --------------------------------------------------------------
/// Mean over rows of -sum_k p_k * log_softmax(logits / tau)_k; targets are constants.
Tensor soft_cross_entropy(const Tensor& logits, const Tensor& target_probs, double tau);
/// -(1/n) sum_i log(min_{j!=i} ||x_i - x_j|| + eps) on rows as given.
Tensor koleo(const Tensor& x, double eps);
/// Breslow negative log partial likelihood (summed over events). risks has n elements.
Tensor cox_nll(const Tensor& risks, std::span<const double> times, std::span<const std::uint8_t> events);
Tensor mse(const Tensor& pred, std::span<const double> target);
Tensor l1(const Tensor& pred, std::span<const double> target);
Tensor bce_with_logits(const Tensor& logits, std::span<const double> target);
/// Mean softmax cross-entropy, logits [n,C] against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> labels);
/// Voxelwise softmax cross-entropy, logits [C, N...] channels-first against labels [N].
Tensor cross_entropy_channels_first(const Tensor& logits, std::span<const std::int32_t> labels);

}  // namespace volssl::ops
