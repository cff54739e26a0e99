#pragma once
// 3D vision transformer encoder with multi-axis rotary position embeddings.
//
// Sequence layout per view: [class, register_0 .. register_{R-1}, patches...].
// Patches are ordered depth-major: token (gz, gy, gx) sits at index
// (gz * Gh + gy) * Gw + gx. Class and register tokens carry no rotation.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "volssl/augment.hpp"
#include "volssl/nn.hpp"
#include "volssl/ops.hpp"
#include "volssl/volume.hpp"

namespace volssl::vit {

using ag::Tensor;

struct BackboneConfig {
  std::size_t patch_size = 14;
  std::size_t embed_dim = 864;
  std::size_t n_blocks = 12;
  std::size_t n_heads = 12;
  std::size_t mlp_ratio = 4;
  std::size_t n_registers = 4;
  double rope_base = 100.0;
  double norm_eps = 1e-6;

  std::size_t head_dim() const { return embed_dim / n_heads; }
  std::size_t patch_voxels() const { return patch_size * patch_size * patch_size; }
  void validate() const;
  bool operator==(const BackboneConfig&) const = default;

  /// dim 96, 4 blocks, 4 heads, patch 14, 4 registers.
  static BackboneConfig toy();
};

struct TokenGrid {
  Tensor tokens;  // [Gd*Gh*Gw, dim]
  Dims grid;
  std::vector<std::array<double, 3>> centers;  // (z, y, x) in [0,1]^3
  std::size_t size() const { return grid.count(); }
};

struct EncoderOutput {
  Tensor class_token;  // [1, dim]
  Tensor registers;    // [n_registers, dim]
  TokenGrid patches;
  std::size_t sequence_length = 0;
};

/// Patch grid for a view; DataError naming the nearest valid shapes otherwise.
Dims patch_grid(const Dims& view, std::size_t patch_size);

/// Normalised centres (idx + 0.5) / G per axis, depth-major.
std::vector<std::array<double, 3>> patch_centers(const Dims& grid);

/// Flattened non-overlapping patches: [n_patches, p^3], each patch depth-major.
Tensor patchify(const Volume& view, std::size_t patch_size);

/// Per-pair frequencies for one axis: theta_j = base^(-j / pairs_per_axis).
std::vector<double> rope_frequencies(std::size_t head_dim, double base);

/// Rotation angles for one grid position: pair block a (z, y, x) uses p[a].
std::vector<double> rope_angles(const std::array<double, 3>& position, std::size_t head_dim, double base);

/// Rotates rows of x [n, n_heads*head_dim] by their positions.
Tensor rope_rotate(const Tensor& x, std::span<const std::array<double, 3>> positions, std::size_t n_heads,
                   double base);

struct Block {
  nn::LayerNorm ln1, ln2;
  nn::Linear q, k, v, proj, fc1, fc2;
  void collect(nn::ParamRefs& out, const std::string& prefix);
};

struct Backbone {
  BackboneConfig cfg;
  nn::Linear patch_embed;
  Tensor cls_token;   // [1, dim]
  Tensor registers;   // [R, dim]
  Tensor mask_token;  // [1, dim]
  std::vector<Block> blocks;
  nn::LayerNorm norm;

  static Backbone init(const BackboneConfig& cfg, std::uint64_t seed);
  void collect(nn::ParamRefs& out, const std::string& prefix);
  nn::ParamRefs params() { return nn::params_of(*this); }
};

/// Encodes equally shaped views in one batch. masks may be empty (no masking)
/// or hold one pointer per view (nullptr = unmasked).
std::vector<EncoderOutput> encode_batch(const Backbone& net, std::span<const Volume> views,
                                        std::span<const aug::MaskPattern* const> masks = {});

EncoderOutput encode(const Backbone& net, const Volume& view);
EncoderOutput encode_masked(const Backbone& net, const Volume& view, const aug::MaskPattern& mask);

/// Embedded input sequence before the transformer stack (exposed for tests).
Tensor embed_sequence(const Backbone& net, const Volume& view, const aug::MaskPattern* mask = nullptr);

}  // namespace volssl::vit
