#pragma once
// Multi-crop view generation for self-distillation: two global and eight local
// augmented crops per sample, plus the token masks applied to the student's
// global views.

#include <array>
#include <cstdint>
#include <random>
#include <vector>

#include "volssl/volume.hpp"

namespace volssl::aug {

inline constexpr std::size_t kGlobalViews = 2;
inline constexpr std::size_t kLocalViews = 8;

struct Range {
  double lo = 0.0;
  double hi = 1.0;
};

struct AugmentConfig {
  Dims global_target{112, 112, 112};
  Dims local_target{56, 56, 56};
  std::size_t patch_size = 14;
  Range global_scale{0.30, 1.00};
  Range local_scale{0.05, 0.30};
  Range aspect{0.75, 1.33};
  double flip_prob = 0.5;        // per axis
  double window_prob = 1.0;
  double window_shift_iqr = 0.5;  // |shift| <= this * IQR
  double window_slope_jitter = 0.1;
  double slice_perm_prob = 0.2;  // axial only
  double mask_ratio = 0.5;
  std::size_t min_source_side = 16;

  /// Everything off; crops cover the whole volume.
  static AugmentConfig identity();
  /// Throws ConfigError on inconsistent settings.
  void validate() const;
};

/// Continuous crop box in source voxel-edge coordinates (voxel i spans [i, i+1)).
struct CropSpec {
  double scale = 1.0;                 // box volume / source volume
  std::array<double, 3> aspect{1, 1, 1};  // z, y, x stretch, geometric mean 1
  std::array<double, 3> offset{};     // z, y, x
  std::array<double, 3> extent{};     // z, y, x
  Dims target_shape;
  bool is_global = false;
  std::array<bool, 3> flips{};        // z, y, x
  bool slice_permuted = false;
  double window_slope = 1.0;
  double window_shift = 0.0;
};

struct MaskPattern {
  std::vector<std::uint8_t> masked;
  double ratio = 0.0;

  std::size_t count() const;
  std::size_t size() const { return masked.size(); }
};

struct ViewBatch {
  std::vector<Volume> global_views;
  std::vector<Volume> local_views;
  std::vector<CropSpec> specs;  // globals first, then locals
  std::vector<MaskPattern> masks;  // one per global view
  std::uint64_t rng_seed = 0;
};

struct IqrStats {
  double q1 = 0.0, median = 0.0, q3 = 0.0;
  double iqr() const { return q3 - q1; }
};

/// Linear-interpolated quartiles.
IqrStats iqr_stats(const std::vector<float>& values);

/// v -> clamp(slope * (v - median) + median + shift, lo, hi). Zero IQR is a no-op.
Volume apply_window(const Volume& view, const IqrStats& stats, double slope, double shift, double lo, double hi);

/// Draws slope in [1 - slope_jitter, 1 + slope_jitter] and shift in
/// [-shift_iqr * IQR, shift_iqr * IQR], then applies apply_window.
Volume perturb_hu_window(const Volume& view, const IqrStats& stats, double shift_iqr, double slope_jitter,
                         std::uint64_t seed, double lo, double hi);

/// out slice i along `axis` (0 = z, 1 = y, 2 = x) is input slice perm[i].
Volume permute_slices(const Volume& view, int axis, const std::vector<std::size_t>& perm);
Volume permute_slices(const Volume& view, int axis, std::uint64_t seed);

Volume flip(const Volume& view, int axis);

/// Exactly round(ratio * n_tokens) positions, uniform without replacement.
MaskPattern sample_mask(std::size_t n_tokens, double ratio, std::uint64_t seed);

/// Crop geometry for one view: scale uniform in the range, aspect log-uniform
/// then renormalised and capped so the box fits, offset uniform.
CropSpec sample_crop(const Dims& source, const Range& scale, const Range& aspect, const Dims& target, bool is_global,
                     std::mt19937_64& rng);

/// Trilinear resample of the crop box to its target shape.
Volume extract_crop(const Volume& source, const CropSpec& spec);

/// Full per-sample view set. Deterministic in (volume, cfg, seed).
ViewBatch sample_views(const CanonicalVolume& vol, const AugmentConfig& cfg, std::uint64_t seed);

/// Splits a master seed into independent stream seeds.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace volssl::aug
