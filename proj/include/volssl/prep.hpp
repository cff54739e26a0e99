#pragma once
// Ingestion-time preprocessing: isotropic resampling, HU clipping, corpus
// z-scoring and background removal.

#include <array>
#include <cstddef>
#include <span>

#include "volssl/volume.hpp"

namespace volssl::prep {

inline constexpr double kHuMin = -1000.0;
inline constexpr double kHuMax = 1900.0;
inline constexpr std::size_t kDefaultMaxSide = 768;
inline constexpr double kDefaultAirThresholdHu = -500.0;

/// Maps output voxel i on one axis to the source continuous index
/// offset + (i + 0.5) * step - 0.5 (voxel centres at integer indices).
struct AxisMap {
  double offset = 0.0;
  double step = 1.0;
  std::size_t out = 0;
};

/// Separable trilinear resampling. Samples inside the source's physical extent
/// (index range [-0.5, n-0.5]) interpolate linearly, extrapolating from the
/// edge cell within the outer half voxel, so affine fields are reproduced
/// exactly; samples outside the extent clamp to the edge voxel.
Volume resample_trilinear(const Volume& src, const std::array<AxisMap, 3>& zyx);

struct IsotropicPlan {
  Dims dims;
  double spacing = 0.0;
};

/// Target grid: spacing max(min(spacing), max_extent / max_side), each side
/// round(extent / spacing) capped at max_side.
IsotropicPlan plan_isotropic(const Dims& dims, const Vec3& spacing, std::size_t max_side);

/// Throws DataError for degenerate volumes (any side < 2) or bad spacing.
RawVolume resample_isotropic(const RawVolume& raw, std::size_t max_side = kDefaultMaxSide);

/// (clamp(v, -1000, 1900) - mu) / sigma elementwise.
CanonicalVolume clip_and_normalize(const RawVolume& vol, const GlobalNormStats& stats);

inline double clip_hu(double v) { return v < kHuMin ? kHuMin : (v > kHuMax ? kHuMax : v); }

/// Streaming pooled moments of clipped HU values; merge() is associative.
class NormAccumulator {
 public:
  void add(std::span<const float> hu_values);
  void add(const RawVolume& vol) { add(vol.voxels.voxels()); }
  void merge(const NormAccumulator& other);

  std::size_t count() const { return n_; }
  double mean() const { return mean_; }
  /// Population standard deviation.
  double stddev() const;
  /// Throws DataError if nothing was seen and NumericalError if sigma == 0.
  GlobalNormStats finish() const;

 private:
  std::size_t n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

/// Pooled statistics over a non-empty set of volumes.
GlobalNormStats accumulate_norm_stats(std::span<const RawVolume> vols);

struct StripResult {
  CanonicalVolume volume;
  bool no_foreground = false;  // nothing above threshold; input returned unchanged
};

/// Crops to the bounding box of the largest 6-connected component of voxels
/// whose HU value exceeds air_threshold_hu.
StripResult strip_background(const CanonicalVolume& vol, double air_threshold_hu = kDefaultAirThresholdHu);

struct Box {
  std::array<std::size_t, 3> lo{};  // z, y, x inclusive
  std::array<std::size_t, 3> hi{};  // exclusive
  std::size_t voxels = 0;
};

/// Bounding box of the largest 6-connected component of `mask`; ties go to the
/// component reached first in raster order. voxels == 0 when mask is empty.
Box largest_component(const Dims& dims, std::span<const std::uint8_t> mask);

/// Full ingestion chain for one scan: resample, clip/normalise, strip.
StripResult canonicalize(const RawVolume& raw, const GlobalNormStats& stats, std::size_t max_side,
                         double air_threshold_hu);

}  // namespace volssl::prep
