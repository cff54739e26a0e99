#pragma once
// Dense 3D scalar volumes and their on-disk representation.
//
// Arrays are stored depth-major: index = (z * H + y) * W + x, where z is the
// axial (slice) axis. Physical spacing is kept per axis in (x, y, z) order.

#include <array>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace volssl {

struct Dims {
  std::size_t d = 0;  // z
  std::size_t h = 0;  // y
  std::size_t w = 0;  // x

  std::size_t count() const { return d * h * w; }
  std::size_t max_side() const;
  std::size_t min_side() const;
  bool operator==(const Dims&) const = default;
};

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;
  bool operator==(const Vec3&) const = default;
};

class Volume {
 public:
  Volume() = default;
  explicit Volume(Dims dims, float fill = 0.0f) : dims_(dims), voxels_(dims.count(), fill) {}
  Volume(Dims dims, std::vector<float> voxels);

  const Dims& dims() const { return dims_; }
  std::size_t size() const { return voxels_.size(); }
  bool empty() const { return voxels_.empty(); }

  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const { return (z * dims_.h + y) * dims_.w + x; }
  float& at(std::size_t z, std::size_t y, std::size_t x) { return voxels_[index(z, y, x)]; }
  float at(std::size_t z, std::size_t y, std::size_t x) const { return voxels_[index(z, y, x)]; }

  std::vector<float>& voxels() { return voxels_; }
  const std::vector<float>& voxels() const { return voxels_; }

  /// Sub-box copy; the box must lie inside the volume.
  Volume crop(std::size_t z0, std::size_t y0, std::size_t x0, Dims size) const;

  bool operator==(const Volume&) const = default;

 private:
  Dims dims_;
  std::vector<float> voxels_;
};

/// Corpus-level intensity statistics (population moments of clipped HU).
struct GlobalNormStats {
  double mu_hu = 0.0;
  double sigma_hu = 1.0;
  std::size_t n_voxels = 0;
};

/// Scanner-space volume in Hounsfield units.
struct RawVolume {
  Volume voxels;
  Vec3 spacing{1.0, 1.0, 1.0};  // mm per voxel
  Vec3 origin{};                // mm, centre of voxel (0,0,0)
  std::string source_id;
};

/// Isotropic, clipped, z-scored volume ready for the backbone.
struct CanonicalVolume {
  Volume voxels;
  double iso_spacing = 1.0;
  std::array<long, 3> crop_offset{0, 0, 0};  // (z, y, x) voxels in the resampled frame
  GlobalNormStats norm_stats;
  std::string source_id;
};

/// Validates the RawVolume invariants (rank 3, positive spacing, finite voxels).
void validate(const RawVolume& raw);

// ---- persistence ---------------------------------------------------------
// A volume on disk is `<stem>.vol` (little-endian float32, depth-major) plus a
// JSON sidecar `<stem>.json` carrying shape, spacing, origin and, for canonical
// volumes, iso spacing, crop offset and the normalisation statistics used.

void write_raw_volume(const std::filesystem::path& stem, const RawVolume& vol);
void write_canonical_volume(const std::filesystem::path& stem, const CanonicalVolume& vol);
CanonicalVolume read_canonical_volume(const std::filesystem::path& sidecar_or_stem);

/// Readers keyed by lower-case file extension (".json", ".nii").
using VolumeReader = std::function<RawVolume(const std::filesystem::path&)>;
void register_volume_reader(const std::string& extension, VolumeReader reader);
bool has_volume_reader(const std::filesystem::path& path);
RawVolume read_raw_volume(const std::filesystem::path& path);

/// Inputs in `dir` that some registered reader accepts, sorted by name.
std::vector<std::filesystem::path> list_volume_inputs(const std::filesystem::path& dir);

/// Minimal NIfTI-1 single-file writer (float32), used for interchange and tests.
void write_nifti(const std::filesystem::path& path, const RawVolume& vol);

void write_binary_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_binary(const std::filesystem::path& path);

}  // namespace volssl
