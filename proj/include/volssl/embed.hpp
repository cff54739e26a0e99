#pragma once
// Frozen-backbone feature extraction, the on-disk embedding cache, and the
// PCA-to-RGB view of patch tokens.

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "volssl/backbone.hpp"
#include "volssl/config.hpp"
#include "volssl/volume.hpp"

namespace volssl::embed {

struct EmbeddingRecord {
  std::string sample_id;
  config::EmbedMode mode = config::EmbedMode::full3d;
  std::size_t dim = 0;
  std::vector<double> class_token;   // [dim]
  Dims grid;                         // patch grid (depth, height, width)
  std::vector<double> patch_tokens;  // [grid.count(), dim], depth-major
  std::array<std::size_t, 3> padding{0, 0, 0};  // edge-padded voxels appended per axis (z, y, x)
  std::size_t n_chunks = 1;
  std::string backbone_fingerprint;

  std::size_t n_patches() const { return grid.count(); }
  /// Patch tokens as a tensor with normalised centres.
  vit::TokenGrid token_grid() const;
  void validate() const;
  bool operator==(const EmbeddingRecord&) const = default;
};

/// Replicates the last slice/row/column so every side is a multiple of `multiple`
/// (depth uses `depth_multiple`). Returns the padding per axis (z, y, x).
Volume edge_pad(const Volume& v, std::size_t depth_multiple, std::size_t multiple, std::array<std::size_t, 3>& pad);

/// Single encode pass over the whole volume. ConfigError past max_tokens.
EmbeddingRecord extract_full3d(const CanonicalVolume& vol, const vit::Backbone& net, const std::string& fingerprint,
                               std::size_t max_tokens);

/// Non-overlapping axial chunks of chunk_depth voxels, encoded independently.
/// Class token = mean over chunks; patch grids concatenate along depth.
/// `order` optionally permutes the processing order (results are unchanged).
EmbeddingRecord extract_chunked2p5d(const CanonicalVolume& vol, const vit::Backbone& net,
                                    const std::string& fingerprint, std::size_t chunk_depth,
                                    std::span<const std::size_t> order = {});

EmbeddingRecord extract(const CanonicalVolume& vol, const vit::Backbone& net, const std::string& fingerprint,
                        const config::EmbedConfig& cfg);

std::string serialize(const EmbeddingRecord& r);
EmbeddingRecord deserialize(const std::string& bytes);

/// Directory of per-sample record files plus manifest.json.
class EmbeddingCache {
 public:
  explicit EmbeddingCache(std::filesystem::path dir);

  /// Writes the record file and then the manifest, each atomically.
  void put(const EmbeddingRecord& r);
  /// DataError if the record is absent, corrupt or built by another backbone.
  EmbeddingRecord get(const std::string& sample_id, const std::string& expected_fingerprint) const;
  bool contains(const std::string& sample_id) const;
  std::vector<std::string> ids() const;
  /// Fingerprint shared by every record (empty for an empty cache).
  std::string fingerprint() const;
  const std::filesystem::path& dir() const { return dir_; }

 private:
  config::Json manifest() const;
  std::filesystem::path dir_;
};

struct PcaRgb {
  Dims grid;
  std::vector<float> rgb;             // [n_patches, 3] in [0,1]
  std::array<double, 3> variances{};  // variance along each component (population)
  std::vector<std::array<double, 3>> components;  // [dim] rows of loadings
  double total_variance = 0.0;
  std::size_t rank = 0;
  bool rank_deficient = false;  // channels past the rank are fixed at 0.5
};

/// Top-3 principal components of the centred patch tokens, min-max scaled.
PcaRgb pca_rgb(const ag::Tensor& tokens, const Dims& grid);

/// RGB24 NIfTI of the PCA map.
void write_rgb_nifti(const std::filesystem::path& path, const PcaRgb& pca);

}  // namespace volssl::embed
