#include "volssl/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>

#include <json.hpp>

#include "volssl/errors.hpp"

namespace volssl {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "volume files assume a little-endian host");

std::size_t Dims::max_side() const { return std::max({d, h, w}); }
std::size_t Dims::min_side() const { return std::min({d, h, w}); }

Volume::Volume(Dims dims, std::vector<float> voxels) : dims_(dims), voxels_(std::move(voxels)) {
  if (voxels_.size() != dims_.count()) throw DataError("volume voxel count does not match its dimensions");
}

Volume Volume::crop(std::size_t z0, std::size_t y0, std::size_t x0, Dims size) const {
  if (z0 + size.d > dims_.d || y0 + size.h > dims_.h || x0 + size.w > dims_.w) {
    throw DataError("crop box exceeds volume bounds");
  }
  Volume out(size);
  for (std::size_t z = 0; z < size.d; ++z)
    for (std::size_t y = 0; y < size.h; ++y) {
      const float* src = &voxels_[index(z0 + z, y0 + y, x0)];
      std::copy(src, src + size.w, &out.at(z, y, 0));
    }
  return out;
}

void validate(const RawVolume& raw) {
  const auto& d = raw.voxels.dims();
  if (d.count() == 0) throw DataError(raw.source_id + ": empty volume");
  if (!(raw.spacing.x > 0 && raw.spacing.y > 0 && raw.spacing.z > 0)) {
    throw DataError(raw.source_id + ": spacing components must be positive");
  }
  for (float v : raw.voxels.voxels()) {
    if (!std::isfinite(v)) throw DataError(raw.source_id + ": non-finite voxel value");
  }
}

// ---------------------------------------------------------------------------

void write_binary_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + tmp.string() + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw DataError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_binary(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

namespace {

json vec_json(const Vec3& v) { return json::array({v.x, v.y, v.z}); }
Vec3 json_vec(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

fs::path stem_of(const fs::path& p) {
  auto ext = p.extension().string();
  if (ext == ".json" || ext == ".vol") return p.parent_path() / p.stem();
  return p;
}

void write_voxels(const fs::path& stem, const Volume& vol) {
  const auto& v = vol.voxels();
  std::string bytes(v.size() * sizeof(float), '\0');
  std::memcpy(bytes.data(), v.data(), bytes.size());
  fs::path p = stem;
  p += ".vol";
  write_binary_atomic(p, bytes);
}

Volume read_voxels(const fs::path& stem, const json& side) {
  const auto shape = side.at("shape").get<std::vector<std::size_t>>();
  if (shape.size() != 3) throw DataError(stem.string() + ": volume rank must be 3");
  if (side.value("dtype", std::string("float32")) != "float32") throw DataError(stem.string() + ": unsupported dtype");
  Dims dims{shape[0], shape[1], shape[2]};
  fs::path p = stem;
  p += ".vol";
  const std::string bytes = read_binary(p);
  if (bytes.size() != dims.count() * sizeof(float)) {
    throw DataError(p.string() + ": expected " + std::to_string(dims.count() * sizeof(float)) + " bytes, found " +
                    std::to_string(bytes.size()));
  }
  std::vector<float> v(dims.count());
  std::memcpy(v.data(), bytes.data(), bytes.size());
  return Volume(dims, std::move(v));
}

json base_sidecar(const Volume& vol, const std::string& kind) {
  const auto& d = vol.dims();
  return json{{"format", "volssl-volume"}, {"version", 1}, {"kind", kind}, {"dtype", "float32"},
              {"shape", {d.d, d.h, d.w}}};
}

void write_sidecar(const fs::path& stem, const json& side) {
  fs::path p = stem;
  p += ".json";
  write_binary_atomic(p, side.dump(2));
}

json read_sidecar(const fs::path& stem) {
  fs::path p = stem;
  p += ".json";
  try {
    auto j = json::parse(read_binary(p));
    if (j.value("format", std::string()) != "volssl-volume") throw DataError(p.string() + ": not a volume sidecar");
    return j;
  } catch (const json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

RawVolume read_sidecar_raw(const fs::path& path) {
  const fs::path stem = stem_of(path);
  const json side = read_sidecar(stem);
  try {
    RawVolume raw;
    raw.voxels = read_voxels(stem, side);
    raw.spacing = json_vec(side.at("spacing"));
    raw.origin = side.contains("origin") ? json_vec(side.at("origin")) : Vec3{};
    raw.source_id = side.value("source_id", stem.filename().string());
    return raw;
  } catch (const json::exception& e) {
    throw DataError(stem.string() + ": malformed sidecar: " + e.what());
  }
}

// ---- NIfTI-1 --------------------------------------------------------------

template <class T>
T read_le(const std::string& bytes, std::size_t off) {
  T v;
  std::memcpy(&v, bytes.data() + off, sizeof(T));
  return v;
}

RawVolume read_nifti(const fs::path& path) {
  const std::string bytes = read_binary(path);
  if (bytes.size() < 352 || read_le<std::int32_t>(bytes, 0) != 348) {
    throw DataError(path.string() + ": not a little-endian NIfTI-1 file");
  }
  const auto ndim = read_le<std::int16_t>(bytes, 40);
  if (ndim < 3) throw DataError(path.string() + ": NIfTI volume must have at least 3 dimensions");
  for (int i = 4; i <= ndim && i < 8; ++i) {
    if (read_le<std::int16_t>(bytes, 40 + 2 * i) > 1) throw DataError(path.string() + ": only 3D NIfTI volumes supported");
  }
  const std::size_t nx = static_cast<std::size_t>(read_le<std::int16_t>(bytes, 42));
  const std::size_t ny = static_cast<std::size_t>(read_le<std::int16_t>(bytes, 44));
  const std::size_t nz = static_cast<std::size_t>(read_le<std::int16_t>(bytes, 46));
  const auto datatype = read_le<std::int16_t>(bytes, 70);
  RawVolume raw;
  raw.spacing = {std::abs(read_le<float>(bytes, 80)), std::abs(read_le<float>(bytes, 84)), std::abs(read_le<float>(bytes, 88))};
  const auto vox_offset = static_cast<std::size_t>(read_le<float>(bytes, 108));
  float slope = read_le<float>(bytes, 112);
  const float inter = read_le<float>(bytes, 116);
  if (slope == 0.0f || !std::isfinite(slope)) slope = 1.0f;
  raw.origin = {read_le<float>(bytes, 268), read_le<float>(bytes, 272), read_le<float>(bytes, 276)};
  raw.source_id = path.stem().string();

  const Dims dims{nz, ny, nx};
  std::vector<float> v(dims.count());
  auto load = [&](auto tag) {
    using T = decltype(tag);
    if (vox_offset + v.size() * sizeof(T) > bytes.size()) throw DataError(path.string() + ": truncated NIfTI data");
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = static_cast<float>(read_le<T>(bytes, vox_offset + i * sizeof(T))) * slope + inter;
    }
  };
  switch (datatype) {
    case 2: load(std::uint8_t{}); break;
    case 4: load(std::int16_t{}); break;
    case 8: load(std::int32_t{}); break;
    case 16: load(float{}); break;
    case 64: load(double{}); break;
    case 512: load(std::uint16_t{}); break;
    default: throw DataError(path.string() + ": unsupported NIfTI datatype " + std::to_string(datatype));
  }
  raw.voxels = Volume(dims, std::move(v));
  return raw;
}

struct ReaderRegistry {
  std::mutex mu;
  std::map<std::string, VolumeReader> readers{{".json", read_sidecar_raw}, {".nii", read_nifti}};
};

ReaderRegistry& registry() {
  static ReaderRegistry r;
  return r;
}

std::string lower_ext(const fs::path& p) {
  auto e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return e;
}

}  // namespace

void write_raw_volume(const fs::path& stem, const RawVolume& vol) {
  write_voxels(stem, vol.voxels);
  json side = base_sidecar(vol.voxels, "raw");
  side["spacing"] = vec_json(vol.spacing);
  side["origin"] = vec_json(vol.origin);
  side["source_id"] = vol.source_id;
  write_sidecar(stem, side);
}

void write_canonical_volume(const fs::path& stem, const CanonicalVolume& vol) {
  write_voxels(stem, vol.voxels);
  json side = base_sidecar(vol.voxels, "canonical");
  side["spacing"] = {vol.iso_spacing, vol.iso_spacing, vol.iso_spacing};
  side["iso_spacing"] = vol.iso_spacing;
  side["crop_offset"] = vol.crop_offset;
  side["norm_stats"] = {{"mu_hu", vol.norm_stats.mu_hu}, {"sigma_hu", vol.norm_stats.sigma_hu},
                        {"n_voxels", vol.norm_stats.n_voxels}};
  side["source_id"] = vol.source_id;
  write_sidecar(stem, side);
}

CanonicalVolume read_canonical_volume(const fs::path& sidecar_or_stem) {
  const fs::path stem = stem_of(sidecar_or_stem);
  const json side = read_sidecar(stem);
  if (side.value("kind", std::string()) != "canonical") throw DataError(stem.string() + ": not a canonical volume");
  try {
    CanonicalVolume c;
    c.voxels = read_voxels(stem, side);
    c.iso_spacing = side.at("iso_spacing").get<double>();
    c.crop_offset = side.at("crop_offset").get<std::array<long, 3>>();
    const auto& ns = side.at("norm_stats");
    c.norm_stats = {ns.at("mu_hu").get<double>(), ns.at("sigma_hu").get<double>(), ns.at("n_voxels").get<std::size_t>()};
    c.source_id = side.value("source_id", stem.filename().string());
    return c;
  } catch (const json::exception& e) {
    throw DataError(stem.string() + ": malformed sidecar: " + e.what());
  }
}

void register_volume_reader(const std::string& extension, VolumeReader reader) {
  auto& r = registry();
  std::lock_guard lock(r.mu);
  r.readers[extension] = std::move(reader);
}

bool has_volume_reader(const fs::path& path) {
  auto& r = registry();
  std::lock_guard lock(r.mu);
  return r.readers.count(lower_ext(path)) > 0;
}

RawVolume read_raw_volume(const fs::path& path) {
  VolumeReader reader;
  {
    auto& r = registry();
    std::lock_guard lock(r.mu);
    auto it = r.readers.find(lower_ext(path));
    if (it == r.readers.end()) throw DataError(path.string() + ": no reader registered for this extension");
    reader = it->second;
  }
  RawVolume raw = reader(path);
  validate(raw);
  return raw;
}

std::vector<fs::path> list_volume_inputs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError(dir.string() + ": not a directory");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file() || !has_volume_reader(e.path())) continue;
    if (lower_ext(e.path()) == ".json") {
      // Only sidecars that describe volumes; label or config JSON is skipped.
      try {
        auto j = json::parse(read_binary(e.path()));
        if (j.value("format", std::string()) != "volssl-volume") continue;
      } catch (const json::exception&) {
        continue;
      }
    }
    out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

void write_nifti(const fs::path& path, const RawVolume& vol) {
  std::string hdr(352, '\0');
  auto put = [&](std::size_t off, auto v) { std::memcpy(hdr.data() + off, &v, sizeof(v)); };
  const auto& d = vol.voxels.dims();
  put(0, std::int32_t{348});
  put(40, std::int16_t{3});
  put(42, static_cast<std::int16_t>(d.w));
  put(44, static_cast<std::int16_t>(d.h));
  put(46, static_cast<std::int16_t>(d.d));
  for (int i = 4; i < 8; ++i) put(40 + 2 * i, std::int16_t{1});
  put(70, std::int16_t{16});
  put(72, std::int16_t{32});
  put(76, 1.0f);
  put(80, static_cast<float>(vol.spacing.x));
  put(84, static_cast<float>(vol.spacing.y));
  put(88, static_cast<float>(vol.spacing.z));
  put(108, 352.0f);
  put(112, 1.0f);
  put(268, static_cast<float>(vol.origin.x));
  put(272, static_cast<float>(vol.origin.y));
  put(276, static_cast<float>(vol.origin.z));
  std::memcpy(hdr.data() + 344, "n+1", 4);
  std::string bytes = hdr;
  bytes.append(reinterpret_cast<const char*>(vol.voxels.voxels().data()), vol.voxels.size() * sizeof(float));
  write_binary_atomic(path, bytes);
}

}  // namespace volssl
