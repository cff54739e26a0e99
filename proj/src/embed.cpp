#include "volssl/embed.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>

#include "volssl/errors.hpp"

namespace volssl::embed {

namespace fs = std::filesystem;
using ag::Tensor;

namespace {

constexpr char kMagic[8] = {'V', 'S', 'S', 'L', 'E', 'M', 'B', '1'};

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ULL;
  }
  return h;
}

std::size_t round_up(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

void check_sample_id(const std::string& id) {
  const bool ok = !id.empty() && id[0] != '.' && std::all_of(id.begin(), id.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
  });
  if (!ok) throw DataError("sample id '" + id + "' must use only letters, digits, '.', '_' and '-'");
}

std::string dims_str(const Dims& d) {
  return std::to_string(d.d) + "x" + std::to_string(d.h) + "x" + std::to_string(d.w);
}

}  // namespace

vit::TokenGrid EmbeddingRecord::token_grid() const {
  validate();
  return {Tensor::from({n_patches(), dim}, patch_tokens), grid, vit::patch_centers(grid)};
}

void EmbeddingRecord::validate() const {
  if (dim == 0 || class_token.size() != dim) throw DataError("record " + sample_id + ": class token size mismatch");
  if (grid.count() == 0 || patch_tokens.size() != grid.count() * dim) {
    throw DataError("record " + sample_id + ": " + std::to_string(patch_tokens.size() / std::max<std::size_t>(dim, 1)) +
                    " patch tokens stored for grid " + dims_str(grid));
  }
}

Volume edge_pad(const Volume& v, std::size_t depth_multiple, std::size_t multiple, std::array<std::size_t, 3>& pad) {
  const Dims s = v.dims();
  if (s.count() == 0) throw DataError("cannot pad an empty volume");
  const Dims t{round_up(s.d, depth_multiple), round_up(s.h, multiple), round_up(s.w, multiple)};
  pad = {t.d - s.d, t.h - s.h, t.w - s.w};
  if (t == s) return v;
  Volume out(t);
  for (std::size_t z = 0; z < t.d; ++z)
    for (std::size_t y = 0; y < t.h; ++y)
      for (std::size_t x = 0; x < t.w; ++x)
        out.at(z, y, x) = v.at(std::min(z, s.d - 1), std::min(y, s.h - 1), std::min(x, s.w - 1));
  return out;
}

EmbeddingRecord extract_full3d(const CanonicalVolume& vol, const vit::Backbone& net, const std::string& fingerprint,
                               std::size_t max_tokens) {
  const std::size_t p = net.cfg.patch_size;
  EmbeddingRecord r;
  r.sample_id = vol.source_id;
  r.mode = config::EmbedMode::full3d;
  const Volume padded = edge_pad(vol.voxels, p, p, r.padding);
  r.grid = vit::patch_grid(padded.dims(), p);
  if (r.grid.count() > max_tokens) {
    throw ConfigError("volume " + vol.source_id + " (" + dims_str(vol.voxels.dims()) + ") needs " +
                      std::to_string(r.grid.count()) + " patch tokens, above the full-3D budget of " +
                      std::to_string(max_tokens) + "; use chunked mode");
  }
  ag::NoGradGuard ng;
  const auto out = vit::encode(net, padded);
  r.dim = net.cfg.embed_dim;
  r.class_token.assign(out.class_token.values().begin(), out.class_token.values().end());
  r.patch_tokens.assign(out.patches.tokens.values().begin(), out.patches.tokens.values().end());
  r.backbone_fingerprint = fingerprint;
  return r;
}

EmbeddingRecord extract_chunked2p5d(const CanonicalVolume& vol, const vit::Backbone& net,
                                    const std::string& fingerprint, std::size_t chunk_depth,
                                    std::span<const std::size_t> order) {
  const std::size_t p = net.cfg.patch_size;
  if (chunk_depth == 0 || chunk_depth % p) {
    throw ConfigError("chunk depth " + std::to_string(chunk_depth) + " must be a positive multiple of the patch size " +
                      std::to_string(p));
  }
  EmbeddingRecord r;
  r.sample_id = vol.source_id;
  r.mode = config::EmbedMode::chunked2p5d;
  r.dim = net.cfg.embed_dim;
  r.backbone_fingerprint = fingerprint;
  const Volume padded = edge_pad(vol.voxels, chunk_depth, p, r.padding);
  const Dims s = padded.dims();
  r.n_chunks = s.d / chunk_depth;

  std::vector<std::size_t> seq(r.n_chunks);
  for (std::size_t i = 0; i < seq.size(); ++i) seq[i] = i;
  if (!order.empty()) {
    std::vector<std::size_t> sorted(order.begin(), order.end());
    std::sort(sorted.begin(), sorted.end());
    if (sorted != seq) throw ConfigError("chunk order must be a permutation of the chunk indices");
    seq.assign(order.begin(), order.end());
  }

  std::vector<vit::EncoderOutput> outs(r.n_chunks);
  {
    ag::NoGradGuard ng;
    for (std::size_t i : seq) outs[i] = vit::encode(net, padded.crop(i * chunk_depth, 0, 0, {chunk_depth, s.h, s.w}));
  }
  r.class_token.assign(r.dim, 0.0);
  for (const auto& o : outs)
    for (std::size_t k = 0; k < r.dim; ++k) r.class_token[k] += o.class_token.at(k);
  for (double& v : r.class_token) v /= static_cast<double>(r.n_chunks);
  const Dims g = outs[0].patches.grid;
  r.grid = {g.d * r.n_chunks, g.h, g.w};
  for (const auto& o : outs) r.patch_tokens.insert(r.patch_tokens.end(), o.patches.tokens.values().begin(), o.patches.tokens.values().end());
  return r;
}

EmbeddingRecord extract(const CanonicalVolume& vol, const vit::Backbone& net, const std::string& fingerprint,
                        const config::EmbedConfig& cfg) {
  if (cfg.mode == config::EmbedMode::full3d) return extract_full3d(vol, net, fingerprint, cfg.max_tokens);
  return extract_chunked2p5d(vol, net, fingerprint, cfg.chunk_depth);
}

std::string serialize(const EmbeddingRecord& r) {
  r.validate();
  const config::Json header = {{"sample_id", r.sample_id},
                               {"mode", config::to_string(r.mode)},
                               {"dim", r.dim},
                               {"grid", {r.grid.d, r.grid.h, r.grid.w}},
                               {"padding", r.padding},
                               {"n_chunks", r.n_chunks},
                               {"backbone_fingerprint", r.backbone_fingerprint}};
  const std::string h = header.dump();
  std::string out(kMagic, sizeof kMagic);
  const std::uint64_t hn = h.size();
  out.append(reinterpret_cast<const char*>(&hn), sizeof hn);
  out += h;
  out.append(reinterpret_cast<const char*>(r.class_token.data()), r.class_token.size() * sizeof(double));
  out.append(reinterpret_cast<const char*>(r.patch_tokens.data()), r.patch_tokens.size() * sizeof(double));
  const std::uint64_t sum = fnv1a(out.data(), out.size());
  out.append(reinterpret_cast<const char*>(&sum), sizeof sum);
  return out;
}

EmbeddingRecord deserialize(const std::string& bytes) {
  constexpr std::size_t kFixed = sizeof kMagic + 2 * sizeof(std::uint64_t);
  if (bytes.size() < kFixed || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw DataError("not an embedding record");
  }
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - sizeof stored, sizeof stored);
  if (stored != fnv1a(bytes.data(), bytes.size() - sizeof stored)) throw DataError("embedding record checksum mismatch");
  std::uint64_t hn;
  std::memcpy(&hn, bytes.data() + sizeof kMagic, sizeof hn);
  if (hn > bytes.size() - kFixed) throw DataError("embedding record header is truncated");
  EmbeddingRecord r;
  try {
    const auto h = config::Json::parse(bytes.substr(sizeof kMagic + sizeof hn, hn));
    r.sample_id = h.at("sample_id").get<std::string>();
    r.mode = config::embed_mode_from_string(h.at("mode").get<std::string>());
    r.dim = h.at("dim").get<std::size_t>();
    const auto& g = h.at("grid");
    r.grid = {g.at(0).get<std::size_t>(), g.at(1).get<std::size_t>(), g.at(2).get<std::size_t>()};
    r.padding = h.at("padding").get<std::array<std::size_t, 3>>();
    r.n_chunks = h.at("n_chunks").get<std::size_t>();
    r.backbone_fingerprint = h.at("backbone_fingerprint").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("embedding record header is malformed: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("embedding record header is malformed: ") + e.what());
  }
  const std::size_t payload = bytes.size() - kFixed - hn;
  const std::size_t want = (r.dim + r.grid.count() * r.dim) * sizeof(double);
  if (payload != want) throw DataError("embedding record payload size does not match its grid");
  const char* p = bytes.data() + sizeof kMagic + sizeof hn + hn;
  r.class_token.resize(r.dim);
  std::memcpy(r.class_token.data(), p, r.dim * sizeof(double));
  r.patch_tokens.resize(r.grid.count() * r.dim);
  std::memcpy(r.patch_tokens.data(), p + r.dim * sizeof(double), r.patch_tokens.size() * sizeof(double));
  return r;
}

// ---- cache -------------------------------------------------------------------

EmbeddingCache::EmbeddingCache(fs::path dir) : dir_(std::move(dir)) {}

config::Json EmbeddingCache::manifest() const {
  const auto path = dir_ / "manifest.json";
  if (!fs::exists(path)) return {{"version", 1}, {"records", config::Json::object()}};
  try {
    auto j = config::Json::parse(read_binary(path));
    if (!j.contains("records") || !j["records"].is_object()) throw DataError("manifest has no records table");
    return j;
  } catch (const nlohmann::json::exception&) {
    throw DataError("embedding cache manifest " + path.string() + " is not valid JSON");
  }
}

void EmbeddingCache::put(const EmbeddingRecord& r) {
  check_sample_id(r.sample_id);
  auto m = manifest();
  const std::string fp = fingerprint();
  if (!fp.empty() && fp != r.backbone_fingerprint) {
    throw DataError("cache " + dir_.string() + " holds embeddings from backbone " + fp + ", refusing a record from " +
                    r.backbone_fingerprint);
  }
  fs::create_directories(dir_);
  const std::string bytes = serialize(r);
  const std::string file = r.sample_id + ".emb";
  write_binary_atomic(dir_ / file, bytes);
  m["records"][r.sample_id] = {{"file", file},
                               {"offset", 0},
                               {"bytes", bytes.size()},
                               {"mode", config::to_string(r.mode)},
                               {"fingerprint", r.backbone_fingerprint},
                               {"grid", {r.grid.d, r.grid.h, r.grid.w}}};
  write_binary_atomic(dir_ / "manifest.json", m.dump(1) + "\n");
}

EmbeddingRecord EmbeddingCache::get(const std::string& sample_id, const std::string& expected_fingerprint) const {
  const auto m = manifest();
  const auto it = m["records"].find(sample_id);
  if (it == m["records"].end()) throw DataError("sample '" + sample_id + "' is not in cache " + dir_.string());
  const auto fp = it->at("fingerprint").get<std::string>();
  if (fp != expected_fingerprint) {
    throw DataError("embedding for '" + sample_id + "' was produced by backbone " + fp + ", expected " +
                    expected_fingerprint + "; re-run embed");
  }
  auto r = deserialize(read_binary(dir_ / it->at("file").get<std::string>()));
  if (r.sample_id != sample_id || r.backbone_fingerprint != expected_fingerprint) {
    throw DataError("embedding file for '" + sample_id + "' disagrees with the manifest");
  }
  return r;
}

bool EmbeddingCache::contains(const std::string& sample_id) const { return manifest()["records"].contains(sample_id); }

std::vector<std::string> EmbeddingCache::ids() const {
  std::vector<std::string> out;
  const auto m = manifest();
  for (const auto& item : m["records"].items()) out.push_back(item.key());
  std::sort(out.begin(), out.end());
  return out;
}

std::string EmbeddingCache::fingerprint() const {
  const auto m = manifest();
  std::string fp;
  for (const auto& item : m["records"].items()) {
    const auto f = item.value().at("fingerprint").get<std::string>();
    if (fp.empty()) fp = f;
    else if (f != fp) throw DataError("embedding cache " + dir_.string() + " mixes backbones");
  }
  return fp;
}

// ---- PCA ---------------------------------------------------------------------

PcaRgb pca_rgb(const Tensor& tokens, const Dims& grid) {
  const std::size_t n = tokens.rows(), d = tokens.cols();
  if (n < 3) throw DataError("PCA view needs at least 3 patch tokens, got " + std::to_string(n));
  if (grid.count() != n) throw DataError("token count does not match grid " + dims_str(grid));
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Mat x = Eigen::Map<const Mat>(tokens.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericalError("PCA eigendecomposition failed");

  PcaRgb out;
  out.grid = grid;
  out.total_variance = cov.trace();
  const auto& vals = eig.eigenvalues();  // ascending
  const double tol = 1e-10 * std::max(out.total_variance, 1e-300);
  for (Eigen::Index k = 0; k < vals.size(); ++k)
    if (vals(k) > tol) ++out.rank;
  out.rank_deficient = out.rank < 3;
  out.rgb.assign(n * 3, 0.5f);
  out.components.assign(d, {0.0, 0.0, 0.0});
  for (std::size_t c = 0; c < 3 && c < d; ++c) {
    const Eigen::Index col = static_cast<Eigen::Index>(d - 1 - c);
    out.variances[c] = std::max(0.0, vals(col));
    if (c >= out.rank) continue;
    Eigen::VectorXd v = eig.eigenvectors().col(col);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    for (std::size_t i = 0; i < d; ++i) out.components[i][c] = v(static_cast<Eigen::Index>(i));
    const Eigen::VectorXd proj = x * v;
    const double lo = proj.minCoeff(), hi = proj.maxCoeff();
    for (std::size_t i = 0; i < n; ++i) {
      out.rgb[i * 3 + c] = hi > lo ? static_cast<float>((proj(static_cast<Eigen::Index>(i)) - lo) / (hi - lo)) : 0.5f;
    }
  }
  return out;
}

void write_rgb_nifti(const fs::path& path, const PcaRgb& pca) {
  std::string hdr(352, '\0');
  auto put = [&](std::size_t off, auto v) { std::memcpy(hdr.data() + off, &v, sizeof(v)); };
  put(0, std::int32_t{348});
  put(40, std::int16_t{3});
  put(42, static_cast<std::int16_t>(pca.grid.w));
  put(44, static_cast<std::int16_t>(pca.grid.h));
  put(46, static_cast<std::int16_t>(pca.grid.d));
  for (int i = 4; i < 8; ++i) put(40 + 2 * i, std::int16_t{1});
  put(70, std::int16_t{128});  // RGB24
  put(72, std::int16_t{24});
  for (int i = 0; i < 4; ++i) put(76 + 4 * i, 1.0f);
  put(108, 352.0f);
  std::memcpy(hdr.data() + 344, "n+1", 4);
  std::string bytes = hdr;
  for (float v : pca.rgb) bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
  write_binary_atomic(path, bytes);
}

}  // namespace volssl::embed
