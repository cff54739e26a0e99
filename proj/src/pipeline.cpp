#include "volssl/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numeric>
#include <random>
#include <set>

#include "volssl/augment.hpp"
#include "volssl/embed.hpp"
#include "volssl/errors.hpp"
#include "volssl/prep.hpp"

namespace volssl::pipeline {

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_json(const fs::path& path, const Json& j) {
  fs::create_directories(path.parent_path());
  write_binary_atomic(path, j.dump(2) + "\n");
}

Json read_json(const fs::path& path) {
  try {
    return Json::parse(read_binary(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void log(const std::string& msg) { std::clog << "[volssl] " << msg << std::endl; }

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

// ---- probe inputs ----------------------------------------------------------------

struct Frame {
  Dims padded;     // grid * patch
  Dims canonical;  // padded minus the replicated rim
};

Frame frame_of(const embed::EmbeddingRecord& r, std::size_t patch) {
  Frame f;
  f.padded = {r.grid.d * patch, r.grid.h * patch, r.grid.w * patch};
  f.canonical = {f.padded.d - r.padding[0], f.padded.h - r.padding[1], f.padded.w - r.padding[2]};
  return f;
}

/// Seg target shape: the padded frame divided by the smallest factor (at most
/// the patch size) that brings every side to seg_max_side or below.
Dims seg_target(const Frame& f, std::size_t patch, std::size_t max_side) {
  const std::size_t f_needed = ceil_div(std::max({f.padded.d, f.padded.h, f.padded.w}), max_side);
  const std::size_t factor = std::clamp<std::size_t>(f_needed, 1, patch);
  return {ceil_div(f.padded.d, factor), ceil_div(f.padded.h, factor), ceil_div(f.padded.w, factor)};
}

/// Nearest-neighbour sampling of a canonical-frame mask onto the seg target;
/// the padded rim replicates the last slice like the embedding does.
std::vector<std::int32_t> sample_mask(const Volume& mask, const Frame& f, const Dims& t) {
  std::vector<std::int32_t> out(t.count());
  auto src = [](std::size_t i, std::size_t n_out, std::size_t n_pad, std::size_t n_can) {
    const auto s = static_cast<std::size_t>((static_cast<double>(i) + 0.5) * static_cast<double>(n_pad) / static_cast<double>(n_out));
    return std::min(s, n_can - 1);
  };
  std::size_t k = 0;
  for (std::size_t z = 0; z < t.d; ++z)
    for (std::size_t y = 0; y < t.h; ++y)
      for (std::size_t x = 0; x < t.w; ++x, ++k) {
        const float v = mask.at(src(z, t.d, f.padded.d, f.canonical.d), src(y, t.h, f.padded.h, f.canonical.h),
                                src(x, t.w, f.padded.w, f.canonical.w));
        out[k] = static_cast<std::int32_t>(std::lround(v));
      }
  return out;
}

fs::path resolve_relative(const fs::path& labels_file, const std::string& p) {
  const fs::path q(p);
  return q.is_absolute() ? q : labels_file.parent_path() / q;
}

std::vector<std::string> parse_patients(const fs::path& path, const std::vector<std::string>& ids) {
  std::vector<std::string> out;
  if (path.empty()) return ids;
  const report::Table t = report::read_table(path);
  for (const auto& id : ids) {
    auto it = t.find(id);
    if (it == t.end() || it->second.empty()) throw DataError(path.string() + ": no patient id for " + id);
    out.push_back(it->second[0]);
  }
  return out;
}

struct ProbeData {
  std::vector<probe::ProbeSample> samples;
  std::vector<Frame> frames;
  std::size_t n_columns = 1;
  std::size_t n_classes = 0;
};

ProbeData load_probe_data(const ProbeRequest& req, const config::RunConfig& cfg, const embed::EmbeddingCache& cache,
                          const std::string& fp) {
  ProbeData d;
  const report::Table labels = report::read_table(req.labels);
  if (labels.empty()) throw DataError(req.labels.string() + ": no labelled samples");
  std::vector<std::string> ids;
  std::vector<std::string> missing;
  for (const auto& [id, f] : labels) {
    if (cache.contains(id)) ids.push_back(id);
    else missing.push_back(id);
  }
  if (!missing.empty()) {
    throw DataError(std::to_string(missing.size()) + " labelled samples have no cached embedding (first: " + missing[0] + ")");
  }
  const auto patients = parse_patients(req.patients, ids);
  const std::size_t patch = cfg.ssl.backbone.patch_size;
  std::size_t width = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& fields = labels.at(ids[i]);
    const std::string where = req.labels.string() + " row " + ids[i];
    if (width == 0) width = fields.size();
    if (fields.size() != width || width == 0) throw DataError(where + ": inconsistent column count");
    const auto rec = cache.get(ids[i], fp);
    probe::ProbeSample s;
    s.id = ids[i];
    s.patient = patients[i];
    s.fingerprint = rec.backbone_fingerprint;
    s.class_token = rec.class_token;
    s.patches = rec.token_grid();
    const Frame fr = frame_of(rec, patch);
    switch (req.task) {
      case probe::Task::cls: {
        s.target = report::parse_numbers(fields, where);
        for (double v : s.target)
          if (v != 0.0 && v != 1.0) throw DataError(where + ": classification targets must be 0 or 1");
        break;
      }
      case probe::Task::reg:
        s.target = report::parse_numbers(fields, where);
        break;
      case probe::Task::loc: {
        s.target = report::parse_numbers(fields, where);
        if (s.target.size() != 3) throw DataError(where + ": localisation needs z,y,x");
        const std::size_t c[3] = {fr.canonical.d, fr.canonical.h, fr.canonical.w};
        const std::size_t p[3] = {fr.padded.d, fr.padded.h, fr.padded.w};
        for (int a = 0; a < 3; ++a) s.target[a] *= static_cast<double>(c[a]) / static_cast<double>(p[a]);
        break;
      }
      case probe::Task::surv: {
        s.target = report::parse_numbers(fields, where);
        if (s.target.size() != 2 || !(s.target[0] > 0.0) || (s.target[1] != 0.0 && s.target[1] != 1.0)) {
          throw DataError(where + ": survival rows need time_days > 0 and event in {0,1}");
        }
        break;
      }
      case probe::Task::seg: {
        const RawVolume mask = read_raw_volume(resolve_relative(req.labels, fields.at(0)));
        if (!(mask.voxels.dims() == fr.canonical)) {
          throw DataError(where + ": mask shape does not match the canonical volume the embedding was built from");
        }
        s.label_dims = seg_target(fr, patch, cfg.probe.seg_max_side);
        s.labels = sample_mask(mask.voxels, fr, s.label_dims);
        for (auto l : s.labels) {
          if (l < 0) throw DataError(where + ": negative mask label");
          d.n_classes = std::max<std::size_t>(d.n_classes, static_cast<std::size_t>(l) + 1);
        }
        break;
      }
      case probe::Task::retr:
        break;
    }
    d.frames.push_back(fr);
    d.samples.push_back(std::move(s));
  }
  d.n_columns = req.task == probe::Task::cls ? width : 1;
  d.n_classes = std::max<std::size_t>(d.n_classes, 2);
  return d;
}

std::unique_ptr<probe::ProbeModel> make_probe(const ProbeRequest& req, const config::RunConfig& cfg, std::size_t dim,
                                              std::size_t n_out, std::size_t n_classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto& p = cfg.probe;
  const bool patch = req.token == probe::TokenKind::patch;
  switch (req.task) {
    case probe::Task::cls:
    case probe::Task::reg:
      if (patch) return std::make_unique<probe::QFormerProbe>(dim, p.qformer_queries, p.qformer_heads, n_out, rng);
      return std::make_unique<probe::MlpProbe>(dim, p.hidden, n_out, rng);
    case probe::Task::surv:
      if (patch) return std::make_unique<probe::QFormerProbe>(dim, p.qformer_queries, p.qformer_heads, 1, rng);
      return std::make_unique<probe::SurvivalHead>(dim, rng);
    case probe::Task::loc:
      if (!patch) throw ConfigError("localisation reads patch tokens; use --token patch");
      return std::make_unique<probe::LocalisationHead>(dim, p.loc_heads, rng);
    case probe::Task::seg:
      if (!patch) throw ConfigError("segmentation reads patch tokens; use --token patch");
      return std::make_unique<probe::SegDecoder>(dim, p.seg_channels, n_classes, rng);
    case probe::Task::retr:
      break;
  }
  throw ConfigError("retrieval has no trainable probe");
}

ProbeOutcome run_retrieval(const ProbeRequest& req, const embed::EmbeddingCache& cache, const std::string& fp) {
  const auto rows = report::read_rows(req.labels);
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& r : rows) {
    if (r.size() != 2) throw DataError(req.labels.string() + ": retrieval rows are query_id,positive_id");
    if (!cache.contains(r[0]) || !cache.contains(r[1])) throw DataError("retrieval pair " + r[0] + "/" + r[1] + " is not cached");
    pairs.emplace_back(r[0], r[1]);
  }
  if (pairs.size() < 2) throw DataError("retrieval needs at least two query/positive pairs");
  auto vec = [&](const std::string& id) {
    const auto rec = cache.get(id, fp);
    if (req.token == probe::TokenKind::cls) return rec.class_token;
    std::vector<double> m(rec.dim, 0.0);
    for (std::size_t i = 0; i < rec.n_patches(); ++i)
      for (std::size_t c = 0; c < rec.dim; ++c) m[c] += rec.patch_tokens[i * rec.dim + c] / static_cast<double>(rec.n_patches());
    return m;
  };
  std::vector<std::vector<double>> queries, positives;
  for (const auto& [q, p] : pairs) {
    queries.push_back(vec(q));
    positives.push_back(vec(p));
  }
  ProbeOutcome out;
  out.metric = "recall_at_10";
  std::string csv = "query_id,rank,n_candidates\n";
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    std::mt19937_64 rng(aug::derive_seed(req.seed, i));
    std::vector<std::size_t> others;
    for (std::size_t j = 0; j < pairs.size(); ++j)
      if (j != i) others.push_back(j);
    std::shuffle(others.begin(), others.end(), rng);
    others.resize(std::min<std::size_t>(others.size(), 99));
    const std::size_t slot = std::uniform_int_distribution<std::size_t>(0, others.size())(rng);
    std::vector<std::vector<double>> cands;
    for (auto j : others) cands.push_back(positives[j]);
    cands.insert(cands.begin() + static_cast<std::ptrdiff_t>(slot), positives[i]);
    const std::size_t rank = probe::retrieval_rank(queries[i], cands, slot);
    hits += rank <= 10;
    csv += pairs[i].first + "," + std::to_string(rank) + "," + std::to_string(cands.size()) + "\n";
  }
  fs::create_directories(req.out_dir);
  out.predictions = req.out_dir / "predictions.csv";
  write_binary_atomic(out.predictions, csv);
  out.n_test = pairs.size();
  out.best_val = {static_cast<double>(hits) / static_cast<double>(pairs.size())};
  write_json(req.out_dir / "probe.json", {{"task", "retr"},
                                          {"token", probe::to_string(req.token)},
                                          {"metric", out.metric},
                                          {"fingerprint", fp},
                                          {"seed", req.seed},
                                          {"n_queries", pairs.size()},
                                          {"recall_at_10", out.best_val[0]}});
  return out;
}

// ---- eval helpers ------------------------------------------------------------------

struct Joined {
  std::vector<std::string> ids;
  std::vector<std::vector<double>> pred, truth;
};

Joined join(const fs::path& predictions, const fs::path& labels, bool need_labels) {
  const report::Table p = report::read_table(predictions);
  Joined j;
  report::Table l;
  if (need_labels) {
    if (labels.empty()) throw ConfigError("this metric needs --labels");
    l = report::read_table(labels);
  }
  for (const auto& [id, f] : p) {
    j.ids.push_back(id);
    j.pred.push_back(report::parse_numbers(f, predictions.string() + " row " + id));
    if (need_labels) {
      auto it = l.find(id);
      if (it == l.end()) throw DataError(labels.string() + ": no label for predicted sample " + id);
      j.truth.push_back(report::parse_numbers(it->second, labels.string() + " row " + id));
    }
  }
  if (j.ids.size() < 2) throw DataError(predictions.string() + ": evaluation needs at least 2 predictions");
  return j;
}

double column_macro_auroc(const Joined& j, std::span<const std::size_t> idx) {
  const std::size_t k = j.pred[0].size();
  double total = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> s;
    std::vector<std::uint8_t> l;
    for (auto i : idx) {
      s.push_back(j.pred[i].at(c));
      l.push_back(j.truth[i].at(c) != 0.0);
    }
    total += metrics::auroc_value(s, l);
  }
  return total / static_cast<double>(k);
}

std::size_t suffix_number(const std::string& metric, const std::string& prefix) {
  const std::string tail = metric.substr(prefix.size());
  if (tail.empty() || tail.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError("metric '" + metric + "' needs a positive integer suffix");
  }
  const auto v = std::stoull(tail);
  if (v == 0) throw ConfigError("metric '" + metric + "' needs a positive integer suffix");
  return static_cast<std::size_t>(v);
}

// ---- stage bookkeeping ---------------------------------------------------------------

struct Stage {
  std::string name;
  fs::path dir;
  std::string fingerprint;

  bool up_to_date() const {
    const fs::path f = dir / "stage.json";
    if (!fs::exists(f)) return false;
    try {
      const Json j = Json::parse(read_binary(f));
      return j.value("fingerprint", std::string()) == fingerprint && j.value("complete", false);
    } catch (const std::exception&) {
      return false;
    }
  }
  void complete(const config::RunConfig& cfg, const Json& inputs) const {
    write_resolved_config(cfg, dir);
    write_json(dir / "stage.json", {{"stage", name}, {"fingerprint", fingerprint}, {"inputs", inputs}, {"complete", true}});
  }
};

std::string stage_fingerprint(const std::string& name, const Json& parts) {
  return hex(fnv1a(name + "\n" + parts.dump()));
}

Json pick(const Json& j, std::initializer_list<const char*> keys) {
  Json out = Json::object();
  for (const char* k : keys)
    if (j.contains(k)) out[k] = j.at(k);
  return out;
}

Json spec_json(const report::PhantomSpec& s) {
  std::vector<std::string> fams;
  for (auto f : s.families) fams.push_back(report::to_string(f));
  return {{"n", s.n},
          {"side", s.side},
          {"families", fams},
          {"radius", {s.radius_min, s.radius_max}},
          {"tissue_hu", s.tissue_hu},
          {"noise_hu", s.noise_hu},
          {"intensity_hu", {s.intensity_min_hu, s.intensity_max_hu}},
          {"rescans", s.rescans},
          {"hazard_beta", s.hazard_beta},
          {"base_hazard", s.base_hazard},
          {"censor_max_days", s.censor_max_days},
          {"seed", s.seed}};
}

}  // namespace

void write_resolved_config(const config::RunConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  write_binary_atomic(dir / "config.json", config::to_json(cfg).dump(2) + "\n");
}

// ---- prep ------------------------------------------------------------------------

PrepSummary run_prep(const fs::path& in_dir, const fs::path& out_dir, const config::RunConfig& cfg) {
  const auto inputs = list_volume_inputs(in_dir);
  if (inputs.empty()) throw DataError(in_dir.string() + ": no readable volumes");
  prep::NormAccumulator acc;
  std::vector<RawVolume> resampled;
  std::set<std::string> seen;
  for (const auto& path : inputs) {
    RawVolume raw = read_raw_volume(path);
    if (raw.source_id.empty()) raw.source_id = path.stem().string();
    if (!seen.insert(raw.source_id).second) throw DataError("duplicate volume id " + raw.source_id);
    validate(raw);
    RawVolume iso = prep::resample_isotropic(raw, cfg.prep.max_side);
    acc.add(iso);
    resampled.push_back(std::move(iso));
  }
  PrepSummary s;
  s.stats = acc.finish();
  fs::create_directories(out_dir);
  for (const auto& iso : resampled) {
    prep::StripResult r = prep::strip_background(prep::clip_and_normalize(iso, s.stats), cfg.prep.air_threshold_hu);
    if (r.no_foreground) s.no_foreground.push_back(iso.source_id);
    write_canonical_volume(out_dir / iso.source_id, r.volume);
    ++s.n;
  }
  write_json(out_dir / "stats.json", {{"mu_hu", s.stats.mu_hu},
                                      {"sigma_hu", s.stats.sigma_hu},
                                      {"n_voxels", s.stats.n_voxels},
                                      {"n_volumes", s.n},
                                      {"no_foreground", s.no_foreground}});
  write_resolved_config(cfg, out_dir);
  return s;
}

std::vector<CanonicalVolume> load_canonical_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError(dir.string() + ": not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().extension() != ".json") continue;
    const auto name = e.path().filename().string();
    if (name == "stats.json" || name == "config.json" || name == "stage.json") continue;
    files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<CanonicalVolume> out;
  for (const auto& f : files) out.push_back(read_canonical_volume(f));
  if (out.empty()) throw DataError(dir.string() + ": no canonical volumes (run prep first)");
  return out;
}

// ---- pretrain ----------------------------------------------------------------------

train::SslState run_pretrain(const fs::path& canon_dir, const fs::path& out_dir, const config::RunConfig& cfg) {
  cfg.validate();
  const auto corpus = load_canonical_dir(canon_dir);
  const fs::path ckpt = out_dir / "checkpoint.bin";
  train::SslState state = fs::exists(ckpt) ? train::load_checkpoint(ckpt, &cfg.ssl) : train::SslState::init(cfg.ssl);
  if (state.step > 0) log("resuming pretraining at step " + std::to_string(state.step));
  write_resolved_config(cfg, out_dir);
  train::PretrainOptions opts;
  opts.out_dir = out_dir;
  opts.on_step = [](const train::StepReport& r) {
    if (r.applied && (r.step % 25 == 0 || r.step == 1)) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "step %zu loss %.4f (dino %.4f ibot %.4f koleo %.4f) lr %.2e", r.step, r.loss,
                    r.dino, r.ibot, r.koleo, r.lr);
      log(buf);
    }
  };
  return train::pretrain(std::move(state), corpus, opts);
}

// ---- embed -------------------------------------------------------------------------

EmbedSummary run_embed(const fs::path& canon_dir, const fs::path& checkpoint, const fs::path& cache_dir,
                       const config::RunConfig& cfg) {
  cfg.validate();
  const auto frozen = train::load_frozen_backbone(checkpoint);
  if (!(frozen.backbone.cfg == cfg.ssl.backbone)) {
    throw ConfigError("checkpoint backbone differs from the configured backbone block");
  }
  const auto corpus = load_canonical_dir(canon_dir);
  embed::EmbeddingCache cache(cache_dir);
  const std::string existing = cache.fingerprint();
  if (!existing.empty() && existing != frozen.fingerprint) {
    throw DataError(cache_dir.string() + " holds embeddings from backbone " + existing + "; use a fresh cache directory");
  }
  EmbedSummary s;
  s.fingerprint = frozen.fingerprint;
  for (const auto& vol : corpus) {
    if (cache.contains(vol.source_id)) {
      try {
        const auto r = cache.get(vol.source_id, frozen.fingerprint);
        if (r.mode == cfg.embed.mode) {
          ++s.reused;
          continue;
        }
      } catch (const DataError&) {
      }
    }
    cache.put(embed::extract(vol, frozen.backbone, frozen.fingerprint, cfg.embed));
    ++s.embedded;
  }
  write_resolved_config(cfg, cache_dir);
  return s;
}

embed::PcaRgb run_viz_pca(const fs::path& cache_dir, const std::string& sample_id, const fs::path& out_stem) {
  embed::EmbeddingCache cache(cache_dir);
  const auto rec = cache.get(sample_id, cache.fingerprint());
  const auto grid = rec.token_grid();
  const embed::PcaRgb pca = embed::pca_rgb(grid.tokens, grid.grid);
  fs::path nii = out_stem;
  nii += ".nii";
  fs::path meta = out_stem;
  meta += ".json";
  if (!out_stem.parent_path().empty()) fs::create_directories(out_stem.parent_path());
  embed::write_rgb_nifti(nii, pca);
  write_json(meta, {{"sample_id", sample_id},
                    {"grid", {pca.grid.d, pca.grid.h, pca.grid.w}},
                    {"variances", pca.variances},
                    {"total_variance", pca.total_variance},
                    {"rank", pca.rank},
                    {"rank_deficient", pca.rank_deficient}});
  return pca;
}

// ---- probes ------------------------------------------------------------------------

ProbeOutcome run_probe(const ProbeRequest& req, const config::RunConfig& cfg) {
  cfg.validate();
  if (!(req.fraction > 0.0 && req.fraction <= 1.0)) throw ConfigError("--fraction must lie in (0, 1]");
  embed::EmbeddingCache cache(req.cache_dir);
  const std::string fp = cache.fingerprint();
  if (fp.empty()) throw DataError(req.cache_dir.string() + ": embedding cache is empty");
  write_resolved_config(cfg, req.out_dir);
  if (req.task == probe::Task::retr) return run_retrieval(req, cache, fp);

  ProbeData data = load_probe_data(req, cfg, cache, fp);
  std::vector<std::string> patients;
  for (const auto& s : data.samples) patients.push_back(s.patient);
  const probe::Split split = probe::make_split(patients, cfg.probe.val_fraction, cfg.probe.test_fraction, req.seed);
  probe::check_patient_disjoint(split, patients);
  const std::vector<std::size_t>& test = split.test.empty() ? split.val : split.test;

  probe::FitOptions o;
  o.task = req.task;
  o.epochs = cfg.probe.epochs;
  o.patience = cfg.probe.patience;
  o.batch_size = cfg.probe.batch_size;
  o.lr = cfg.probe.lr;
  o.weight_decay = cfg.probe.weight_decay;
  o.fraction = req.fraction;
  o.seed = req.seed;
  o.expected_fingerprint = fp;

  const std::size_t dim = data.samples.front().class_token.size();
  ProbeOutcome out;
  out.metric = probe::metric_name(req.task);
  out.n_test = test.size();
  Json columns = Json::array();
  std::vector<std::vector<double>> preds(test.size());
  std::vector<std::vector<std::int32_t>> seg_pred;
  std::size_t n_train_used = 0;
  const std::size_t n_out = req.task == probe::Task::reg ? data.samples.front().target.size() : 1;
  for (std::size_t col = 0; col < data.n_columns; ++col) {
    std::vector<probe::ProbeSample> view = data.samples;
    if (req.task == probe::Task::cls)
      for (auto& s : view) s.target = {s.target.at(col)};
    auto model = make_probe(req, cfg, dim, n_out, data.n_classes, aug::derive_seed(req.seed, 3 + col));
    const probe::FitResult r = probe::fit(*model, view, split, o);
    n_train_used = r.train_used.size();
    out.best_val.push_back(r.best_val);
    columns.push_back({{"best_epoch", r.best_epoch}, {"best_val", r.best_val}, {"val_trace", r.val_trace},
                       {"loss_trace", r.loss_trace}, {"val_loss_trace", r.val_loss_trace}});
    if (req.task == probe::Task::seg) {
      seg_pred = probe::predict_labels(*model, view, test);
    } else {
      const auto p = probe::predict(*model, req.task, view, test);
      for (std::size_t i = 0; i < test.size(); ++i) preds[i].insert(preds[i].end(), p[i].begin(), p[i].end());
    }
  }

  std::string csv;
  switch (req.task) {
    case probe::Task::cls: {
      csv = "sample_id";
      for (std::size_t c = 0; c < data.n_columns; ++c) csv += ",prob" + (data.n_columns > 1 ? std::to_string(c) : "");
      break;
    }
    case probe::Task::reg: csv = "sample_id,pred"; break;
    case probe::Task::loc: csv = "sample_id,z,y,x"; break;
    case probe::Task::surv: csv = "sample_id,risk"; break;
    case probe::Task::seg: {
      csv = "sample_id";
      for (std::size_t c = 1; c < data.n_classes; ++c) {
        const auto k = std::to_string(c);
        csv += ",tp" + k + ",fp" + k + ",fn" + k;
      }
      break;
    }
    case probe::Task::retr: break;
  }
  csv += "\n";
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& s = data.samples[test[i]];
    csv += s.id;
    if (req.task == probe::Task::seg) {
      std::vector<std::size_t> tp(data.n_classes), fp_(data.n_classes), fn(data.n_classes);
      for (std::size_t v = 0; v < s.labels.size(); ++v) {
        const auto p = static_cast<std::size_t>(seg_pred[i][v]), t = static_cast<std::size_t>(s.labels[v]);
        if (p == t) ++tp[p];
        else {
          ++fp_[p];
          ++fn[t];
        }
      }
      for (std::size_t c = 1; c < data.n_classes; ++c)
        csv += "," + std::to_string(tp[c]) + "," + std::to_string(fp_[c]) + "," + std::to_string(fn[c]);
    } else {
      std::vector<double> v = preds[i];
      if (req.task == probe::Task::loc) {
        const Frame& fr = data.frames[test[i]];
        const std::size_t c[3] = {fr.canonical.d, fr.canonical.h, fr.canonical.w};
        const std::size_t p[3] = {fr.padded.d, fr.padded.h, fr.padded.w};
        // Mass on the replicated rim maps past the canonical edge; clamp to it.
        for (int a = 0; a < 3; ++a) v[a] = std::clamp(v[a] * static_cast<double>(p[a]) / static_cast<double>(c[a]), 0.0, 1.0);
      }
      for (double x : v) csv += "," + report::fmt(x);
    }
    csv += "\n";
  }
  out.predictions = req.out_dir / "predictions.csv";
  write_binary_atomic(out.predictions, csv);
  std::vector<std::string> test_ids;
  for (auto i : test) test_ids.push_back(data.samples[i].id);
  write_json(req.out_dir / "probe.json", {{"task", probe::to_string(req.task)},
                                          {"token", probe::to_string(req.token)},
                                          {"metric", out.metric},
                                          {"fraction", req.fraction},
                                          {"seed", req.seed},
                                          {"fingerprint", fp},
                                          {"n_train", split.train.size()},
                                          {"n_train_used", n_train_used},
                                          {"n_val", split.val.size()},
                                          {"n_test", test.size()},
                                          {"n_classes", req.task == probe::Task::seg ? data.n_classes : 0},
                                          {"columns", columns},
                                          {"test_ids", test_ids}});
  return out;
}

// ---- eval ----------------------------------------------------------------------------

metrics::MetricReport run_eval(const fs::path& predictions, const fs::path& labels, const std::string& metric,
                               std::size_t bootstrap, std::uint64_t seed, std::size_t max_redraws) {
  auto boot = [&](const metrics::ResampleMetric& fn, std::size_t n) {
    return metrics::bootstrap_ci(metric, fn, n, bootstrap, seed, max_redraws);
  };
  if (metric == "auroc" || metric == "auroc_bootstrap" || metric == "accuracy" || metric == "f1") {
    const Joined j = join(predictions, labels, true);
    const std::size_t k = j.pred[0].size();
    for (std::size_t i = 0; i < j.ids.size(); ++i)
      if (j.pred[i].size() != k || j.truth[i].size() != k) throw DataError("prediction and label columns differ for " + j.ids[i]);
    if (metric == "auroc" && k == 1) {
      std::vector<double> s;
      std::vector<std::uint8_t> l;
      for (std::size_t i = 0; i < j.ids.size(); ++i) {
        s.push_back(j.pred[i][0]);
        l.push_back(j.truth[i][0] != 0.0);
      }
      return metrics::auroc(s, l);
    }
    if (metric == "auroc" || metric == "auroc_bootstrap") {
      return boot([&](std::span<const std::size_t> idx) { return column_macro_auroc(j, idx); }, j.ids.size());
    }
    const bool acc = metric == "accuracy";
    return boot(
        [&](std::span<const std::size_t> idx) {
          double total = 0.0;
          for (std::size_t c = 0; c < k; ++c) {
            std::vector<double> s;
            std::vector<std::uint8_t> l;
            for (auto i : idx) {
              s.push_back(j.pred[i][c]);
              l.push_back(j.truth[i][c] != 0.0);
            }
            total += acc ? metrics::accuracy(s, l) : metrics::f1(s, l);
          }
          return total / static_cast<double>(k);
        },
        j.ids.size());
  }
  if (metric == "mae") {
    const Joined j = join(predictions, labels, true);
    for (std::size_t i = 0; i < j.ids.size(); ++i)
      if (j.pred[i].size() != j.truth[i].size()) throw DataError("prediction and label columns differ for " + j.ids[i]);
    return boot(
        [&](std::span<const std::size_t> idx) {
          std::vector<double> p, t;
          for (auto i : idx) {
            p.insert(p.end(), j.pred[i].begin(), j.pred[i].end());
            t.insert(t.end(), j.truth[i].begin(), j.truth[i].end());
          }
          return metrics::mae(p, t);
        },
        j.ids.size());
  }
  if (metric == "c_index" || metric.rfind("time_auroc_", 0) == 0) {
    const Joined j = join(predictions, labels, true);
    for (std::size_t i = 0; i < j.ids.size(); ++i)
      if (j.pred[i].size() != 1 || j.truth[i].size() != 2) throw DataError("survival rows need risk and (time, event)");
    const bool cidx = metric == "c_index";
    const double horizon = cidx ? 0.0 : static_cast<double>(suffix_number(metric, "time_auroc_"));
    return boot(
        [&](std::span<const std::size_t> idx) {
          std::vector<double> r, t;
          std::vector<std::uint8_t> e;
          for (auto i : idx) {
            r.push_back(j.pred[i][0]);
            t.push_back(j.truth[i][0]);
            e.push_back(j.truth[i][1] != 0.0);
          }
          return cidx ? metrics::c_index(r, t, e) : metrics::time_auroc(r, t, e, horizon);
        },
        j.ids.size());
  }
  if (metric == "dice_macro" || metric == "dice_micro") {
    const Joined j = join(predictions, labels, false);
    const std::size_t w = j.pred[0].size();
    if (w == 0 || w % 3) throw DataError("segmentation predictions hold tp,fp,fn triples per foreground class");
    const bool macro = metric == "dice_macro";
    return boot(
        [&](std::span<const std::size_t> idx) {
          const std::size_t nc = w / 3;
          std::vector<double> tp(nc, 0), fp(nc, 0), fn(nc, 0);
          for (auto i : idx)
            for (std::size_t c = 0; c < nc; ++c) {
              tp[c] += j.pred[i].at(3 * c);
              fp[c] += j.pred[i].at(3 * c + 1);
              fn[c] += j.pred[i].at(3 * c + 2);
            }
          if (!macro) {
            const double t = std::accumulate(tp.begin(), tp.end(), 0.0);
            const double d = 2 * t + std::accumulate(fp.begin(), fp.end(), 0.0) + std::accumulate(fn.begin(), fn.end(), 0.0);
            return d > 0 ? 2 * t / d : NAN;
          }
          double total = 0.0;
          std::size_t counted = 0;
          for (std::size_t c = 0; c < nc; ++c) {
            if (tp[c] + fn[c] == 0) continue;  // class absent from the truth
            total += 2 * tp[c] / (2 * tp[c] + fp[c] + fn[c]);
            ++counted;
          }
          return counted ? total / static_cast<double>(counted) : NAN;
        },
        j.ids.size());
  }
  if (metric.rfind("recall_at_", 0) == 0) {
    const std::size_t k = suffix_number(metric, "recall_at_");
    const Joined j = join(predictions, labels, false);
    std::vector<std::size_t> ranks;
    for (std::size_t i = 0; i < j.ids.size(); ++i) {
      if (j.pred[i].empty() || !(j.pred[i][0] >= 1.0)) throw DataError("retrieval rows need a 1-based rank");
      ranks.push_back(static_cast<std::size_t>(j.pred[i][0]));
    }
    return boot(
        [&](std::span<const std::size_t> idx) {
          std::vector<std::size_t> r;
          for (auto i : idx) r.push_back(ranks[i]);
          return metrics::recall_at_k(r, k);
        },
        ranks.size());
  }
  throw ConfigError("unknown metric '" + metric +
                    "' (auroc, auroc_bootstrap, accuracy, f1, mae, c_index, time_auroc_<days>, dice_macro, dice_micro, "
                    "recall_at_<k>)");
}

// ---- plots ---------------------------------------------------------------------------

std::vector<report::ReportRow> load_report_rows(const std::vector<fs::path>& files) {
  std::vector<report::ReportRow> rows;
  for (const auto& f : files) {
    const Json j = read_json(f);
    report::ReportRow r;
    r.report = metrics::report_from_json(j);
    r.group = j.value("group", f.stem().string());
    r.label = j.value("label", r.report.name);
    r.x = j.value("x", 1.0);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<std::string> run_plot(const std::vector<report::ReportRow>& rows, const fs::path& out_dir) {
  if (rows.empty()) throw DataError("nothing to plot");
  fs::create_directories(out_dir);
  std::vector<std::string> warnings;
  std::vector<report::ReportRow> bars, curve;
  std::map<std::string, std::set<double>> xs;
  for (const auto& r : rows) xs[r.group + "\n" + r.label].insert(r.x);
  for (const auto& r : rows) {
    if (r.x == 1.0) bars.push_back(r);
    if (xs[r.group + "\n" + r.label].size() > 1) curve.push_back(r);
  }
  if (bars.empty()) bars = rows;
  auto b = report::bar_chart(bars, "Probe results with 95% confidence intervals");
  write_binary_atomic(out_dir / "bars.svg", b.svg);
  warnings.insert(warnings.end(), b.warnings.begin(), b.warnings.end());
  if (!curve.empty()) {
    auto c = report::fraction_curve(curve, "Metric against labelled training fraction");
    write_binary_atomic(out_dir / "fractions.svg", c.svg);
    warnings.insert(warnings.end(), c.warnings.begin(), c.warnings.end());
  }
  write_binary_atomic(out_dir / "summary.csv", report::emit_csv(rows));
  return warnings;
}

// ---- end to end --------------------------------------------------------------------

PipelineSummary run_pipeline(const config::RunConfig& cfg, const PipelineOptions& opts) {
  cfg.validate();
  if (opts.out_dir.empty()) throw ConfigError("pipeline needs an output directory");
  if (opts.fractions.empty()) throw ConfigError("pipeline needs at least one training fraction");
  const Json cj = config::to_json(cfg);
  PipelineSummary summary;
  auto record = [&](const Stage& st, bool skipped) {
    summary.stages.push_back({st.name, st.fingerprint, skipped});
    log(std::string(skipped ? "up to date: " : "completed: ") + st.name);
  };

  // Inputs.
  fs::path input = opts.input_dir;
  std::string input_fp;
  if (input.empty()) {
    Stage st{"phantoms", opts.out_dir / "phantoms", ""};
    st.fingerprint = stage_fingerprint(st.name, spec_json(opts.phantoms));
    const bool skip = st.up_to_date();
    if (!skip) {
      log("generating " + std::to_string(opts.phantoms.n) + " phantom patients");
      const auto corpus = report::generate_phantoms(opts.phantoms);
      report::write_phantom_corpus(corpus, opts.phantoms, st.dir);
      st.complete(cfg, spec_json(opts.phantoms));
    }
    record(st, skip);
    input = st.dir;
    input_fp = st.fingerprint;
  } else {
    input_fp = hex(fnv1a(fs::absolute(input).string()));
  }

  Stage prep_st{"prep", opts.out_dir / "prep", ""};
  prep_st.fingerprint = stage_fingerprint("prep", {input_fp, pick(cj, {"prep"})});
  {
    const bool skip = prep_st.up_to_date();
    if (!skip) {
      fs::remove_all(prep_st.dir);
      run_prep(input / "volumes", prep_st.dir, cfg);
      prep_st.complete(cfg, {{"input", fs::absolute(input).string()}, {"upstream", input_fp}});
    }
    record(prep_st, skip);
  }

  Stage pre_st{"pretrain", opts.out_dir / "pretrain", ""};
  pre_st.fingerprint = stage_fingerprint("pretrain", {prep_st.fingerprint, pick(cj, {"seed", "augment", "backbone", "ssl", "trainer"})});
  {
    const bool skip = pre_st.up_to_date();
    if (!skip) {
      // An interrupted run of the same configuration resumes from its last
      // checkpoint; anything else starts over.
      const fs::path partial = pre_st.dir / "stage.partial.json";
      bool resumable = false;
      if (fs::exists(partial)) {
        try {
          resumable = read_json(partial).value("fingerprint", std::string()) == pre_st.fingerprint;
        } catch (const DataError&) {
        }
      }
      if (!resumable) fs::remove_all(pre_st.dir);
      fs::create_directories(pre_st.dir);
      write_json(partial, {{"fingerprint", pre_st.fingerprint}});
      run_pretrain(prep_st.dir, pre_st.dir, cfg);
      fs::remove(pre_st.dir / "stage.partial.json");
      pre_st.complete(cfg, {{"upstream", prep_st.fingerprint}});
    }
    record(pre_st, skip);
  }
  const auto frozen = train::load_frozen_backbone(pre_st.dir / "checkpoint.bin");

  const config::EmbedMode primary = cfg.embed.mode;
  const config::EmbedMode secondary =
      primary == config::EmbedMode::full3d ? config::EmbedMode::chunked2p5d : config::EmbedMode::full3d;
  std::map<config::EmbedMode, Stage> caches;
  for (auto mode : {primary, secondary}) {
    config::RunConfig c = cfg;
    c.embed.mode = mode;
    Stage st{std::string("embed-") + config::to_string(mode), opts.out_dir / "cache" / config::to_string(mode), ""};
    st.fingerprint = stage_fingerprint(st.name, {pre_st.fingerprint, frozen.fingerprint, pick(config::to_json(c), {"embed"})});
    const bool skip = st.up_to_date();
    if (!skip) {
      if (fs::exists(st.dir / "stage.json")) fs::remove_all(st.dir);
      run_embed(prep_st.dir, pre_st.dir / "checkpoint.bin", st.dir, c);
      st.complete(c, {{"upstream", pre_st.fingerprint}, {"backbone_fingerprint", frozen.fingerprint}});
    }
    record(st, skip);
    caches.emplace(mode, st);
  }

  struct Job {
    std::string name;
    std::string group;
    std::string label;
    probe::Task task;
    probe::TokenKind token;
    double fraction;
    config::EmbedMode mode;
    std::vector<std::string> metrics;
  };
  std::vector<Job> jobs;
  const std::string pm = config::to_string(primary), sm = config::to_string(secondary);
  for (double f : opts.fractions) {
    char name[48];
    std::snprintf(name, sizeof name, "cls-mlp-f%03d", static_cast<int>(std::lround(f * 100)));
    jobs.push_back({name, "cls", "mlp/class/" + pm, probe::Task::cls, probe::TokenKind::cls, f, primary, {"auroc"}});
  }
  jobs.push_back({"cls-qformer", "cls", "qformer/patch/" + pm, probe::Task::cls, probe::TokenKind::patch, 1.0, primary, {"auroc"}});
  jobs.push_back({"cls-mlp-" + sm, "cls", "mlp/class/" + sm, probe::Task::cls, probe::TokenKind::cls, 1.0, secondary, {"auroc"}});
  jobs.push_back({"reg-mlp", "reg", "mlp/class/" + pm, probe::Task::reg, probe::TokenKind::cls, 1.0, primary, {"mae"}});
  jobs.push_back({"surv-cox", "surv", "cox/class/" + pm, probe::Task::surv, probe::TokenKind::cls, 1.0, primary, {"c_index"}});
  jobs.push_back({"loc", "loc", "attention/patch/" + pm, probe::Task::loc, probe::TokenKind::patch, 1.0, primary, {"mae"}});
  jobs.push_back({"seg", "seg", "decoder/patch/" + pm, probe::Task::seg, probe::TokenKind::patch, 1.0, primary,
                  {"dice_macro", "dice_micro"}});
  jobs.push_back({"retr", "retr", "cosine/class/" + pm, probe::Task::retr, probe::TokenKind::cls, 1.0, primary, {"recall_at_10"}});

  const fs::path patients = input / "patients.csv";
  std::vector<report::ReportRow> rows;
  for (const auto& job : jobs) {
    const Stage& cache = caches.at(job.mode);
    const fs::path labels = input / "labels" / (std::string(probe::to_string(job.task)) + ".csv");
    Stage st{"probe-" + job.name, opts.out_dir / "probes" / job.name, ""};
    st.fingerprint = stage_fingerprint(
        st.name, {cache.fingerprint, input_fp, pick(cj, {"seed", "probe"}), probe::to_string(job.task),
                  probe::to_string(job.token), job.fraction});
    const bool skip = st.up_to_date();
    if (!skip) {
      ProbeRequest req;
      req.cache_dir = cache.dir;
      req.labels = labels;
      req.patients = fs::exists(patients) ? patients : fs::path();
      req.task = job.task;
      req.token = job.token;
      req.fraction = job.fraction;
      req.seed = cfg.seed;
      req.out_dir = st.dir;
      run_probe(req, cfg);
      st.complete(cfg, {{"cache", cache.fingerprint}, {"labels", labels.string()}});
    }
    record(st, skip);

    for (const auto& metric : job.metrics) {
      Stage ev{"eval-" + job.name + "-" + metric, opts.out_dir / "eval" / (job.name + "-" + metric), ""};
      ev.fingerprint = stage_fingerprint(ev.name, {st.fingerprint, pick(cj, {"seed", "eval"}), metric});
      const fs::path out = ev.dir / "report.json";
      const bool eskip = ev.up_to_date() && fs::exists(out);
      if (!eskip) {
        const auto rep = run_eval(st.dir / "predictions.csv", labels, metric, cfg.eval.bootstrap, cfg.seed, cfg.eval.max_redraws);
        Json j = metrics::to_json(rep);
        j["group"] = job.group + " (" + metric + ")";
        j["label"] = job.label;
        j["x"] = job.fraction;
        write_json(out, j);
        ev.complete(cfg, {{"probe", st.fingerprint}});
      }
      record(ev, eskip);
      summary.reports.push_back(out);
    }
  }

  rows = load_report_rows(summary.reports);
  Stage plot_st{"plot", opts.out_dir / "report", ""};
  plot_st.fingerprint = stage_fingerprint("plot", {hex(fnv1a(report::emit_csv(rows)))});
  const bool pskip = plot_st.up_to_date();
  if (!pskip) {
    for (const auto& w : run_plot(rows, plot_st.dir)) log("warning: " + w);
    plot_st.complete(cfg, {{"reports", summary.reports.size()}});
  }
  record(plot_st, pskip);
  return summary;
}

}  // namespace volssl::pipeline
