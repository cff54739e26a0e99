#pragma once
// Stage runners behind the command-line tool: prep, pretrain, embed, PCA view,
// probes, evaluation, plots, and the resumable end-to-end pipeline.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "volssl/config.hpp"
#include "volssl/embed.hpp"
#include "volssl/metrics.hpp"
#include "volssl/probe.hpp"
#include "volssl/reports.hpp"
#include "volssl/trainer.hpp"

namespace volssl::pipeline {

namespace fs = std::filesystem;
using config::Json;

/// Resolved config written next to every stage output.
void write_resolved_config(const config::RunConfig& cfg, const fs::path& dir);

// ---- prep ----------------------------------------------------------------------
struct PrepSummary {
  std::size_t n = 0;
  GlobalNormStats stats;
  std::vector<std::string> no_foreground;  // volumes left uncropped
};

/// Two passes over every readable input in in_dir: pooled intensity statistics,
/// then canonicalisation into out_dir/<id>.{vol,json}.
PrepSummary run_prep(const fs::path& in_dir, const fs::path& out_dir, const config::RunConfig& cfg);

/// Canonical volumes of a prep directory sorted by id.
std::vector<CanonicalVolume> load_canonical_dir(const fs::path& dir);

// ---- pretrain ------------------------------------------------------------------
/// Trains from scratch, or continues from out_dir/checkpoint.bin when present,
/// until trainer.total_iterations. Writes metrics.jsonl and checkpoints.
train::SslState run_pretrain(const fs::path& canon_dir, const fs::path& out_dir, const config::RunConfig& cfg);

// ---- embed ---------------------------------------------------------------------
struct EmbedSummary {
  std::size_t embedded = 0;
  std::size_t reused = 0;
  std::string fingerprint;
};

/// Teacher-backbone embeddings of every canonical volume into the cache.
/// Records already cached under the same fingerprint are kept.
EmbedSummary run_embed(const fs::path& canon_dir, const fs::path& checkpoint, const fs::path& cache_dir,
                       const config::RunConfig& cfg);

/// PCA-to-RGB view of one cached record: <out>.nii plus <out>.json.
embed::PcaRgb run_viz_pca(const fs::path& cache_dir, const std::string& sample_id, const fs::path& out_stem);

// ---- probes --------------------------------------------------------------------
struct ProbeRequest {
  fs::path cache_dir;
  fs::path labels;
  fs::path patients;  // optional sample_id,patient_id table; default one patient per sample
  probe::Task task = probe::Task::cls;
  probe::TokenKind token = probe::TokenKind::cls;
  double fraction = 1.0;
  std::uint64_t seed = 0;
  fs::path out_dir;
};

struct ProbeOutcome {
  std::string metric;
  std::vector<double> best_val;  // per label column
  std::size_t n_test = 0;
  fs::path predictions;
};

/// Fits the task's probe on the train split (or ranks candidates for
/// retrieval) and writes predictions.csv for the test split plus probe.json.
ProbeOutcome run_probe(const ProbeRequest& req, const config::RunConfig& cfg);

// ---- eval ----------------------------------------------------------------------
/// Metric names: auroc (Hanley-McNeil), auroc_bootstrap, accuracy, f1, mae,
/// c_index, time_auroc_<days>, dice_macro, dice_micro, recall_at_<k>.
/// Every metric except auroc uses the percentile bootstrap.
metrics::MetricReport run_eval(const fs::path& predictions, const fs::path& labels, const std::string& metric,
                               std::size_t bootstrap, std::uint64_t seed, std::size_t max_redraws);

// ---- plots ---------------------------------------------------------------------
/// bars.svg from the rows with x == 1, fractions.svg from groups holding several
/// x values, and summary.csv. Returns plot warnings.
std::vector<std::string> run_plot(const std::vector<report::ReportRow>& rows, const fs::path& out_dir);

/// Rows from report JSON files; group and label come from an optional
/// "group"/"label"/"x" triple in each file, else the file stem.
std::vector<report::ReportRow> load_report_rows(const std::vector<fs::path>& files);

// ---- end to end ----------------------------------------------------------------
struct PipelineOptions {
  fs::path out_dir;
  fs::path input_dir;          // raw volumes and labels; empty = generate phantoms
  report::PhantomSpec phantoms;  // used when input_dir is empty
  std::vector<double> fractions{0.2, 0.4, 0.6, 0.8, 1.0};
};

struct StageRecord {
  std::string name;
  std::string fingerprint;
  bool skipped = false;  // outputs already matched the fingerprint
};

struct PipelineSummary {
  std::vector<StageRecord> stages;
  std::vector<fs::path> reports;  // metric JSON files
};

/// phantoms -> prep -> pretrain -> embed (both modes) -> probes for all six
/// tasks -> eval -> plots. Each stage records stage.json with the fingerprint
/// of its config and upstream fingerprints and is skipped when it matches.
PipelineSummary run_pipeline(const config::RunConfig& cfg, const PipelineOptions& opts);

}  // namespace volssl::pipeline
