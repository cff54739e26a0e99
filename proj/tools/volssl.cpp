// Command-line entry point. Exit codes: 0 ok, 2 config error, 3 data error,
// 4 numerical failure.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "volssl/config.hpp"
#include "volssl/errors.hpp"
#include "volssl/pipeline.hpp"
#include "volssl/reports.hpp"

namespace fs = std::filesystem;
using namespace volssl;

namespace {

constexpr int kOk = 0, kConfig = 2, kData = 3, kNumerical = 4;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* app, Common& c, bool out_required = true) {
  app->add_option("--config", c.config, "JSON run configuration (defaults when omitted)");
  app->add_option("--seed", c.seed, "Override the configuration seed");
  auto* o = app->add_option("--out", c.out, "Output path");
  if (out_required) o->required();
}

config::RunConfig resolve(const Common& c, bool toy_default = false) {
  config::RunConfig cfg = c.config.empty() ? (toy_default ? config::toy() : config::RunConfig{}) : config::load(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.ssl.train.seed = *c.seed;
  }
  cfg.validate();
  return cfg;
}

void print_json(const config::Json& j) { std::cout << j.dump(2) << std::endl; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Volumetric self-distillation: pre-training, frozen embeddings, probes and statistics"};
  app.require_subcommand(1);

  // phantoms
  Common ph_c;
  report::PhantomSpec spec;
  std::vector<std::string> families;
  bool no_rescans = false;
  auto* ph = app.add_subcommand("phantoms", "Generate a synthetic phantom corpus with analytic labels");
  add_common(ph, ph_c);
  ph->add_option("--n", spec.n, "Number of patients")->check(CLI::PositiveNumber);
  ph->add_option("--side", spec.side, "Volume side in voxels");
  ph->add_option("--families", families, "Subset of sphere, rod, shell, two-component");
  ph->add_flag("--no-rescans", no_rescans, "Skip the second scan per patient");

  // prep
  Common prep_c;
  std::string prep_in;
  auto* prep = app.add_subcommand("prep", "Resample, clip, normalise and crop raw volumes");
  add_common(prep, prep_c);
  prep->add_option("--in", prep_in, "Directory of raw volumes")->required();

  // pretrain
  Common pre_c;
  std::string pre_data;
  std::optional<std::size_t> pre_steps;
  bool pre_toy = false;
  auto* pre = app.add_subcommand("pretrain", "Self-distillation pre-training (resumes from out/checkpoint.bin)");
  add_common(pre, pre_c);
  pre->add_option("--data", pre_data, "Directory of canonical volumes from prep")->required();
  pre->add_option("--steps", pre_steps, "Override trainer.total_iterations");
  pre->add_flag("--toy", pre_toy, "Start from the desk-scale configuration instead of the defaults");

  // embed
  Common emb_c;
  std::string emb_data, emb_ckpt, emb_mode;
  bool emb_toy = false;
  auto* emb = app.add_subcommand("embed", "Frozen-backbone embeddings into a cache directory");
  add_common(emb, emb_c);
  emb->add_option("--data", emb_data, "Directory of canonical volumes")->required();
  emb->add_option("--checkpoint", emb_ckpt, "Pre-training checkpoint")->required();
  emb->add_option("--mode", emb_mode, "full3d or chunked");
  emb->add_flag("--toy", emb_toy, "Start from the desk-scale configuration");

  // viz-pca
  std::string viz_cache, viz_id, viz_out;
  auto* viz = app.add_subcommand("viz-pca", "PCA-to-RGB view of one sample's patch tokens");
  viz->add_option("--cache", viz_cache, "Embedding cache")->required();
  viz->add_option("--id", viz_id, "Sample id")->required();
  viz->add_option("--out", viz_out, "Output stem (.nii and .json are appended)")->required();

  // probe
  Common pr_c;
  pipeline::ProbeRequest req;
  std::string pr_cache, pr_labels, pr_patients, pr_task = "cls", pr_token = "class";
  bool pr_toy = false;
  auto* pr = app.add_subcommand("probe", "Train a frozen-feature probe and predict the test split");
  add_common(pr, pr_c);
  pr->add_option("--cache", pr_cache, "Embedding cache")->required();
  pr->add_option("--labels", pr_labels, "Label file (sample_id, targets)")->required();
  pr->add_option("--patients", pr_patients, "sample_id,patient_id table for grouped splits");
  pr->add_option("--task", pr_task, "cls, reg, surv, loc, seg or retr");
  pr->add_option("--token", pr_token, "class or patch");
  pr->add_option("--fraction", req.fraction, "Fraction of training labels used");
  pr->add_flag("--toy", pr_toy, "Start from the desk-scale configuration");

  // eval
  std::string ev_pred, ev_labels, ev_metric, ev_out;
  std::size_t ev_boot = 10000, ev_redraws = 100;
  std::uint64_t ev_seed = 0;
  auto* ev = app.add_subcommand("eval", "Metric with standard error and 95% interval");
  ev->add_option("--pred", ev_pred, "predictions.csv from probe")->required();
  ev->add_option("--labels", ev_labels, "Label file");
  ev->add_option("--metric", ev_metric, "Metric name")->required();
  ev->add_option("--bootstrap", ev_boot, "Bootstrap resamples")->check(CLI::PositiveNumber);
  ev->add_option("--max-redraws", ev_redraws, "Undefined resamples tolerated");
  ev->add_option("--seed", ev_seed, "Bootstrap seed");
  ev->add_option("--out", ev_out, "Report JSON")->required();

  // plot
  std::vector<std::string> pl_reports;
  std::string pl_summary, pl_out;
  auto* pl = app.add_subcommand("plot", "Bar and fraction charts with CI whiskers plus summary.csv");
  pl->add_option("--reports", pl_reports, "Report JSON files");
  pl->add_option("--summary", pl_summary, "Existing summary.csv instead of report files");
  pl->add_option("--out", pl_out, "Output directory")->required();

  // pipeline
  Common pipe_c;
  pipeline::PipelineOptions popts;
  std::string pipe_in;
  std::size_t pipe_n = 120;
  std::optional<std::size_t> pipe_steps;
  auto* pipe = app.add_subcommand("pipeline", "phantoms -> prep -> pretrain -> embed -> probes -> eval -> plots");
  add_common(pipe, pipe_c);
  pipe->add_option("--input", pipe_in, "Corpus directory with volumes/, labels/ and patients.csv (default: phantoms)");
  pipe->add_option("--n", pipe_n, "Phantom patients when generating")->check(CLI::PositiveNumber);
  pipe->add_option("--steps", pipe_steps, "Override trainer.total_iterations");

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
      return app.exit(e);
    } catch (const CLI::ParseError& e) {
      app.exit(e);
      return kConfig;
    }

    if (*ph) {
      spec.seed = resolve(ph_c, true).seed;
      if (!families.empty()) {
        spec.families.clear();
        for (const auto& f : families) spec.families.push_back(report::family_from_string(f));
      }
      spec.rescans = !no_rescans;
      const auto corpus = report::generate_phantoms(spec);
      report::write_phantom_corpus(corpus, spec, ph_c.out);
      print_json({{"phantoms", corpus.size()}, {"out", ph_c.out}});
    } else if (*prep) {
      const auto cfg = resolve(prep_c);
      const auto s = pipeline::run_prep(prep_in, prep_c.out, cfg);
      print_json({{"volumes", s.n}, {"mu_hu", s.stats.mu_hu}, {"sigma_hu", s.stats.sigma_hu}, {"no_foreground", s.no_foreground}});
    } else if (*pre) {
      auto cfg = resolve(pre_c, pre_toy);
      if (pre_steps) cfg.ssl.train.total_iterations = *pre_steps;
      cfg.validate();
      const auto state = pipeline::run_pretrain(pre_data, pre_c.out, cfg);
      print_json({{"step", state.step}, {"checkpoint", (fs::path(pre_c.out) / "checkpoint.bin").string()}});
    } else if (*emb) {
      auto cfg = resolve(emb_c, emb_toy);
      if (!emb_mode.empty()) cfg.embed.mode = config::embed_mode_from_string(emb_mode);
      const auto s = pipeline::run_embed(emb_data, emb_ckpt, emb_c.out, cfg);
      print_json({{"embedded", s.embedded}, {"reused", s.reused}, {"fingerprint", s.fingerprint}});
    } else if (*viz) {
      const auto p = pipeline::run_viz_pca(viz_cache, viz_id, viz_out);
      print_json({{"rank", p.rank}, {"rank_deficient", p.rank_deficient}});
    } else if (*pr) {
      const auto cfg = resolve(pr_c, pr_toy);
      req.cache_dir = pr_cache;
      req.labels = pr_labels;
      req.patients = pr_patients;
      req.task = probe::task_from_string(pr_task);
      req.token = probe::token_kind_from_string(pr_token);
      req.seed = cfg.seed;
      req.out_dir = pr_c.out;
      const auto o = pipeline::run_probe(req, cfg);
      print_json({{"metric", o.metric}, {"best_val", o.best_val}, {"n_test", o.n_test}, {"predictions", o.predictions.string()}});
    } else if (*ev) {
      const auto rep = pipeline::run_eval(ev_pred, ev_labels, ev_metric, ev_boot, ev_seed, ev_redraws);
      const auto j = metrics::to_json(rep);
      if (fs::path(ev_out).has_parent_path()) fs::create_directories(fs::path(ev_out).parent_path());
      write_binary_atomic(ev_out, j.dump(2) + "\n");
      print_json(j);
    } else if (*pl) {
      std::vector<report::ReportRow> rows;
      if (!pl_summary.empty()) {
        rows = report::parse_csv(read_binary(pl_summary));
      } else {
        std::vector<fs::path> files(pl_reports.begin(), pl_reports.end());
        rows = pipeline::load_report_rows(files);
      }
      for (const auto& w : pipeline::run_plot(rows, pl_out)) std::cerr << "warning: " << w << "\n";
      print_json({{"rows", rows.size()}, {"out", pl_out}});
    } else if (*pipe) {
      auto cfg = resolve(pipe_c, true);
      if (pipe_steps) cfg.ssl.train.total_iterations = *pipe_steps;
      cfg.validate();
      popts.out_dir = pipe_c.out;
      popts.input_dir = pipe_in;
      popts.phantoms.n = pipe_n;
      popts.phantoms.seed = cfg.seed;
      const auto s = pipeline::run_pipeline(cfg, popts);
      config::Json stages = config::Json::array();
      for (const auto& st : s.stages) stages.push_back({{"stage", st.name}, {"skipped", st.skipped}});
      print_json({{"stages", stages}, {"reports", s.reports.size()}});
    }
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
