#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "volssl/config.hpp"
#include "volssl/errors.hpp"
#include "volssl/simd.hpp"
#include "volssl/trainer.hpp"

using namespace volssl;
using ag::Tensor;

namespace {

train::SslConfig tiny_ssl() {
  train::SslConfig c;
  c.backbone.patch_size = 4;
  c.backbone.embed_dim = 12;
  c.backbone.n_blocks = 2;
  c.backbone.n_heads = 2;
  c.backbone.mlp_ratio = 2;
  c.backbone.n_registers = 2;
  c.cls_head = {12, 16, 8, 16};
  c.patch_head = c.cls_head;
  c.augment.patch_size = 4;
  c.augment.global_target = {8, 8, 8};
  c.augment.local_target = {4, 4, 4};
  c.train.per_step_samples = 2;
  c.train.accumulation_steps = 1;
  c.train.total_iterations = 20;
  c.train.base_lr = 1e-3;
  c.train.min_lr = 1e-5;
  c.train.seed = 11;
  return c;
}

std::vector<CanonicalVolume> tiny_corpus(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0.0f, 1.0f);
  std::vector<CanonicalVolume> out;
  for (std::size_t i = 0; i < n; ++i) {
    CanonicalVolume c;
    c.voxels = Volume({16, 16, 16}, 0.0f);
    for (auto& v : c.voxels.voxels()) v = g(rng);
    c.source_id = "v" + std::to_string(i);
    out.push_back(std::move(c));
  }
  return out;
}

double max_param_diff(train::SslModel& a, train::SslModel& b) {
  const auto pa = a.params(), pb = b.params();
  double m = 0.0;
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t j = 0; j < pa[i].tensor->numel(); ++j)
      m = std::max(m, std::abs(pa[i].tensor->at(j) - pb[i].tensor->at(j)));
  return m;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("volssl_trainer_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("ema_update endpoints and arithmetic") {
  auto make = [](double v) { return Tensor::from({1}, {v}); };
  Tensor t = make(1.0), s = make(0.0);
  nn::ParamRefs tr{{"w", &t}}, sr{{"w", &s}};
  train::ema_update(tr, sr, 0.996);
  CHECK(t.at(0) == 0.996);
  train::ema_update(tr, sr, 1.0);
  CHECK(t.at(0) == 0.996);
  train::ema_update(tr, sr, 0.0);
  CHECK(t.at(0) == 0.0);

  Tensor wide = Tensor::zeros({2});
  nn::ParamRefs wr{{"w", &wide}};
  CHECK_THROWS_AS(train::ema_update(wr, sr, 0.5), ConfigError);
  CHECK_THROWS_AS(train::ema_update(tr, sr, 1.5), ConfigError);
}

TEST_CASE("ema_update is independent of parameter order") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  std::vector<Tensor> t1, t2, s;
  for (int i = 0; i < 4; ++i) {
    std::vector<double> a(5), b(5);
    for (auto& v : a) v = n(rng);
    for (auto& v : b) v = n(rng);
    t1.push_back(Tensor::from({5}, a));
    t2.push_back(Tensor::from({5}, a));
    s.push_back(Tensor::from({5}, b));
  }
  nn::ParamRefs fwd_t, fwd_s, rev_t, rev_s;
  for (int i = 0; i < 4; ++i) {
    fwd_t.push_back({"p", &t1[i]});
    fwd_s.push_back({"p", &s[i]});
    rev_t.push_back({"p", &t2[3 - i]});
    rev_s.push_back({"p", &s[3 - i]});
  }
  train::ema_update(fwd_t, fwd_s, 0.9);
  train::ema_update(rev_t, rev_s, 0.9);
  for (int i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) CHECK(t1[i].at(j) == t2[i].at(j));
}

TEST_CASE("schedules: warmup, cosine endpoints, momentum and decay") {
  train::TrainConfig c;
  c.total_iterations = 100;
  c.base_lr = 1e-3;
  c.min_lr = 1e-6;
  CHECK(train::learning_rate(c, 0) == doctest::Approx(1e-4));
  CHECK(train::learning_rate(c, 9) == doctest::Approx(1e-3));
  CHECK(train::learning_rate(c, 10) == doctest::Approx(1e-3));
  CHECK(train::learning_rate(c, 99) == doctest::Approx(1e-6));
  for (std::size_t s = 11; s < 100; ++s) CHECK(train::learning_rate(c, s) <= train::learning_rate(c, s - 1));
  CHECK(train::teacher_momentum(c, 0) == doctest::Approx(0.992));
  CHECK(train::teacher_momentum(c, 99) == doctest::Approx(1.0));
  CHECK(train::weight_decay(c, 0) == doctest::Approx(0.04));
  CHECK(train::weight_decay(c, 99) == doctest::Approx(0.4));
  CHECK(train::cosine_between(2.0, 0.0, 50, 101) == doctest::Approx(1.0));
}

TEST_CASE("effective batch law and config validation") {
  train::TrainConfig c;
  CHECK(c.effective_batch() == 256);
  c.accumulation_steps = 3;
  c.per_step_samples = 5;
  CHECK(c.effective_batch() == 15);
  c.koleo_group = 0;
  CHECK(c.resolved_koleo_group() == 5);
  c.world_size = 8;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.world_size = 1;
  c.koleo_group = 2;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  auto s = tiny_ssl();
  CHECK_NOTHROW(s.validate());
  s.augment.patch_size = 2;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  CHECK_NOTHROW(train::SslConfig::toy().validate());
}

TEST_CASE("train_step: accumulation_steps=1 updates every micro-step, k=3 every third") {
  auto corpus = tiny_corpus(4, 1);
  auto cfg = tiny_ssl();
  auto st = train::SslState::init(cfg);
  for (int i = 0; i < 2; ++i) {
    const auto rep = train::train_step(st, train::make_micro_batch(corpus, cfg, st.micro_total));
    CHECK(rep.applied);
    CHECK(std::isfinite(rep.loss));
  }
  CHECK(st.step == 2);

  cfg.train.accumulation_steps = 3;
  auto acc = train::SslState::init(cfg);
  std::vector<bool> applied;
  for (int i = 0; i < 6; ++i) applied.push_back(train::train_step(acc, train::make_micro_batch(corpus, cfg, acc.micro_total)).applied);
  CHECK(applied == std::vector<bool>{false, false, true, false, false, true});
  CHECK(acc.step == 2);
  CHECK(acc.micro_total == 6);
}

TEST_CASE("train_step: teacher never receives gradients") {
  auto corpus = tiny_corpus(2, 2);
  auto cfg = tiny_ssl();
  cfg.train.momentum_start = cfg.train.momentum_end = 1.0;
  auto st = train::SslState::init(cfg);
  const auto before = nn::checksum(st.teacher.params());
  train::train_step(st, train::make_micro_batch(corpus, cfg, 0));
  for (const auto& p : st.teacher.params()) {
    CHECK_FALSE(p.tensor->requires_grad());
    CHECK_FALSE(p.tensor->has_grad());
  }
  CHECK(nn::checksum(st.teacher.params()) == before);
  CHECK(nn::checksum(st.student.params()) != before);
}

TEST_CASE("train_step: center becomes the EMA of teacher batch means") {
  auto corpus = tiny_corpus(2, 4);
  auto cfg = tiny_ssl();
  auto st = train::SslState::init(cfg);
  const auto mb = train::make_micro_batch(corpus, cfg, 0);

  // Reproduce the teacher class logits for the batch (view-major).
  std::vector<Volume> globals;
  for (std::size_t v = 0; v < 2; ++v)
    for (const auto& vb : mb) globals.push_back(vb.global_views[v]);
  std::vector<double> mean(cfg.cls_head.n_prototypes, 0.0);
  {
    ag::NoGradGuard ng;
    const auto out = vit::encode_batch(st.teacher.backbone, globals);
    for (const auto& o : out) {
      const auto logits = st.teacher.cls_head.forward(o.class_token).logits;
      for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += logits.at(k) / static_cast<double>(out.size());
    }
  }
  train::train_step(st, mb);
  for (std::size_t k = 0; k < mean.size(); ++k) CHECK(st.center_cls.center[k] == doctest::Approx(0.1 * mean[k]).epsilon(1e-12));
}

TEST_CASE("train_step: k-step accumulation equals one k-fold batch step") {
  simd::IsaScope scalar(simd::Isa::scalar);
  auto corpus = tiny_corpus(6, 5);
  const std::size_t k = 3, B = 2;
  auto base = tiny_ssl();
  base.train.koleo_group = B;
  base.train.per_step_samples = B * k;
  std::vector<aug::ViewBatch> all;
  for (std::size_t i = 0; i < B * k; ++i) all.push_back(aug::sample_views(corpus[i], base.augment, 100 + i));

  auto big_cfg = base;
  big_cfg.train.accumulation_steps = 1;
  auto big = train::SslState::init(big_cfg);
  CHECK(train::train_step(big, all).applied);

  auto acc_cfg = base;
  acc_cfg.train.per_step_samples = B;
  acc_cfg.train.accumulation_steps = k;
  auto acc = train::SslState::init(acc_cfg);
  for (std::size_t m = 0; m < k; ++m) {
    std::vector<aug::ViewBatch> part(all.begin() + m * B, all.begin() + (m + 1) * B);
    CHECK(train::train_step(acc, part).applied == (m + 1 == k));
  }
  CHECK(max_param_diff(big.student, acc.student) < 1e-6);
  CHECK(max_param_diff(big.teacher, acc.teacher) < 1e-6);
  for (std::size_t i = 0; i < big.center_cls.center.size(); ++i) {
    CHECK(std::abs(big.center_cls.center[i] - acc.center_cls.center[i]) < 1e-9);
    CHECK(std::abs(big.center_patch.center[i] - acc.center_patch.center[i]) < 1e-9);
  }
}

TEST_CASE("train_step: non-finite loss is skipped with a diagnostic") {
  auto corpus = tiny_corpus(2, 6);
  auto cfg = tiny_ssl();
  auto st = train::SslState::init(cfg);
  st.student.backbone.patch_embed.w.values()[0] = NAN;
  const auto rep = train::train_step(st, train::make_micro_batch(corpus, cfg, 0));
  CHECK(rep.skipped);
  CHECK_FALSE(rep.applied);
  CHECK(rep.diagnostic.find("non-finite") != std::string::npos);
  CHECK(st.step == 0);
  for (const auto& g : st.grad_accum)
    for (double v : g) CHECK(v == 0.0);
}

TEST_CASE("train_step rejects malformed micro-batches") {
  auto corpus = tiny_corpus(2, 7);
  auto cfg = tiny_ssl();
  auto st = train::SslState::init(cfg);
  CHECK_THROWS_AS(train::train_step(st, {}), DataError);
  auto mb = train::make_micro_batch(corpus, cfg, 0);
  mb.resize(1);
  CHECK_THROWS_AS(train::train_step(st, mb), ConfigError);  // 1 row cannot form a KoLeo pair
  mb = train::make_micro_batch(corpus, cfg, 0);
  mb[0].local_views.pop_back();
  CHECK_THROWS_AS(train::train_step(st, mb), DataError);
}

TEST_CASE("data order: epoch permutations and thread-independent prefetch") {
  const std::size_t N = 7, B = 3;
  std::vector<std::size_t> seen;
  for (std::uint64_t m = 0; m < 7; ++m) {
    const auto idx = train::micro_batch_indices(5, m, B, N);
    seen.insert(seen.end(), idx.begin(), idx.end());
  }
  for (std::size_t e = 0; e < 3; ++e) {
    std::set<std::size_t> epoch(seen.begin() + e * N, seen.begin() + (e + 1) * N);
    CHECK(epoch.size() == N);
  }
  CHECK(train::micro_batch_indices(5, 4, B, N) == train::micro_batch_indices(5, 4, B, N));
  CHECK_THROWS_AS(train::micro_batch_indices(5, 0, B, 0), DataError);

  auto corpus = tiny_corpus(5, 8);
  auto cfg = tiny_ssl();
  cfg.train.loader_threads = 3;
  cfg.train.queue_capacity = 2;
  train::ViewPrefetcher pf(corpus, cfg, 4, 6);
  for (std::uint64_t m = 4; m < 10; ++m) {
    auto got = pf.next();
    REQUIRE(got.has_value());
    const auto want = train::make_micro_batch(corpus, cfg, m);
    for (std::size_t s = 0; s < want.size(); ++s) {
      CHECK((*got)[s].rng_seed == want[s].rng_seed);
      CHECK((*got)[s].global_views[0].voxels() == want[s].global_views[0].voxels());
    }
  }
  CHECK_FALSE(pf.next().has_value());
}

TEST_CASE("two runs with the same seeds are bitwise identical after 10 steps") {
  simd::IsaScope scalar(simd::Isa::scalar);
  auto corpus = tiny_corpus(5, 9);
  const auto cfg = tiny_ssl();
  train::PretrainOptions opts;
  opts.steps = 10;
  const auto a = train::pretrain(train::SslState::init(cfg), corpus, opts);
  const auto b = train::pretrain(train::SslState::init(cfg), corpus, opts);
  CHECK(a.step == 10);
  CHECK(train::serialize(a) == train::serialize(b));
}

TEST_CASE("checkpoint: save-load-save bytes, mismatch and corruption") {
  auto corpus = tiny_corpus(3, 10);
  auto cfg = tiny_ssl();
  cfg.train.accumulation_steps = 2;
  auto st = train::SslState::init(cfg);
  for (int i = 0; i < 3; ++i) train::train_step(st, train::make_micro_batch(corpus, cfg, st.micro_total));
  REQUIRE(st.micro_step == 1);

  const auto dir = temp_dir("ckpt");
  const auto path = dir / "a.bin";
  train::save_checkpoint(st, path);
  const auto loaded = train::load_checkpoint(path);
  CHECK(train::serialize(loaded) == read_binary(path));
  CHECK(loaded.micro_step == 1);
  CHECK(loaded.step == st.step);

  auto other = cfg;
  other.backbone.embed_dim = 24;
  other.cls_head.in_dim = other.patch_head.in_dim = 24;
  try {
    train::load_checkpoint(path, &other);
    FAIL("mismatched embed_dim accepted");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("embed_dim") != std::string::npos);
  }

  std::string bytes = read_binary(path);
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x20;
  CHECK_THROWS_AS(train::deserialize(flipped), DataError);
  CHECK_THROWS_AS(train::deserialize(bytes.substr(0, bytes.size() - 9)), DataError);
  CHECK_THROWS_AS(train::deserialize("not a checkpoint"), DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint: resume at step s then k steps equals s+k uninterrupted") {
  auto corpus = tiny_corpus(5, 11);
  const auto cfg = tiny_ssl();
  const auto dir = temp_dir("resume");

  train::PretrainOptions full;
  full.steps = 6;
  const auto straight = train::pretrain(train::SslState::init(cfg), corpus, full);

  train::PretrainOptions first;
  first.steps = 3;
  first.out_dir = dir;
  train::pretrain(train::SslState::init(cfg), corpus, first);
  auto resumed = train::load_checkpoint(dir / "checkpoint.bin", &cfg);
  CHECK(resumed.step == 3);
  train::PretrainOptions rest;
  rest.steps = 3;
  resumed = train::pretrain(std::move(resumed), corpus, rest);
  CHECK(train::serialize(resumed) == train::serialize(straight));
  CHECK(std::filesystem::exists(dir / "metrics.jsonl"));

  const auto frozen = train::load_frozen_backbone(dir / "checkpoint.bin");
  auto ckpt = train::load_checkpoint(dir / "checkpoint.bin");
  CHECK(frozen.fingerprint == train::backbone_fingerprint(ckpt.teacher.backbone));
  CHECK(frozen.fingerprint.size() == 16);
  std::filesystem::remove_all(dir);
}

TEST_CASE("clone does not share parameter storage") {
  auto st = train::SslState::init(tiny_ssl());
  auto c = train::clone(st);
  c.student.backbone.cls_token.values()[0] += 1.0;
  CHECK(st.student.backbone.cls_token.at(0) != c.student.backbone.cls_token.at(0));
}

TEST_CASE("run config: JSON round-trip, defaults and strict keys") {
  const auto toy = config::toy();
  const auto j = config::to_json(toy);
  const auto back = config::from_json(j);
  CHECK(config::to_json(back) == j);
  CHECK(back.ssl.backbone == toy.ssl.backbone);
  CHECK(back.probe == toy.probe);

  const auto defaults = config::from_json(config::Json::object());
  CHECK(defaults.ssl.backbone.embed_dim == 864);
  CHECK(defaults.ssl.train.effective_batch() == 256);
  CHECK(defaults.embed.mode == config::EmbedMode::full3d);

  auto bad = j;
  bad["backbone"]["embed_dimm"] = 8;
  try {
    config::from_json(bad);
    FAIL("unknown key accepted");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("backbone.embed_dimm") != std::string::npos);
  }
  bad = j;
  bad["trainer"]["per_step_samples"] = -1;
  CHECK_THROWS_AS(config::from_json(bad), ConfigError);
  bad = j;
  bad["embed"]["mode"] = "slices";
  CHECK_THROWS_AS(config::from_json(bad), ConfigError);
  bad = j;
  bad["trainer"]["world_size"] = 2;
  CHECK_THROWS_AS(config::from_json(bad), ConfigError);
  bad = j;
  bad["augment"]["global_target"] = {56, 56};
  CHECK_THROWS_AS(config::from_json(bad), ConfigError);
  CHECK_THROWS_AS(config::from_json(config::Json::array()), ConfigError);

  const auto dir = temp_dir("cfg");
  config::save(toy, dir / "run.json");
  CHECK(config::to_json(config::load(dir / "run.json")) == j);
  CHECK_THROWS_AS(config::load(dir / "missing.json"), ConfigError);
  std::filesystem::remove_all(dir);
}
