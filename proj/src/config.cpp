#include "volssl/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "volssl/errors.hpp"
#include "volssl/volume.hpp"

namespace volssl::config {

namespace {

// Reads one JSON object, remembering which keys were consumed.
class Block {
 public:
  Block(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  void num(const char* key, double& out) {
    if (const Json* v = take(key)) {
      if (!v->is_number()) fail(key, "a number");
      out = v->get<double>();
    }
  }
  void uint(const char* key, std::size_t& out) {
    if (const Json* v = take(key)) {
      if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<long long>() >= 0)) {
        fail(key, "a non-negative integer");
      }
      out = v->get<std::size_t>();
    }
  }
  void u64(const char* key, std::uint64_t& out) {
    std::size_t v = out;
    uint(key, v);
    out = v;
  }
  void boolean(const char* key, bool& out) {
    if (const Json* v = take(key)) {
      if (!v->is_boolean()) fail(key, "a boolean");
      out = v->get<bool>();
    }
  }
  void str(const char* key, std::string& out) {
    if (const Json* v = take(key)) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }
  void dims(const char* key, Dims& out) {
    if (const Json* v = take(key)) {
      if (!v->is_array() || v->size() != 3) fail(key, "[D, H, W]");
      for (const auto& e : *v)
        if (!e.is_number_unsigned()) fail(key, "[D, H, W] of non-negative integers");
      out = {(*v)[0].get<std::size_t>(), (*v)[1].get<std::size_t>(), (*v)[2].get<std::size_t>()};
    }
  }
  void range(const char* key, aug::Range& out) {
    if (const Json* v = take(key)) {
      if (!v->is_array() || v->size() != 2 || !(*v)[0].is_number() || !(*v)[1].is_number()) fail(key, "[lo, hi]");
      out = {(*v)[0].get<double>(), (*v)[1].get<double>()};
    }
  }
  Block sub(const char* key) {
    static const Json empty = Json::object();
    const Json* v = take(key);
    return Block(v ? *v : empty, path_.empty() ? key : path_ + "." + key);
  }
  void finish() const {
    for (const auto& item : j_.items()) {
      if (!used_.count(item.key())) {
        throw ConfigError("unknown config key '" + (path_.empty() ? "" : path_ + ".") + item.key() + "'");
      }
    }
  }

 private:
  const Json* take(const char* key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  [[noreturn]] void fail(const char* key, const char* what) const {
    throw ConfigError("config key '" + (path_.empty() ? "" : path_ + ".") + key + "' must be " + what);
  }

  const Json& j_;
  std::string path_;
  std::set<std::string> used_;
};

Json dims_json(const Dims& d) { return Json::array({d.d, d.h, d.w}); }
Json range_json(const aug::Range& r) { return Json::array({r.lo, r.hi}); }

Json augment_json(const aug::AugmentConfig& a) {
  return {{"global_target", dims_json(a.global_target)},
          {"local_target", dims_json(a.local_target)},
          {"patch_size", a.patch_size},
          {"global_scale", range_json(a.global_scale)},
          {"local_scale", range_json(a.local_scale)},
          {"aspect", range_json(a.aspect)},
          {"flip_prob", a.flip_prob},
          {"window_prob", a.window_prob},
          {"window_shift_iqr", a.window_shift_iqr},
          {"window_slope_jitter", a.window_slope_jitter},
          {"slice_perm_prob", a.slice_perm_prob},
          {"mask_ratio", a.mask_ratio},
          {"min_source_side", a.min_source_side}};
}

void read_augment(Block b, aug::AugmentConfig& a) {
  b.dims("global_target", a.global_target);
  b.dims("local_target", a.local_target);
  b.uint("patch_size", a.patch_size);
  b.range("global_scale", a.global_scale);
  b.range("local_scale", a.local_scale);
  b.range("aspect", a.aspect);
  b.num("flip_prob", a.flip_prob);
  b.num("window_prob", a.window_prob);
  b.num("window_shift_iqr", a.window_shift_iqr);
  b.num("window_slope_jitter", a.window_slope_jitter);
  b.num("slice_perm_prob", a.slice_perm_prob);
  b.num("mask_ratio", a.mask_ratio);
  b.uint("min_source_side", a.min_source_side);
  b.finish();
}

Json backbone_json(const vit::BackboneConfig& c) {
  return {{"patch_size", c.patch_size}, {"embed_dim", c.embed_dim}, {"n_blocks", c.n_blocks},
          {"n_heads", c.n_heads},       {"mlp_ratio", c.mlp_ratio}, {"n_registers", c.n_registers},
          {"rope_base", c.rope_base},   {"norm_eps", c.norm_eps}};
}

void read_backbone(Block b, vit::BackboneConfig& c) {
  b.uint("patch_size", c.patch_size);
  b.uint("embed_dim", c.embed_dim);
  b.uint("n_blocks", c.n_blocks);
  b.uint("n_heads", c.n_heads);
  b.uint("mlp_ratio", c.mlp_ratio);
  b.uint("n_registers", c.n_registers);
  b.num("rope_base", c.rope_base);
  b.num("norm_eps", c.norm_eps);
  b.finish();
}

Json objectives_json(const train::SslConfig& c) {
  return {{"head_hidden", c.cls_head.hidden},
          {"head_bottleneck", c.cls_head.bottleneck},
          {"n_prototypes", c.cls_head.n_prototypes},
          {"teacher_temp", c.temps.teacher},
          {"student_temp", c.temps.student},
          {"center_momentum", c.center_momentum},
          {"w_dino", c.weights.dino},
          {"w_ibot", c.weights.ibot},
          {"w_koleo", c.weights.koleo},
          {"koleo_eps", c.koleo_eps}};
}

void read_objectives(Block b, train::SslConfig& c) {
  b.uint("head_hidden", c.cls_head.hidden);
  b.uint("head_bottleneck", c.cls_head.bottleneck);
  b.uint("n_prototypes", c.cls_head.n_prototypes);
  b.num("teacher_temp", c.temps.teacher);
  b.num("student_temp", c.temps.student);
  b.num("center_momentum", c.center_momentum);
  b.num("w_dino", c.weights.dino);
  b.num("w_ibot", c.weights.ibot);
  b.num("w_koleo", c.weights.koleo);
  b.num("koleo_eps", c.koleo_eps);
  b.finish();
}

Json trainer_json(const train::TrainConfig& t) {
  return {{"per_step_samples", t.per_step_samples},
          {"accumulation_steps", t.accumulation_steps},
          {"world_size", t.world_size},
          {"total_iterations", t.total_iterations},
          {"base_lr", t.base_lr},
          {"min_lr", t.min_lr},
          {"warmup_fraction", t.warmup_fraction},
          {"weight_decay_start", t.weight_decay_start},
          {"weight_decay_end", t.weight_decay_end},
          {"momentum_start", t.momentum_start},
          {"momentum_end", t.momentum_end},
          {"grad_clip", t.grad_clip},
          {"koleo_group", t.koleo_group},
          {"checkpoint_every", t.checkpoint_every},
          {"loader_threads", t.loader_threads},
          {"queue_capacity", t.queue_capacity},
          {"seed", t.seed}};
}

void read_trainer(Block b, train::TrainConfig& t) {
  b.uint("per_step_samples", t.per_step_samples);
  b.uint("accumulation_steps", t.accumulation_steps);
  b.uint("world_size", t.world_size);
  b.uint("total_iterations", t.total_iterations);
  b.num("base_lr", t.base_lr);
  b.num("min_lr", t.min_lr);
  b.num("warmup_fraction", t.warmup_fraction);
  b.num("weight_decay_start", t.weight_decay_start);
  b.num("weight_decay_end", t.weight_decay_end);
  b.num("momentum_start", t.momentum_start);
  b.num("momentum_end", t.momentum_end);
  b.num("grad_clip", t.grad_clip);
  b.uint("koleo_group", t.koleo_group);
  b.uint("checkpoint_every", t.checkpoint_every);
  b.uint("loader_threads", t.loader_threads);
  b.uint("queue_capacity", t.queue_capacity);
  b.u64("seed", t.seed);
  b.finish();
}

void sync_heads(train::SslConfig& c) {
  c.cls_head.in_dim = c.backbone.embed_dim;
  c.patch_head = c.cls_head;
  c.augment.patch_size = c.backbone.patch_size;
}

void read_ssl_blocks(Block& root, train::SslConfig& c) {
  read_augment(root.sub("augment"), c.augment);
  read_backbone(root.sub("backbone"), c.backbone);
  read_objectives(root.sub("ssl"), c);
  read_trainer(root.sub("trainer"), c.train);
  sync_heads(c);
}

}  // namespace

const char* to_string(EmbedMode m) { return m == EmbedMode::full3d ? "full3d" : "chunked"; }

EmbedMode embed_mode_from_string(const std::string& s) {
  if (s == "full3d") return EmbedMode::full3d;
  if (s == "chunked" || s == "chunked2p5d") return EmbedMode::chunked2p5d;
  throw ConfigError("embed mode must be 'full3d' or 'chunked', got '" + s + "'");
}

Json ssl_to_json(const train::SslConfig& c) {
  return {{"augment", augment_json(c.augment)},
          {"backbone", backbone_json(c.backbone)},
          {"ssl", objectives_json(c)},
          {"trainer", trainer_json(c.train)}};
}

train::SslConfig ssl_from_json(const Json& j) {
  train::SslConfig c;
  Block root(j, "");
  read_ssl_blocks(root, c);
  root.finish();
  return c;
}

Json to_json(const RunConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["prep"] = {{"max_side", c.prep.max_side}, {"air_threshold_hu", c.prep.air_threshold_hu}};
  const Json ssl = ssl_to_json(c.ssl);
  for (const auto& item : ssl.items()) j[item.key()] = item.value();
  j["embed"] = {{"mode", to_string(c.embed.mode)}, {"chunk_depth", c.embed.chunk_depth},
                {"max_tokens", c.embed.max_tokens}};
  const ProbeConfig& p = c.probe;
  j["probe"] = {{"epochs", p.epochs},
                {"patience", p.patience},
                {"batch_size", p.batch_size},
                {"lr", p.lr},
                {"weight_decay", p.weight_decay},
                {"hidden", p.hidden},
                {"fraction", p.fraction},
                {"qformer_queries", p.qformer_queries},
                {"qformer_heads", p.qformer_heads},
                {"loc_heads", p.loc_heads},
                {"seg_channels", p.seg_channels},
                {"seg_max_side", p.seg_max_side},
                {"val_fraction", p.val_fraction},
                {"test_fraction", p.test_fraction}};
  j["eval"] = {{"bootstrap", c.eval.bootstrap}, {"max_redraws", c.eval.max_redraws}};
  return j;
}

RunConfig from_json(const Json& j) {
  RunConfig c;
  Block root(j, "");
  root.u64("seed", c.seed);
  {
    Block b = root.sub("prep");
    b.uint("max_side", c.prep.max_side);
    b.num("air_threshold_hu", c.prep.air_threshold_hu);
    b.finish();
  }
  read_ssl_blocks(root, c.ssl);
  {
    Block b = root.sub("embed");
    std::string mode = to_string(c.embed.mode);
    b.str("mode", mode);
    c.embed.mode = embed_mode_from_string(mode);
    b.uint("chunk_depth", c.embed.chunk_depth);
    b.uint("max_tokens", c.embed.max_tokens);
    b.finish();
  }
  {
    Block b = root.sub("probe");
    ProbeConfig& p = c.probe;
    b.uint("epochs", p.epochs);
    b.uint("patience", p.patience);
    b.uint("batch_size", p.batch_size);
    b.num("lr", p.lr);
    b.num("weight_decay", p.weight_decay);
    b.uint("hidden", p.hidden);
    b.num("fraction", p.fraction);
    b.uint("qformer_queries", p.qformer_queries);
    b.uint("qformer_heads", p.qformer_heads);
    b.uint("loc_heads", p.loc_heads);
    b.uint("seg_channels", p.seg_channels);
    b.uint("seg_max_side", p.seg_max_side);
    b.num("val_fraction", p.val_fraction);
    b.num("test_fraction", p.test_fraction);
    b.finish();
  }
  {
    Block b = root.sub("eval");
    b.uint("bootstrap", c.eval.bootstrap);
    b.uint("max_redraws", c.eval.max_redraws);
    b.finish();
  }
  root.finish();
  c.validate();
  return c;
}

void RunConfig::validate() const {
  if (prep.max_side < 2) throw ConfigError("prep.max_side must be at least 2");
  if (prep.air_threshold_hu < prep::kHuMin || prep.air_threshold_hu > prep::kHuMax) {
    throw ConfigError("prep.air_threshold_hu must lie inside [-1000, 1900]");
  }
  ssl.validate();
  if (embed.chunk_depth == 0 || embed.chunk_depth % ssl.backbone.patch_size) {
    throw ConfigError("embed.chunk_depth must be a positive multiple of the patch size");
  }
  if (embed.max_tokens == 0) throw ConfigError("embed.max_tokens must be positive");
  if (!(probe.fraction > 0.0 && probe.fraction <= 1.0)) throw ConfigError("probe.fraction must lie in (0, 1]");
  if (probe.epochs == 0 || probe.batch_size == 0 || probe.hidden == 0) {
    throw ConfigError("probe.epochs, batch_size and hidden must be positive");
  }
  if (!(probe.lr > 0.0) || probe.weight_decay < 0.0) throw ConfigError("probe.lr must be positive");
  if (probe.qformer_queries == 0 || probe.qformer_heads == 0 || probe.loc_heads == 0 || probe.seg_channels == 0 ||
      probe.seg_max_side == 0) {
    throw ConfigError("probe head sizes must be positive");
  }
  if (ssl.backbone.embed_dim % probe.qformer_heads || ssl.backbone.embed_dim % probe.loc_heads) {
    throw ConfigError("probe head counts must divide backbone.embed_dim");
  }
  if (!(probe.val_fraction > 0.0 && probe.test_fraction >= 0.0 && probe.val_fraction + probe.test_fraction < 1.0)) {
    throw ConfigError("probe split fractions must leave room for training data");
  }
  if (eval.bootstrap < 1) throw ConfigError("eval.bootstrap must be at least 1");
}

RunConfig load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

void save(const RunConfig& c, const std::filesystem::path& path) {
  write_binary_atomic(path, to_json(c).dump(2) + "\n");
}

RunConfig toy() {
  RunConfig c;
  c.ssl = train::SslConfig::toy();
  c.prep.max_side = 64;
  c.embed.chunk_depth = 28;
  c.probe.epochs = 60;
  c.probe.hidden = 64;
  c.probe.batch_size = 16;
  c.probe.seg_channels = 16;
  c.eval.bootstrap = 10000;
  return c;
}

}  // namespace volssl::config
