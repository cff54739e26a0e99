#include "volssl/backbone.hpp"

#include <cmath>
#include <string>

#include "volssl/errors.hpp"

namespace volssl::vit {

void BackboneConfig::validate() const {
  if (patch_size == 0 || embed_dim == 0 || n_blocks == 0 || n_heads == 0 || mlp_ratio == 0) {
    throw ConfigError("backbone sizes must be positive");
  }
  if (embed_dim % n_heads) throw ConfigError("backbone.embed_dim must be divisible by n_heads");
  if (head_dim() % 6) throw ConfigError("backbone head dim must be divisible by 6 for 3-axis rotary pairs");
  if (!(rope_base > 1.0)) throw ConfigError("backbone.rope_base must exceed 1");
  if (!(norm_eps > 0.0)) throw ConfigError("backbone.norm_eps must be positive");
}

BackboneConfig BackboneConfig::toy() {
  BackboneConfig c;
  c.embed_dim = 96;
  c.n_blocks = 4;
  c.n_heads = 4;
  return c;
}

Dims patch_grid(const Dims& view, std::size_t p) {
  if (p == 0) throw ConfigError("patch size must be positive");
  const std::array<std::size_t, 3> s{view.d, view.h, view.w};
  bool ok = true;
  for (std::size_t v : s) ok = ok && v >= p && v % p == 0;
  if (ok) return {view.d / p, view.h / p, view.w / p};
  std::string lower, upper;
  for (int a = 0; a < 3; ++a) {
    const std::size_t lo = std::max<std::size_t>(p, s[a] / p * p);
    const std::size_t hi = (s[a] + p - 1) / p * p;
    lower += (a ? "x" : "") + std::to_string(lo);
    upper += (a ? "x" : "") + std::to_string(std::max(hi, p));
  }
  throw DataError("view " + std::to_string(view.d) + "x" + std::to_string(view.h) + "x" + std::to_string(view.w) +
                  " is not divisible by patch size " + std::to_string(p) + "; nearest valid shapes are " + lower +
                  " and " + upper);
}

std::vector<std::array<double, 3>> patch_centers(const Dims& g) {
  std::vector<std::array<double, 3>> c;
  c.reserve(g.count());
  for (std::size_t z = 0; z < g.d; ++z)
    for (std::size_t y = 0; y < g.h; ++y)
      for (std::size_t x = 0; x < g.w; ++x)
        c.push_back({(z + 0.5) / static_cast<double>(g.d), (y + 0.5) / static_cast<double>(g.h),
                     (x + 0.5) / static_cast<double>(g.w)});
  return c;
}

Tensor patchify(const Volume& view, std::size_t p) {
  const Dims g = patch_grid(view.dims(), p);
  const std::size_t pv = p * p * p;
  std::vector<double> out(g.count() * pv);
  std::size_t t = 0;
  for (std::size_t gz = 0; gz < g.d; ++gz)
    for (std::size_t gy = 0; gy < g.h; ++gy)
      for (std::size_t gx = 0; gx < g.w; ++gx, ++t) {
        double* dst = &out[t * pv];
        for (std::size_t z = 0; z < p; ++z)
          for (std::size_t y = 0; y < p; ++y) {
            const float* src = &view.voxels()[view.index(gz * p + z, gy * p + y, gx * p)];
            for (std::size_t x = 0; x < p; ++x) *dst++ = src[x];
          }
      }
  return Tensor::from({g.count(), pv}, std::move(out));
}

std::vector<double> rope_frequencies(std::size_t head_dim, double base) {
  const std::size_t per_axis = head_dim / 6;
  std::vector<double> f(per_axis);
  for (std::size_t j = 0; j < per_axis; ++j)
    f[j] = std::pow(base, -static_cast<double>(j) / static_cast<double>(per_axis));
  return f;
}

std::vector<double> rope_angles(const std::array<double, 3>& position, std::size_t head_dim, double base) {
  const auto f = rope_frequencies(head_dim, base);
  std::vector<double> a;
  a.reserve(3 * f.size());
  for (int axis = 0; axis < 3; ++axis)
    for (double theta : f) a.push_back(theta * position[axis]);
  return a;
}

namespace {

ops::RotaryTable make_table(std::span<const std::array<double, 3>> positions, std::span<const std::uint8_t> active,
                            std::size_t head_dim, double base) {
  ops::RotaryTable t;
  t.rows = positions.size();
  t.pairs = head_dim / 2;
  t.cos.resize(t.rows * t.pairs);
  t.sin.resize(t.rows * t.pairs);
  t.active.assign(active.begin(), active.end());
  for (std::size_t r = 0; r < t.rows; ++r) {
    if (!t.active[r]) continue;
    const auto ang = rope_angles(positions[r], head_dim, base);
    for (std::size_t i = 0; i < t.pairs; ++i) {
      t.cos[r * t.pairs + i] = std::cos(ang[i]);
      t.sin[r * t.pairs + i] = std::sin(ang[i]);
    }
  }
  return t;
}

}  // namespace

Tensor rope_rotate(const Tensor& x, std::span<const std::array<double, 3>> positions, std::size_t n_heads,
                   double base) {
  if (x.rank() != 2 || x.dim(1) % n_heads) throw ConfigError("rope_rotate: bad input shape");
  const std::size_t dh = x.dim(1) / n_heads;
  if (dh % 6) throw ConfigError("rope_rotate: head dim must be divisible by 6");
  std::vector<std::uint8_t> active(positions.size(), 1);
  return ops::rotary(x, n_heads, make_table(positions, active, dh, base));
}

void Block::collect(nn::ParamRefs& out, const std::string& prefix) {
  ln1.collect(out, prefix + "norm1.");
  q.collect(out, prefix + "attn.q.");
  k.collect(out, prefix + "attn.k.");
  v.collect(out, prefix + "attn.v.");
  proj.collect(out, prefix + "attn.proj.");
  ln2.collect(out, prefix + "norm2.");
  fc1.collect(out, prefix + "mlp.fc1.");
  fc2.collect(out, prefix + "mlp.fc2.");
}

Backbone Backbone::init(const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  Backbone b;
  b.cfg = cfg;
  const std::size_t d = cfg.embed_dim;
  b.patch_embed = nn::Linear(cfg.patch_voxels(), d, rng);
  b.cls_token = nn::trunc_normal({1, d}, 0.02, rng);
  b.registers = nn::trunc_normal({cfg.n_registers, d}, 0.02, rng);
  b.mask_token = nn::trunc_normal({1, d}, 0.02, rng);
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
    Block blk;
    blk.ln1 = nn::LayerNorm(d, cfg.norm_eps);
    blk.q = nn::Linear(d, d, rng);
    blk.k = nn::Linear(d, d, rng);
    blk.v = nn::Linear(d, d, rng);
    blk.proj = nn::Linear(d, d, rng);
    blk.ln2 = nn::LayerNorm(d, cfg.norm_eps);
    blk.fc1 = nn::Linear(d, d * cfg.mlp_ratio, rng);
    blk.fc2 = nn::Linear(d * cfg.mlp_ratio, d, rng);
    b.blocks.push_back(std::move(blk));
  }
  b.norm = nn::LayerNorm(d, cfg.norm_eps);
  return b;
}

void Backbone::collect(nn::ParamRefs& out, const std::string& prefix) {
  patch_embed.collect(out, prefix + "patch_embed.");
  out.push_back({prefix + "cls_token", &cls_token});
  if (registers.defined() && registers.numel() > 0) out.push_back({prefix + "registers", &registers});
  out.push_back({prefix + "mask_token", &mask_token});
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(out, prefix + "blocks." + std::to_string(i) + ".");
  norm.collect(out, prefix + "norm.");
}

namespace {

struct Embedded {
  Tensor seq;  // [S*L, dim]
  Dims grid;
  std::size_t n_seq = 0, seq_len = 0;
};

Embedded embed_views(const Backbone& net, std::span<const Volume> views,
                     std::span<const aug::MaskPattern* const> masks) {
  if (views.empty()) throw DataError("encode: no views");
  if (!masks.empty() && masks.size() != views.size()) throw DataError("encode: one mask slot per view required");
  const BackboneConfig& cfg = net.cfg;
  Embedded e;
  e.grid = patch_grid(views[0].dims(), cfg.patch_size);
  const std::size_t n = e.grid.count(), pv = cfg.patch_voxels(), R = cfg.n_registers;
  e.n_seq = views.size();
  e.seq_len = 1 + R + n;

  std::vector<double> raw(e.n_seq * n * pv);
  std::vector<std::uint8_t> mask(e.n_seq * n, 0);
  bool any_mask = false;
  for (std::size_t s = 0; s < e.n_seq; ++s) {
    if (views[s].dims() != views[0].dims()) throw DataError("encode: views in a batch must share one shape");
    const Tensor p = patchify(views[s], cfg.patch_size);
    std::copy(p.values().begin(), p.values().end(), raw.begin() + s * n * pv);
    if (!masks.empty() && masks[s]) {
      if (masks[s]->size() != n) {
        throw DataError("encode: mask length " + std::to_string(masks[s]->size()) + " does not match " +
                        std::to_string(n) + " patch tokens");
      }
      for (std::size_t i = 0; i < n; ++i) mask[s * n + i] = masks[s]->masked[i];
      any_mask = any_mask || masks[s]->count() > 0;
    }
  }
  Tensor tokens = net.patch_embed(Tensor::from({e.n_seq * n, pv}, std::move(raw)));
  if (any_mask) tokens = ops::replace_rows(tokens, mask, net.mask_token);

  std::vector<Tensor> parts;
  parts.reserve(3 * e.n_seq);
  for (std::size_t s = 0; s < e.n_seq; ++s) {
    parts.push_back(net.cls_token);
    if (R) parts.push_back(net.registers);
    parts.push_back(ops::slice_rows(tokens, s * n, (s + 1) * n));
  }
  e.seq = ops::concat_rows(parts);
  return e;
}

Tensor run_blocks(const Backbone& net, Tensor x, const Embedded& e) {
  const BackboneConfig& cfg = net.cfg;
  const std::size_t R = cfg.n_registers;
  std::vector<std::array<double, 3>> pos(e.n_seq * e.seq_len);
  std::vector<std::uint8_t> active(pos.size(), 0);
  for (std::size_t s = 0; s < e.n_seq; ++s) {
    std::size_t t = 0;
    for (std::size_t z = 0; z < e.grid.d; ++z)
      for (std::size_t y = 0; y < e.grid.h; ++y)
        for (std::size_t xx = 0; xx < e.grid.w; ++xx, ++t) {
          const std::size_t r = s * e.seq_len + 1 + R + t;
          pos[r] = {static_cast<double>(z), static_cast<double>(y), static_cast<double>(xx)};
          active[r] = 1;
        }
  }
  const ops::RotaryTable table = make_table(pos, active, cfg.head_dim(), cfg.rope_base);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
  for (const Block& b : net.blocks) {
    const Tensor h = b.ln1(x);
    const Tensor q = ops::rotary(b.q(h), cfg.n_heads, table);
    const Tensor k = ops::rotary(b.k(h), cfg.n_heads, table);
    const Tensor a = ops::attention(q, k, b.v(h), e.n_seq, e.seq_len, e.seq_len, cfg.n_heads, scale);
    x = ops::add(x, b.proj(a));
    x = ops::add(x, b.fc2(ops::gelu(b.fc1(b.ln2(x)))));
  }
  return net.norm(x);
}

}  // namespace

Tensor embed_sequence(const Backbone& net, const Volume& view, const aug::MaskPattern* mask) {
  const aug::MaskPattern* m[1] = {mask};
  return embed_views(net, std::span<const Volume>(&view, 1), std::span<const aug::MaskPattern* const>(m, 1)).seq;
}

std::vector<EncoderOutput> encode_batch(const Backbone& net, std::span<const Volume> views,
                                        std::span<const aug::MaskPattern* const> masks) {
  const Embedded e = embed_views(net, views, masks);
  const Tensor out = run_blocks(net, e.seq, e);
  const std::size_t R = net.cfg.n_registers, n = e.grid.count();
  const auto centers = patch_centers(e.grid);
  std::vector<EncoderOutput> res(e.n_seq);
  for (std::size_t s = 0; s < e.n_seq; ++s) {
    const std::size_t base = s * e.seq_len;
    EncoderOutput& o = res[s];
    o.sequence_length = e.seq_len;
    o.class_token = ops::slice_rows(out, base, base + 1);
    o.registers = ops::slice_rows(out, base + 1, base + 1 + R);
    o.patches.tokens = ops::slice_rows(out, base + 1 + R, base + 1 + R + n);
    o.patches.grid = e.grid;
    o.patches.centers = centers;
  }
  return res;
}

EncoderOutput encode(const Backbone& net, const Volume& view) {
  return std::move(encode_batch(net, std::span<const Volume>(&view, 1))[0]);
}

EncoderOutput encode_masked(const Backbone& net, const Volume& view, const aug::MaskPattern& mask) {
  const aug::MaskPattern* m[1] = {&mask};
  return std::move(
      encode_batch(net, std::span<const Volume>(&view, 1), std::span<const aug::MaskPattern* const>(m, 1))[0]);
}

}  // namespace volssl::vit
