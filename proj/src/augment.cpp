#include "volssl/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "volssl/errors.hpp"
#include "volssl/prep.hpp"

namespace volssl::aug {

namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

bool coin(std::mt19937_64& rng, double p) {
  if (p <= 0.0) return false;
  if (p >= 1.0) return true;
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p;
}

void check_range(const Range& r, double lo, double hi, const char* name) {
  if (!(r.lo >= lo && r.hi <= hi && r.lo <= r.hi)) {
    throw ConfigError(std::string("augment.") + name + " must satisfy " + std::to_string(lo) + " <= lo <= hi <= " +
                      std::to_string(hi));
  }
}

void check_target(const Dims& t, std::size_t patch, const char* name) {
  if (t.count() == 0 || t.d % patch || t.h % patch || t.w % patch) {
    throw ConfigError(std::string("augment.") + name + " must be a non-empty multiple of patch_size " +
                      std::to_string(patch));
  }
}

// Slices along `axis` as (outer, n, inner) strides of a depth-major array.
struct AxisLayout {
  std::size_t outer, n, inner;
};

AxisLayout layout(const Dims& d, int axis) {
  switch (axis) {
    case 0: return {1, d.d, d.h * d.w};
    case 1: return {d.d, d.h, d.w};
    case 2: return {d.d * d.h, d.w, 1};
  }
  throw ConfigError("axis must be 0, 1 or 2");
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finaliser over (seed, stream)
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

AugmentConfig AugmentConfig::identity() {
  AugmentConfig c;
  c.global_scale = {1.0, 1.0};
  c.local_scale = {1.0, 1.0};
  c.aspect = {1.0, 1.0};
  c.flip_prob = 0.0;
  c.window_prob = 0.0;
  c.window_shift_iqr = 0.0;
  c.window_slope_jitter = 0.0;
  c.slice_perm_prob = 0.0;
  return c;
}

void AugmentConfig::validate() const {
  if (patch_size == 0) throw ConfigError("augment.patch_size must be positive");
  check_target(global_target, patch_size, "global_target");
  check_target(local_target, patch_size, "local_target");
  check_range(global_scale, 1e-6, 1.0, "global_scale");
  check_range(local_scale, 1e-6, 1.0, "local_scale");
  if (!(aspect.lo > 0.0 && aspect.lo <= 1.0 && aspect.hi >= 1.0)) {
    throw ConfigError("augment.aspect must satisfy 0 < lo <= 1 <= hi");
  }
  for (double p : {flip_prob, window_prob, slice_perm_prob, mask_ratio}) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("augment probabilities and mask_ratio must lie in [0, 1]");
  }
  if (window_shift_iqr < 0.0 || window_slope_jitter < 0.0 || window_slope_jitter >= 1.0) {
    throw ConfigError("augment window jitter must be non-negative with slope_jitter < 1");
  }
  if (min_source_side < 2) throw ConfigError("augment.min_source_side must be at least 2");
}

std::size_t MaskPattern::count() const { return static_cast<std::size_t>(std::count(masked.begin(), masked.end(), 1)); }

IqrStats iqr_stats(const std::vector<float>& values) {
  if (values.empty()) throw DataError("quartiles of an empty crop");
  std::vector<float> s(values);
  std::sort(s.begin(), s.end());
  auto q = [&](double p) {
    const double pos = p * static_cast<double>(s.size() - 1);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    const std::size_t j = std::min(i + 1, s.size() - 1);
    return s[i] + (pos - static_cast<double>(i)) * (static_cast<double>(s[j]) - s[i]);
  };
  return {q(0.25), q(0.5), q(0.75)};
}

Volume apply_window(const Volume& view, const IqrStats& stats, double slope, double shift, double lo, double hi) {
  if (!(stats.iqr() > 0.0)) return view;
  if (!(slope > 0.0)) throw ConfigError("window slope must be positive");
  Volume out = view;
  for (float& v : out.voxels()) {
    const double r = slope * (static_cast<double>(v) - stats.median) + stats.median + shift;
    v = static_cast<float>(std::clamp(r, lo, hi));
  }
  return out;
}

Volume perturb_hu_window(const Volume& view, const IqrStats& stats, double shift_iqr, double slope_jitter,
                         std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  const double slope = uniform(rng, 1.0 - slope_jitter, 1.0 + slope_jitter);
  const double bound = shift_iqr * stats.iqr();
  const double shift = uniform(rng, -bound, bound);
  return apply_window(view, stats, slope, shift, lo, hi);
}

Volume permute_slices(const Volume& view, int axis, const std::vector<std::size_t>& perm) {
  const AxisLayout l = layout(view.dims(), axis);
  if (perm.size() != l.n) throw DataError("slice permutation length does not match the axis");
  std::vector<std::uint8_t> seen(l.n, 0);
  for (std::size_t p : perm) {
    if (p >= l.n || seen[p]) throw DataError("slice order is not a permutation");
    seen[p] = 1;
  }
  Volume out(view.dims());
  const auto& src = view.voxels();
  auto& dst = out.voxels();
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < l.n; ++i) {
      const float* s = &src[(o * l.n + perm[i]) * l.inner];
      std::copy(s, s + l.inner, &dst[(o * l.n + i) * l.inner]);
    }
  return out;
}

Volume permute_slices(const Volume& view, int axis, std::uint64_t seed) {
  const AxisLayout l = layout(view.dims(), axis);
  std::vector<std::size_t> perm(l.n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  return permute_slices(view, axis, perm);
}

Volume flip(const Volume& view, int axis) {
  const AxisLayout l = layout(view.dims(), axis);
  std::vector<std::size_t> perm(l.n);
  for (std::size_t i = 0; i < l.n; ++i) perm[i] = l.n - 1 - i;
  return permute_slices(view, axis, perm);
}

MaskPattern sample_mask(std::size_t n_tokens, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("mask ratio must lie in [0, 1]");
  const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n_tokens)));
  std::vector<std::size_t> idx(n_tokens);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  // partial Fisher-Yates: first k entries are a uniform k-subset
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(i, n_tokens - 1)(rng);
    std::swap(idx[i], idx[j]);
  }
  MaskPattern m;
  m.ratio = ratio;
  m.masked.assign(n_tokens, 0);
  for (std::size_t i = 0; i < k; ++i) m.masked[idx[i]] = 1;
  return m;
}

CropSpec sample_crop(const Dims& source, const Range& scale, const Range& aspect, const Dims& target, bool is_global,
                     std::mt19937_64& rng) {
  CropSpec c;
  c.is_global = is_global;
  c.target_shape = target;
  c.scale = scale.lo == scale.hi ? scale.lo : uniform(rng, scale.lo, scale.hi);

  std::array<double, 3> r{1.0, 1.0, 1.0};
  if (aspect.lo != aspect.hi) {
    double log_mean = 0.0;
    for (double& a : r) {
      a = std::exp(uniform(rng, std::log(aspect.lo), std::log(aspect.hi)));
      log_mean += std::log(a) / 3.0;
    }
    for (double& a : r) a /= std::exp(log_mean);
    // Cap so every side fits, keeping the product at 1 by growing the others.
    const double cap = std::cbrt(1.0 / c.scale);
    for (int iter = 0; iter < 3; ++iter) {
      std::array<bool, 3> capped{};
      double capped_log = 0.0;
      int free = 0;
      bool over = false;
      for (int a = 0; a < 3; ++a) {
        if (r[a] >= cap) {
          over = over || r[a] > cap;
          capped[a] = true;
          r[a] = cap;
          capped_log += std::log(cap);
        } else {
          ++free;
        }
      }
      if (!over || free == 0) break;
      double free_log = 0.0;
      for (int a = 0; a < 3; ++a)
        if (!capped[a]) free_log += std::log(r[a]);
      const double adjust = std::exp((-capped_log - free_log) / free);
      for (int a = 0; a < 3; ++a)
        if (!capped[a]) r[a] *= adjust;
    }
  }
  c.aspect = r;

  const std::array<double, 3> dims{static_cast<double>(source.d), static_cast<double>(source.h),
                                   static_cast<double>(source.w)};
  const double k = std::cbrt(c.scale);
  for (int a = 0; a < 3; ++a) {
    c.extent[a] = std::min(dims[a], k * dims[a] * r[a]);
    const double room = dims[a] - c.extent[a];
    c.offset[a] = room > 0.0 ? uniform(rng, 0.0, room) : 0.0;
  }
  return c;
}

Volume extract_crop(const Volume& source, const CropSpec& spec) {
  const Dims t = spec.target_shape;
  const std::array<std::size_t, 3> out{t.d, t.h, t.w};
  std::array<prep::AxisMap, 3> maps;
  for (int a = 0; a < 3; ++a) maps[a] = {spec.offset[a], spec.extent[a] / static_cast<double>(out[a]), out[a]};
  return prep::resample_trilinear(source, maps);
}

ViewBatch sample_views(const CanonicalVolume& vol, const AugmentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const Dims src = vol.voxels.dims();
  if (src.min_side() < cfg.min_source_side) {
    throw DataError(vol.source_id + ": volume side " + std::to_string(src.min_side()) +
                    " is smaller than the minimum crop source side " + std::to_string(cfg.min_source_side));
  }
  const double lo = (prep::kHuMin - vol.norm_stats.mu_hu) / vol.norm_stats.sigma_hu;
  const double hi = (prep::kHuMax - vol.norm_stats.mu_hu) / vol.norm_stats.sigma_hu;

  ViewBatch b;
  b.rng_seed = seed;
  const std::size_t n_views = kGlobalViews + kLocalViews;
  for (std::size_t v = 0; v < n_views; ++v) {
    const bool global = v < kGlobalViews;
    std::mt19937_64 rng(derive_seed(seed, v));
    CropSpec spec = sample_crop(src, global ? cfg.global_scale : cfg.local_scale, cfg.aspect,
                                global ? cfg.global_target : cfg.local_target, global, rng);
    Volume view = extract_crop(vol.voxels, spec);

    if (coin(rng, cfg.window_prob)) {
      const IqrStats st = iqr_stats(view.voxels());
      spec.window_slope = uniform(rng, 1.0 - cfg.window_slope_jitter, 1.0 + cfg.window_slope_jitter);
      const double bound = cfg.window_shift_iqr * st.iqr();
      spec.window_shift = bound > 0.0 ? uniform(rng, -bound, bound) : 0.0;
      view = apply_window(view, st, spec.window_slope, spec.window_shift, lo, hi);
    }
    for (int a = 0; a < 3; ++a) {
      spec.flips[a] = coin(rng, cfg.flip_prob);
      if (spec.flips[a]) view = flip(view, a);
    }
    spec.slice_permuted = coin(rng, cfg.slice_perm_prob);
    if (spec.slice_permuted) view = permute_slices(view, 0, rng());

    b.specs.push_back(spec);
    if (global) {
      const Dims g = cfg.global_target;
      const std::size_t n_tokens = (g.d / cfg.patch_size) * (g.h / cfg.patch_size) * (g.w / cfg.patch_size);
      b.masks.push_back(sample_mask(n_tokens, cfg.mask_ratio, derive_seed(seed, 1000 + v)));
      b.global_views.push_back(std::move(view));
    } else {
      b.local_views.push_back(std::move(view));
    }
  }
  return b;
}

}  // namespace volssl::aug
