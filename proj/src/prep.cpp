#include "volssl/prep.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <string>
#include <vector>

#include "volssl/errors.hpp"

namespace volssl::prep {

namespace {

struct Tap {
  std::size_t i0 = 0, i1 = 0;
  double w1 = 0.0;
};

std::vector<Tap> axis_taps(const AxisMap& m, std::size_t n) {
  std::vector<Tap> taps(m.out);
  for (std::size_t i = 0; i < m.out; ++i) {
    double c = m.offset + (static_cast<double>(i) + 0.5) * m.step - 0.5;
    Tap t;
    if (n == 1) {
      taps[i] = t;
      continue;
    }
    const double last = static_cast<double>(n - 1);
    if (c < -0.5 || c > last + 0.5) c = std::clamp(c, 0.0, last);
    const double cell = std::clamp(std::floor(c), 0.0, last - 1.0);
    t.i0 = static_cast<std::size_t>(cell);
    t.i1 = t.i0 + 1;
    t.w1 = c - cell;
    taps[i] = t;
  }
  return taps;
}

}  // namespace

Volume resample_trilinear(const Volume& src, const std::array<AxisMap, 3>& zyx) {
  const Dims in = src.dims();
  const Dims out{zyx[0].out, zyx[1].out, zyx[2].out};
  if (in.count() == 0 || out.count() == 0) throw DataError("resample: empty volume");
  const auto tz = axis_taps(zyx[0], in.d), ty = axis_taps(zyx[1], in.h), tx = axis_taps(zyx[2], in.w);

  // x pass: [in.d][in.h][out.w]
  std::vector<double> a(in.d * in.h * out.w);
  for (std::size_t z = 0; z < in.d; ++z)
    for (std::size_t y = 0; y < in.h; ++y) {
      const float* row = &src.voxels()[src.index(z, y, 0)];
      double* dst = &a[(z * in.h + y) * out.w];
      for (std::size_t x = 0; x < out.w; ++x) {
        const Tap& t = tx[x];
        dst[x] = (1.0 - t.w1) * row[t.i0] + t.w1 * row[t.i1];
      }
    }
  // y pass: [in.d][out.h][out.w]
  std::vector<double> b(in.d * out.h * out.w);
  for (std::size_t z = 0; z < in.d; ++z)
    for (std::size_t y = 0; y < out.h; ++y) {
      const Tap& t = ty[y];
      const double* r0 = &a[(z * in.h + t.i0) * out.w];
      const double* r1 = &a[(z * in.h + t.i1) * out.w];
      double* dst = &b[(z * out.h + y) * out.w];
      for (std::size_t x = 0; x < out.w; ++x) dst[x] = (1.0 - t.w1) * r0[x] + t.w1 * r1[x];
    }
  // z pass
  Volume result(out);
  const std::size_t plane = out.h * out.w;
  for (std::size_t z = 0; z < out.d; ++z) {
    const Tap& t = tz[z];
    const double* p0 = &b[t.i0 * plane];
    const double* p1 = &b[t.i1 * plane];
    float* dst = &result.voxels()[z * plane];
    for (std::size_t i = 0; i < plane; ++i) dst[i] = static_cast<float>((1.0 - t.w1) * p0[i] + t.w1 * p1[i]);
  }
  return result;
}

IsotropicPlan plan_isotropic(const Dims& dims, const Vec3& spacing, std::size_t max_side) {
  if (max_side < 1) throw ConfigError("max_side must be at least 1");
  if (!(spacing.x > 0 && spacing.y > 0 && spacing.z > 0)) throw DataError("spacing components must be positive");
  const double ez = static_cast<double>(dims.d) * spacing.z;
  const double ey = static_cast<double>(dims.h) * spacing.y;
  const double ex = static_cast<double>(dims.w) * spacing.x;
  const double finest = std::min({spacing.x, spacing.y, spacing.z});
  const double side_limited = std::max({ez, ey, ex}) / static_cast<double>(max_side);
  IsotropicPlan plan;
  plan.spacing = std::max(finest, side_limited);
  auto side = [&](double extent) {
    const auto n = static_cast<std::size_t>(std::llround(extent / plan.spacing));
    return std::clamp<std::size_t>(n, 1, max_side);
  };
  plan.dims = {side(ez), side(ey), side(ex)};
  return plan;
}

RawVolume resample_isotropic(const RawVolume& raw, std::size_t max_side) {
  const Dims d = raw.voxels.dims();
  if (d.min_side() < 2) {
    throw DataError(raw.source_id + ": degenerate volume " + std::to_string(d.w) + "x" + std::to_string(d.h) + "x" +
                    std::to_string(d.d) + " (every side needs at least 2 voxels)");
  }
  const IsotropicPlan plan = plan_isotropic(d, raw.spacing, max_side);
  RawVolume out;
  out.source_id = raw.source_id;
  out.spacing = {plan.spacing, plan.spacing, plan.spacing};
  out.origin = {raw.origin.x - 0.5 * raw.spacing.x + 0.5 * plan.spacing,
                raw.origin.y - 0.5 * raw.spacing.y + 0.5 * plan.spacing,
                raw.origin.z - 0.5 * raw.spacing.z + 0.5 * plan.spacing};
  const bool identity = plan.dims == d && raw.spacing.x == plan.spacing && raw.spacing.y == plan.spacing &&
                        raw.spacing.z == plan.spacing;
  if (identity) {
    out.voxels = raw.voxels;
    out.origin = raw.origin;
    return out;
  }
  const std::array<AxisMap, 3> maps{AxisMap{0.0, plan.spacing / raw.spacing.z, plan.dims.d},
                                    AxisMap{0.0, plan.spacing / raw.spacing.y, plan.dims.h},
                                    AxisMap{0.0, plan.spacing / raw.spacing.x, plan.dims.w}};
  out.voxels = resample_trilinear(raw.voxels, maps);
  return out;
}

CanonicalVolume clip_and_normalize(const RawVolume& vol, const GlobalNormStats& stats) {
  if (!(stats.sigma_hu > 0.0) || !std::isfinite(stats.mu_hu)) {
    throw NumericalError("normalisation requires sigma_hu > 0 and finite mu_hu");
  }
  CanonicalVolume c;
  c.iso_spacing = vol.spacing.x;
  c.norm_stats = stats;
  c.source_id = vol.source_id;
  std::vector<float> v(vol.voxels.size());
  const auto& src = vol.voxels.voxels();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(src[i])) throw DataError(vol.source_id + ": non-finite voxel value");
    v[i] = static_cast<float>((clip_hu(src[i]) - stats.mu_hu) / stats.sigma_hu);
  }
  c.voxels = Volume(vol.voxels.dims(), std::move(v));
  return c;
}

void NormAccumulator::add(std::span<const float> hu_values) {
  // Chan et al. pairwise update of a batch summary into the running one.
  NormAccumulator batch;
  double s = 0.0;
  for (float v : hu_values) s += clip_hu(v);
  batch.n_ = hu_values.size();
  if (batch.n_ == 0) return;
  batch.mean_ = s / static_cast<double>(batch.n_);
  for (float v : hu_values) {
    const double d = clip_hu(v) - batch.mean_;
    batch.m2_ += d * d;
  }
  merge(batch);
}

void NormAccumulator::merge(const NormAccumulator& other) {
  if (other.n_ == 0) return;
  if (n_ == 0) {
    *this = other;
    return;
  }
  const double na = static_cast<double>(n_), nb = static_cast<double>(other.n_);
  const double n = na + nb;
  const double delta = other.mean_ - mean_;
  mean_ += delta * nb / n;
  m2_ += other.m2_ + delta * delta * na * nb / n;
  n_ += other.n_;
}

double NormAccumulator::stddev() const { return n_ == 0 ? 0.0 : std::sqrt(m2_ / static_cast<double>(n_)); }

GlobalNormStats NormAccumulator::finish() const {
  if (n_ == 0) throw DataError("normalisation statistics need at least one voxel");
  const double sigma = stddev();
  if (!(sigma > 0.0)) {
    throw NumericalError("degenerate normalisation statistics: sigma_hu = 0 (mu_hu = " + std::to_string(mean_) + ")");
  }
  return {mean_, sigma, n_};
}

GlobalNormStats accumulate_norm_stats(std::span<const RawVolume> vols) {
  if (vols.empty()) throw DataError("normalisation statistics need at least one volume");
  NormAccumulator acc;
  for (const auto& v : vols) acc.add(v);
  return acc.finish();
}

Box largest_component(const Dims& dims, std::span<const std::uint8_t> mask) {
  if (mask.size() != dims.count()) throw DataError("component mask size mismatch");
  std::vector<std::uint8_t> visited(mask.size(), 0);
  Box best;
  std::vector<std::size_t> queue;
  const std::size_t plane = dims.h * dims.w;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (!mask[start] || visited[start]) continue;
    Box cur;
    cur.lo = {dims.d, dims.h, dims.w};
    cur.hi = {0, 0, 0};
    queue.clear();
    queue.push_back(start);
    visited[start] = 1;
    for (std::size_t qi = 0; qi < queue.size(); ++qi) {
      const std::size_t idx = queue[qi];
      const std::size_t z = idx / plane, y = (idx / dims.w) % dims.h, x = idx % dims.w;
      const std::array<std::size_t, 3> p{z, y, x};
      for (int a = 0; a < 3; ++a) {
        cur.lo[a] = std::min(cur.lo[a], p[a]);
        cur.hi[a] = std::max(cur.hi[a], p[a] + 1);
      }
      ++cur.voxels;
      auto visit = [&](std::size_t n) {
        if (mask[n] && !visited[n]) {
          visited[n] = 1;
          queue.push_back(n);
        }
      };
      if (z > 0) visit(idx - plane);
      if (z + 1 < dims.d) visit(idx + plane);
      if (y > 0) visit(idx - dims.w);
      if (y + 1 < dims.h) visit(idx + dims.w);
      if (x > 0) visit(idx - 1);
      if (x + 1 < dims.w) visit(idx + 1);
    }
    if (cur.voxels > best.voxels) best = cur;
  }
  return best;
}

StripResult strip_background(const CanonicalVolume& vol, double air_threshold_hu) {
  if (air_threshold_hu < kHuMin || air_threshold_hu > kHuMax) {
    throw ConfigError("air threshold must lie inside [-1000, 1900] HU");
  }
  const double thr = (air_threshold_hu - vol.norm_stats.mu_hu) / vol.norm_stats.sigma_hu;
  const auto& v = vol.voxels.voxels();
  std::vector<std::uint8_t> mask(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) mask[i] = static_cast<double>(v[i]) > thr ? 1 : 0;
  const Box box = largest_component(vol.voxels.dims(), mask);
  StripResult res;
  if (box.voxels == 0) {
    res.volume = vol;
    res.no_foreground = true;
    return res;
  }
  res.volume = vol;
  res.volume.voxels = vol.voxels.crop(box.lo[0], box.lo[1], box.lo[2],
                                      {box.hi[0] - box.lo[0], box.hi[1] - box.lo[1], box.hi[2] - box.lo[2]});
  for (int a = 0; a < 3; ++a) res.volume.crop_offset[a] += static_cast<long>(box.lo[a]);
  return res;
}

StripResult canonicalize(const RawVolume& raw, const GlobalNormStats& stats, std::size_t max_side,
                         double air_threshold_hu) {
  validate(raw);
  return strip_background(clip_and_normalize(resample_isotropic(raw, max_side), stats), air_threshold_hu);
}

}  // namespace volssl::prep
