#include "volssl/nn.hpp"

#include <cstring>

#include "volssl/errors.hpp"
#include "volssl/ops.hpp"

namespace volssl::nn {

Tensor trunc_normal(ag::Shape shape, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(ag::shape_numel(shape));
  for (double& x : v) {
    double z;
    do z = n(rng);
    while (z < -2.0 || z > 2.0);
    x = z * std;
  }
  return Tensor::from(std::move(shape), std::move(v), true);
}

Linear::Linear(std::size_t in, std::size_t out, std::mt19937_64& rng, bool bias, double std)
    : w(trunc_normal({in, out}, std, rng)) {
  if (bias) b = Tensor::zeros({out}, true);
}

Tensor Linear::operator()(const Tensor& x) const { return ops::linear(x, w, b); }

void Linear::collect(ParamRefs& out, const std::string& prefix) {
  out.push_back({prefix + "weight", &w});
  if (b.defined()) out.push_back({prefix + "bias", &b});
}

LayerNorm::LayerNorm(std::size_t dim, double eps_)
    : gamma(Tensor::full({dim}, 1.0, true)), beta(Tensor::zeros({dim}, true)), eps(eps_) {}

Tensor LayerNorm::operator()(const Tensor& x) const { return ops::layer_norm(x, gamma, beta, eps); }

void LayerNorm::collect(ParamRefs& out, const std::string& prefix) {
  out.push_back({prefix + "gamma", &gamma});
  out.push_back({prefix + "beta", &beta});
}

void set_requires_grad(const ParamRefs& params, bool on) {
  for (const auto& p : params) p.tensor->set_requires_grad(on);
}

void zero_grad(const ParamRefs& params) {
  for (const auto& p : params) p.tensor->zero_grad();
}

std::size_t count_parameters(const ParamRefs& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor->numel();
  return n;
}

std::uint64_t checksum(const ParamRefs& params) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ull;
  };
  for (const auto& p : params) {
    mix(p.name.data(), p.name.size());
    for (std::size_t d : p.tensor->shape()) {
      const std::uint64_t v = d;
      mix(&v, sizeof v);
    }
    const auto v = p.tensor->values();
    mix(v.data(), v.size() * sizeof(double));
  }
  return h;
}

void copy_values(const ParamRefs& dst, const ParamRefs& src) {
  if (dst.size() != src.size()) throw ConfigError("parameter sets differ in size");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].name != src[i].name || dst[i].tensor->shape() != src[i].tensor->shape()) {
      throw ConfigError("parameter mismatch at " + dst[i].name + " / " + src[i].name);
    }
    const auto s = src[i].tensor->values();
    auto d = dst[i].tensor->values();
    std::copy(s.begin(), s.end(), d.begin());
  }
}

}  // namespace volssl::nn
