#pragma once
// Parameter containers shared by the backbone, heads and probes.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "volssl/tensor.hpp"

namespace volssl::nn {

using ag::Tensor;

struct ParamRef {
  std::string name;
  Tensor* tensor = nullptr;
};
using ParamRefs = std::vector<ParamRef>;

/// N(0, std) truncated at two standard deviations.
Tensor trunc_normal(ag::Shape shape, double std, std::mt19937_64& rng);

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out] or undefined

  Linear() = default;
  Linear(std::size_t in, std::size_t out, std::mt19937_64& rng, bool bias = true, double std = 0.02);
  Tensor operator()(const Tensor& x) const;
  std::size_t in() const { return w.dim(0); }
  std::size_t out() const { return w.dim(1); }
  void collect(ParamRefs& out, const std::string& prefix);
};

struct LayerNorm {
  Tensor gamma, beta;
  double eps = 1e-6;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim, double eps = 1e-6);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamRefs& out, const std::string& prefix);
};

void set_requires_grad(const ParamRefs& params, bool on);
void zero_grad(const ParamRefs& params);
std::size_t count_parameters(const ParamRefs& params);

/// FNV-1a over names, shapes and the bit patterns of every value.
std::uint64_t checksum(const ParamRefs& params);

/// Copies values from src into dst; names and shapes must agree.
void copy_values(const ParamRefs& dst, const ParamRefs& src);

/// Structural copy of a module with freshly allocated parameter storage.
template <class M>
M deep_clone(const M& m, bool requires_grad) {
  M c = m;
  ParamRefs refs;
  c.collect(refs, "");
  for (auto& r : refs) {
    if (!r.tensor->defined()) continue;
    const auto v = r.tensor->values();
    *r.tensor = Tensor::from(r.tensor->shape(), std::vector<double>(v.begin(), v.end()), requires_grad);
  }
  return c;
}

template <class M>
ParamRefs params_of(M& m) {
  ParamRefs refs;
  m.collect(refs, "");
  return refs;
}

}  // namespace volssl::nn
