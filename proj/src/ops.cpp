#include "volssl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "volssl/errors.hpp"
#include "volssl/simd.hpp"

namespace volssl::ops {

using ag::Node;
using ag::Shape;
using ag::shape_str;

namespace {

void require(bool cond, const std::string& what) {
  if (!cond) throw DataError(what);
}

void require_2d(const Tensor& t, const char* op) {
  require(t.defined() && t.rank() == 2, std::string(op) + ": expected a 2D tensor");
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Accumulates into parent gradient if that parent participates in autograd.
inline double* grad_of(const Tensor& t) { return t.requires_grad() ? t.node()->grad_data() : nullptr; }

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

// ---------------------------------------------------------------------------
// linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(m * n);
  simd::gemm(false, false, m, n, k, 1.0, a.data(), k, b.data(), n, 0.0, out.data(), n);
  return ag::make_result({m, n}, std::move(out), {a, b}, [a, b, m, n, k](Node& self) {
    const double* g = self.grad.data();
    if (double* ga = grad_of(a)) simd::gemm(false, true, m, k, n, 1.0, g, n, b.data(), n, 1.0, ga, k);
    if (double* gb = grad_of(b)) simd::gemm(true, false, k, n, m, 1.0, a.data(), k, g, n, 1.0, gb, n);
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul_nt");
  require_2d(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  require(b.dim(1) == k, "matmul_nt: inner dimension mismatch");
  std::vector<double> out(m * n);
  simd::gemm(false, true, m, n, k, 1.0, a.data(), k, b.data(), k, 0.0, out.data(), n);
  return ag::make_result({m, n}, std::move(out), {a, b}, [a, b, m, n, k](Node& self) {
    const double* g = self.grad.data();
    if (double* ga = grad_of(a)) simd::gemm(false, false, m, k, n, 1.0, g, n, b.data(), k, 1.0, ga, k);
    if (double* gb = grad_of(b)) simd::gemm(true, false, n, k, m, 1.0, g, n, a.data(), k, 1.0, gb, k);
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_2d(x, "linear");
  require_2d(w, "linear");
  const std::size_t n = x.dim(0), in = x.dim(1), out_dim = w.dim(1);
  require(w.dim(0) == in, "linear: input width " + std::to_string(in) + " does not match weight " +
                              shape_str(w.shape()));
  if (b.defined()) require(b.numel() == out_dim, "linear: bias size mismatch");
  std::vector<double> out(n * out_dim);
  if (b.defined()) {
    for (std::size_t i = 0; i < n; ++i) std::copy(b.data(), b.data() + out_dim, out.data() + i * out_dim);
  }
  simd::gemm(false, false, n, out_dim, in, 1.0, x.data(), in, w.data(), out_dim, b.defined() ? 1.0 : 0.0,
             out.data(), out_dim);
  return ag::make_result({n, out_dim}, std::move(out), {x, w, b}, [x, w, b, n, in, out_dim](Node& self) {
    const double* g = self.grad.data();
    if (double* gx = grad_of(x)) simd::gemm(false, true, n, in, out_dim, 1.0, g, out_dim, w.data(), out_dim, 1.0, gx, in);
    if (double* gw = grad_of(w)) simd::gemm(true, false, in, out_dim, n, 1.0, x.data(), in, g, out_dim, 1.0, gw, out_dim);
    if (b.defined()) {
      if (double* gb = grad_of(b)) {
        for (std::size_t i = 0; i < n; ++i) simd::axpy(out_dim, 1.0, g + i * out_dim, gb);
      }
    }
  });
}

Tensor transpose(const Tensor& x) {
  require_2d(x, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x.data()[i * c + j];
  return ag::make_result({c, r}, std::move(out), {x}, [x, r, c](Node& self) {
    if (double* gx = grad_of(x)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += self.grad[j * r + i];
    }
  });
}

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return ag::make_result(a.shape(), std::move(out), {a, b}, [a, b](Node& self) {
    const std::size_t n = self.grad.size();
    if (double* ga = grad_of(a)) simd::axpy(n, 1.0, self.grad.data(), ga);
    if (double* gb = grad_of(b)) simd::axpy(n, 1.0, self.grad.data(), gb);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return ag::make_result(a.shape(), std::move(out), {a, b}, [a, b](Node& self) {
    const std::size_t n = self.grad.size();
    if (double* ga = grad_of(a)) simd::axpy(n, 1.0, self.grad.data(), ga);
    if (double* gb = grad_of(b)) simd::axpy(n, -1.0, self.grad.data(), gb);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return ag::make_result(a.shape(), std::move(out), {a, b}, [a, b](Node& self) {
    const std::size_t n = self.grad.size();
    if (double* ga = grad_of(a))
      for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i] * b.data()[i];
    if (double* gb = grad_of(b))
      for (std::size_t i = 0; i < n; ++i) gb[i] += self.grad[i] * a.data()[i];
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= s;
  return ag::make_result(a.shape(), std::move(out), {a}, [a, s](Node& self) {
    if (double* ga = grad_of(a)) simd::axpy(self.grad.size(), s, self.grad.data(), ga);
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& v : out) v += s;
  return ag::make_result(a.shape(), std::move(out), {a}, [a](Node& self) {
    if (double* ga = grad_of(a)) simd::axpy(self.grad.size(), 1.0, self.grad.data(), ga);
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  const std::size_t n = a.rows(), c = a.cols();
  require(row.numel() == c, "add_row: row width mismatch");
  std::vector<double> out(a.values().begin(), a.values().end());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += row.data()[j];
  return ag::make_result(a.shape(), std::move(out), {a, row}, [a, row, n, c](Node& self) {
    if (double* ga = grad_of(a)) simd::axpy(n * c, 1.0, self.grad.data(), ga);
    if (double* gr = grad_of(row))
      for (std::size_t i = 0; i < n; ++i) simd::axpy(c, 1.0, self.grad.data() + i * c, gr);
  });
}

Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.data()[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  return ag::make_result(a.shape(), std::move(out), {a}, [a](Node& self) {
    if (double* ga = grad_of(a)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double x = a.data()[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        ga[i] += self.grad[i] * (cdf + x * pdf);
      }
    }
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, a.data()[i]);
  return ag::make_result(a.shape(), std::move(out), {a}, [a](Node& self) {
    if (double* ga = grad_of(a))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (a.data()[i] > 0.0) ga[i] += self.grad[i];
  });
}

Tensor log(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.data()[i]);
  return ag::make_result(a.shape(), std::move(out), {a}, [a](Node& self) {
    if (double* ga = grad_of(a))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] / a.data()[i];
  });
}

// ---------------------------------------------------------------------------
// normalisation & softmax

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t n = x.rows(), c = x.cols();
  require(gamma.numel() == c && beta.numel() == c, "layer_norm: affine size mismatch");
  std::vector<double> out(n * c), xhat(n * c), rstd(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = x.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (row[j] - mu) * rstd[i];
      out[i * c + j] = xhat[i * c + j] * gamma.data()[j] + beta.data()[j];
    }
  }
  return ag::make_result(x.shape(), std::move(out), {x, gamma, beta},
                         [x, gamma, beta, n, c, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
    const double* g = self.grad.data();
    double* gx = grad_of(x);
    double* gg = grad_of(gamma);
    double* gb = grad_of(beta);
    std::vector<double> dxhat(c);
    for (std::size_t i = 0; i < n; ++i) {
      const double* gi = g + i * c;
      const double* xh = xhat.data() + i * c;
      if (gg)
        for (std::size_t j = 0; j < c; ++j) gg[j] += gi[j] * xh[j];
      if (gb)
        for (std::size_t j = 0; j < c; ++j) gb[j] += gi[j];
      if (!gx) continue;
      double m1 = 0.0, m2 = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        dxhat[j] = gi[j] * gamma.data()[j];
        m1 += dxhat[j];
        m2 += dxhat[j] * xh[j];
      }
      m1 /= static_cast<double>(c);
      m2 /= static_cast<double>(c);
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += rstd[i] * (dxhat[j] - m1 - xh[j] * m2);
    }
  });
}

namespace {
void softmax_row(const double* in, double* out, std::size_t c, double inv_t) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, in[j] * inv_t);
  double s = 0.0;
  for (std::size_t j = 0; j < c; ++j) {
    out[j] = std::exp(in[j] * inv_t - mx);
    s += out[j];
  }
  for (std::size_t j = 0; j < c; ++j) out[j] /= s;
}
}  // namespace

Tensor softmax_rows(const Tensor& x, double temperature) {
  require(temperature > 0.0, "softmax: temperature must be positive");
  const std::size_t n = x.rows(), c = x.cols();
  const double inv_t = 1.0 / temperature;
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i) softmax_row(x.data() + i * c, out.data() + i * c, c, inv_t);
  auto result = ag::make_result(x.shape(), std::move(out), {x}, nullptr);
  if (result.requires_grad()) {
    result.node()->backward = [x, n, c, inv_t](Node& self) {
      double* gx = grad_of(x);
      if (!gx) return;
      for (std::size_t i = 0; i < n; ++i) {
        const double* p = self.value.data() + i * c;
        const double* g = self.grad.data() + i * c;
        double dotp = 0.0;
        for (std::size_t j = 0; j < c; ++j) dotp += g[j] * p[j];
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += inv_t * p[j] * (g[j] - dotp);
      }
    };
  }
  return result;
}

Tensor log_softmax_rows(const Tensor& x, double temperature) {
  require(temperature > 0.0, "log_softmax: temperature must be positive");
  const std::size_t n = x.rows(), c = x.cols();
  const double inv_t = 1.0 / temperature;
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = x.data() + i * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, row[j] * inv_t);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] * inv_t - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] * inv_t - lse;
  }
  auto result = ag::make_result(x.shape(), std::move(out), {x}, nullptr);
  if (result.requires_grad()) {
    result.node()->backward = [x, n, c, inv_t](Node& self) {
      double* gx = grad_of(x);
      if (!gx) return;
      for (std::size_t i = 0; i < n; ++i) {
        const double* lp = self.value.data() + i * c;
        const double* g = self.grad.data() + i * c;
        double gs = 0.0;
        for (std::size_t j = 0; j < c; ++j) gs += g[j];
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += inv_t * (g[j] - std::exp(lp[j]) * gs);
      }
    };
  }
  return result;
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
  const std::size_t n = x.rows(), c = x.cols();
  std::vector<double> out(n * c), norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = x.data() + i * c;
    norms[i] = std::max(std::sqrt(simd::dot(row, row, c)), eps);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] / norms[i];
  }
  auto result = ag::make_result(x.shape(), std::move(out), {x}, nullptr);
  if (result.requires_grad()) {
    result.node()->backward = [x, n, c, eps, norms = std::move(norms)](Node& self) {
      double* gx = grad_of(x);
      if (!gx) return;
      for (std::size_t i = 0; i < n; ++i) {
        const double* y = self.value.data() + i * c;
        const double* g = self.grad.data() + i * c;
        if (norms[i] <= eps) {
          for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j] / eps;
          continue;
        }
        const double gy = simd::dot(g, y, c);
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += (g[j] - y[j] * gy) / norms[i];
      }
    };
  }
  return result;
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return ag::make_result({1}, {s}, {x}, [x](Node& self) {
    if (double* gx = grad_of(x)) {
      const double g = self.grad[0];
      for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g;
    }
  });
}

Tensor mean(const Tensor& x) {
  require(x.numel() > 0, "mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mean_rows(const Tensor& x) { return group_mean_rows(x, x.rows()); }

Tensor group_mean_rows(const Tensor& x, std::size_t group_size) {
  const std::size_t n = x.rows(), c = x.cols();
  require(group_size > 0 && n % group_size == 0, "group_mean_rows: rows not divisible by group size");
  const std::size_t g = n / group_size;
  const double inv = 1.0 / static_cast<double>(group_size);
  std::vector<double> out(g * c, 0.0);
  for (std::size_t i = 0; i < n; ++i) simd::axpy(c, inv, x.data() + i * c, out.data() + (i / group_size) * c);
  return ag::make_result({g, c}, std::move(out), {x}, [x, n, c, group_size, inv](Node& self) {
    if (double* gx = grad_of(x))
      for (std::size_t i = 0; i < n; ++i) simd::axpy(c, inv, self.grad.data() + (i / group_size) * c, gx + i * c);
  });
}

Tensor weighted_sum(std::span<const Tensor> terms, std::span<const double> weights) {
  require(terms.size() == weights.size(), "weighted_sum: terms/weights length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) s += weights[i] * terms[i].item();
  std::vector<Tensor> parents(terms.begin(), terms.end());
  std::vector<double> w(weights.begin(), weights.end());
  return ag::make_result({1}, {s}, parents, [parents, w](Node& self) {
    for (std::size_t i = 0; i < parents.size(); ++i)
      if (double* g = grad_of(parents[i])) g[0] += w[i] * self.grad[0];
  });
}

// ---------------------------------------------------------------------------
// structure

Tensor reshape(const Tensor& x, Shape shape) {
  require(ag::shape_numel(shape) == x.numel(),
          "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  std::vector<double> out(x.values().begin(), x.values().end());
  return ag::make_result(std::move(shape), std::move(out), {x}, [x](Node& self) {
    if (double* gx = grad_of(x)) simd::axpy(self.grad.size(), 1.0, self.grad.data(), gx);
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t n = 0;
  for (const auto& p : parts) {
    require(p.cols() == c, "concat_rows: column mismatch");
    n += p.rows();
  }
  std::vector<double> out;
  out.reserve(n * c);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  std::vector<Tensor> parents(parts.begin(), parts.end());
  return ag::make_result({n, c}, std::move(out), parents, [parents](Node& self) {
    std::size_t off = 0;
    for (const auto& p : parents) {
      if (double* g = grad_of(p)) simd::axpy(p.numel(), 1.0, self.grad.data() + off, g);
      off += p.numel();
    }
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require(begin <= end && end <= x.rows(), "slice_rows: range out of bounds");
  const std::size_t c = x.cols();
  std::vector<double> out(x.data() + begin * c, x.data() + end * c);
  return ag::make_result({end - begin, c}, std::move(out), {x}, [x, begin, c](Node& self) {
    if (double* gx = grad_of(x)) simd::axpy(self.grad.size(), 1.0, self.grad.data(), gx + begin * c);
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  const std::size_t c = x.cols();
  std::vector<double> out(rows.size() * c);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] < x.rows(), "gather_rows: index out of range");
    std::copy(x.data() + rows[i] * c, x.data() + (rows[i] + 1) * c, out.data() + i * c);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return ag::make_result({rows.size(), c}, std::move(out), {x}, [x, c, idx = std::move(idx)](Node& self) {
    if (double* gx = grad_of(x))
      for (std::size_t i = 0; i < idx.size(); ++i) simd::axpy(c, 1.0, self.grad.data() + i * c, gx + idx[i] * c);
  });
}

Tensor replace_rows(const Tensor& x, std::span<const std::uint8_t> mask, const Tensor& row) {
  const std::size_t n = x.rows(), c = x.cols();
  require(mask.size() == n, "replace_rows: mask length " + std::to_string(mask.size()) +
                                " does not match " + std::to_string(n) + " rows");
  require(row.numel() == c, "replace_rows: row width mismatch");
  std::vector<double> out(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < n; ++i)
    if (mask[i]) std::copy(row.data(), row.data() + c, out.data() + i * c);
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return ag::make_result(x.shape(), std::move(out), {x, row}, [x, row, n, c, m = std::move(m)](Node& self) {
    double* gx = grad_of(x);
    double* gr = grad_of(row);
    for (std::size_t i = 0; i < n; ++i) {
      const double* g = self.grad.data() + i * c;
      if (m[i]) {
        if (gr) simd::axpy(c, 1.0, g, gr);
      } else if (gx) {
        simd::axpy(c, 1.0, g, gx + i * c);
      }
    }
  });
}

Tensor tile_rows(const Tensor& x, std::size_t n) {
  const std::size_t k = x.rows(), c = x.cols();
  std::vector<double> out;
  out.reserve(n * k * c);
  for (std::size_t i = 0; i < n; ++i) out.insert(out.end(), x.values().begin(), x.values().end());
  return ag::make_result({n * k, c}, std::move(out), {x}, [x, n, k, c](Node& self) {
    if (double* gx = grad_of(x))
      for (std::size_t i = 0; i < n; ++i) simd::axpy(k * c, 1.0, self.grad.data() + i * k * c, gx);
  });
}

// ---------------------------------------------------------------------------
// attention

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_seq, std::size_t seq_q,
                 std::size_t seq_k, std::size_t n_heads, double scale_factor) {
  require_2d(q, "attention");
  require_2d(k, "attention");
  require_2d(v, "attention");
  const std::size_t d = q.dim(1);
  require(k.dim(1) == d && v.dim(1) == d, "attention: width mismatch");
  require(q.dim(0) == n_seq * seq_q && k.dim(0) == n_seq * seq_k && v.dim(0) == n_seq * seq_k,
          "attention: row count does not match sequence layout");
  require(n_heads > 0 && d % n_heads == 0, "attention: width not divisible by heads");
  require(seq_k > 0, "attention: empty key sequence");
  const std::size_t dh = d / n_heads;

  std::vector<double> out(n_seq * seq_q * d, 0.0);
  std::vector<double> probs(n_seq * n_heads * seq_q * seq_k);
  for (std::size_t s = 0; s < n_seq; ++s) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const double* qh = q.data() + s * seq_q * d + h * dh;
      const double* kh = k.data() + s * seq_k * d + h * dh;
      const double* vh = v.data() + s * seq_k * d + h * dh;
      double* p = probs.data() + (s * n_heads + h) * seq_q * seq_k;
      simd::gemm(false, true, seq_q, seq_k, dh, scale_factor, qh, d, kh, d, 0.0, p, seq_k);
      for (std::size_t i = 0; i < seq_q; ++i) softmax_row(p + i * seq_k, p + i * seq_k, seq_k, 1.0);
      simd::gemm(false, false, seq_q, dh, seq_k, 1.0, p, seq_k, vh, d, 0.0, out.data() + s * seq_q * d + h * dh, d);
    }
  }
  return ag::make_result({n_seq * seq_q, d}, std::move(out), {q, k, v},
                         [q, k, v, n_seq, seq_q, seq_k, n_heads, d, dh, scale_factor,
                          probs = std::move(probs)](Node& self) {
    double* gq = grad_of(q);
    double* gk = grad_of(k);
    double* gv = grad_of(v);
    std::vector<double> dp(seq_q * seq_k);
    for (std::size_t s = 0; s < n_seq; ++s) {
      for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t qoff = s * seq_q * d + h * dh;
        const std::size_t koff = s * seq_k * d + h * dh;
        const double* p = probs.data() + (s * n_heads + h) * seq_q * seq_k;
        const double* go = self.grad.data() + qoff;
        if (gv) simd::gemm(true, false, seq_k, dh, seq_q, 1.0, p, seq_k, go, d, 1.0, gv + koff, d);
        if (!gq && !gk) continue;
        simd::gemm(false, true, seq_q, seq_k, dh, 1.0, go, d, v.data() + koff, d, 0.0, dp.data(), seq_k);
        for (std::size_t i = 0; i < seq_q; ++i) {
          const double* pi = p + i * seq_k;
          double* di = dp.data() + i * seq_k;
          const double rs = simd::dot(di, pi, seq_k);
          for (std::size_t j = 0; j < seq_k; ++j) di[j] = pi[j] * (di[j] - rs);
        }
        if (gq) simd::gemm(false, false, seq_q, dh, seq_k, scale_factor, dp.data(), seq_k, k.data() + koff, d, 1.0, gq + qoff, d);
        if (gk) simd::gemm(true, false, seq_k, dh, seq_q, scale_factor, dp.data(), seq_k, q.data() + qoff, d, 1.0, gk + koff, d);
      }
    }
  });
}

namespace {
void apply_rotary(const RotaryTable& table, std::size_t n, std::size_t d, std::size_t n_heads, const double* in,
                  double* out, double sign) {
  const std::size_t dh = d / n_heads, pairs = table.pairs;
  for (std::size_t r = 0; r < n; ++r) {
    const double* src = in + r * d;
    double* dst = out + r * d;
    if (!table.active[r]) {
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      continue;
    }
    const double* cs = table.cos.data() + r * pairs;
    const double* sn = table.sin.data() + r * pairs;
    for (std::size_t h = 0; h < n_heads; ++h) {
      for (std::size_t i = 0; i < pairs; ++i) {
        const std::size_t a = h * dh + 2 * i;
        const double x0 = src[a], x1 = src[a + 1];
        dst[a] += x0 * cs[i] - sign * x1 * sn[i];
        dst[a + 1] += sign * x0 * sn[i] + x1 * cs[i];
      }
    }
  }
}
}  // namespace

Tensor rotary(const Tensor& x, std::size_t n_heads, const RotaryTable& table) {
  require_2d(x, "rotary");
  const std::size_t n = x.dim(0), d = x.dim(1);
  require(table.rows == n && table.active.size() == n, "rotary: table rows do not match input rows");
  require(n_heads > 0 && d % n_heads == 0 && (d / n_heads) == 2 * table.pairs,
          "rotary: pair count does not match head width");
  std::vector<double> out(n * d, 0.0);
  apply_rotary(table, n, d, n_heads, x.data(), out.data(), 1.0);
  return ag::make_result(x.shape(), std::move(out), {x}, [x, n, d, n_heads, table](Node& self) {
    if (double* gx = grad_of(x)) apply_rotary(table, n, d, n_heads, self.grad.data(), gx, -1.0);
  });
}

// ---------------------------------------------------------------------------
// volumes

namespace {

// cols [Cin*27, D*H*W]
void im2col3(const double* x, std::size_t cin, std::size_t D, std::size_t H, std::size_t W, double* cols) {
  const std::size_t vox = D * H * W;
  for (std::size_t c = 0; c < cin; ++c) {
    for (int kz = 0; kz < 3; ++kz)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          double* row = cols + ((c * 27) + kz * 9 + ky * 3 + kx) * vox;
          for (std::size_t z = 0; z < D; ++z) {
            const long sz = static_cast<long>(z) + kz - 1;
            for (std::size_t y = 0; y < H; ++y) {
              const long sy = static_cast<long>(y) + ky - 1;
              double* dst = row + (z * H + y) * W;
              if (sz < 0 || sz >= static_cast<long>(D) || sy < 0 || sy >= static_cast<long>(H)) {
                std::fill(dst, dst + W, 0.0);
                continue;
              }
              const double* src = x + ((c * D + sz) * H + sy) * W;
              for (std::size_t xx = 0; xx < W; ++xx) {
                const long sx = static_cast<long>(xx) + kx - 1;
                dst[xx] = (sx < 0 || sx >= static_cast<long>(W)) ? 0.0 : src[sx];
              }
            }
          }
        }
  }
}

void col2im3(const double* cols, std::size_t cin, std::size_t D, std::size_t H, std::size_t W, double* gx) {
  const std::size_t vox = D * H * W;
  for (std::size_t c = 0; c < cin; ++c) {
    for (int kz = 0; kz < 3; ++kz)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const double* row = cols + ((c * 27) + kz * 9 + ky * 3 + kx) * vox;
          for (std::size_t z = 0; z < D; ++z) {
            const long sz = static_cast<long>(z) + kz - 1;
            if (sz < 0 || sz >= static_cast<long>(D)) continue;
            for (std::size_t y = 0; y < H; ++y) {
              const long sy = static_cast<long>(y) + ky - 1;
              if (sy < 0 || sy >= static_cast<long>(H)) continue;
              const double* src = row + (z * H + y) * W;
              double* dst = gx + ((c * D + sz) * H + sy) * W;
              for (std::size_t xx = 0; xx < W; ++xx) {
                const long sx = static_cast<long>(xx) + kx - 1;
                if (sx >= 0 && sx < static_cast<long>(W)) dst[sx] += src[xx];
              }
            }
          }
        }
  }
}

struct AxisInterp {
  std::vector<std::size_t> i0, i1;
  std::vector<double> w1;
};

AxisInterp axis_interp(std::size_t in, std::size_t out) {
  AxisInterp a;
  a.i0.resize(out);
  a.i1.resize(out);
  a.w1.resize(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto f = static_cast<std::size_t>(std::floor(src));
    a.i0[o] = f;
    a.i1[o] = std::min(f + 1, in - 1);
    a.w1[o] = src - static_cast<double>(f);
  }
  return a;
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.rank() == 4, "conv3d: input must be [C,D,H,W]");
  const std::size_t cin = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(w.rank() == 2 && w.dim(1) == cin * 27, "conv3d: weight must be [Cout, Cin*27]");
  const std::size_t cout = w.dim(0);
  require(b.numel() == cout, "conv3d: bias size mismatch");
  const std::size_t vox = D * H * W;
  std::vector<double> cols(cin * 27 * vox);
  im2col3(x.data(), cin, D, H, W, cols.data());
  std::vector<double> out(cout * vox);
  for (std::size_t o = 0; o < cout; ++o) std::fill(out.begin() + o * vox, out.begin() + (o + 1) * vox, b.data()[o]);
  simd::gemm(false, false, cout, vox, cin * 27, 1.0, w.data(), cin * 27, cols.data(), vox, 1.0, out.data(), vox);
  return ag::make_result({cout, D, H, W}, std::move(out), {x, w, b},
                         [x, w, b, cin, cout, D, H, W, vox, cols = std::move(cols)](Node& self) {
    const double* g = self.grad.data();
    if (double* gw = grad_of(w)) simd::gemm(false, true, cout, cin * 27, vox, 1.0, g, vox, cols.data(), vox, 1.0, gw, cin * 27);
    if (double* gb = grad_of(b))
      for (std::size_t o = 0; o < cout; ++o) {
        double s = 0.0;
        for (std::size_t i = 0; i < vox; ++i) s += g[o * vox + i];
        gb[o] += s;
      }
    if (double* gx = grad_of(x)) {
      std::vector<double> dcols(cin * 27 * vox);
      simd::gemm(true, false, cin * 27, vox, cout, 1.0, w.data(), cin * 27, g, vox, 0.0, dcols.data(), vox);
      col2im3(dcols.data(), cin, D, H, W, gx);
    }
  });
}

Tensor resize_trilinear(const Tensor& x, std::size_t od, std::size_t oh, std::size_t ow) {
  require(x.rank() == 4, "resize_trilinear: input must be [C,D,H,W]");
  const std::size_t C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(od > 0 && oh > 0 && ow > 0 && D > 0 && H > 0 && W > 0, "resize_trilinear: empty extent");
  auto az = axis_interp(D, od), ay = axis_interp(H, oh), ax = axis_interp(W, ow);
  std::vector<double> out(C * od * oh * ow);
  auto visit = [=](auto&& fn) {
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t z = 0; z < od; ++z)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t xx = 0; xx < ow; ++xx) {
            const double wz1 = az.w1[z], wy1 = ay.w1[y], wx1 = ax.w1[xx];
            const std::size_t zs[2] = {az.i0[z], az.i1[z]}, ys[2] = {ay.i0[y], ay.i1[y]}, xs[2] = {ax.i0[xx], ax.i1[xx]};
            const double wz[2] = {1.0 - wz1, wz1}, wy[2] = {1.0 - wy1, wy1}, wx[2] = {1.0 - wx1, wx1};
            const std::size_t o = ((c * od + z) * oh + y) * ow + xx;
            for (int a = 0; a < 2; ++a)
              for (int bb = 0; bb < 2; ++bb)
                for (int e = 0; e < 2; ++e) fn(o, ((c * D + zs[a]) * H + ys[bb]) * W + xs[e], wz[a] * wy[bb] * wx[e]);
          }
  };
  const double* src = x.data();
  visit([&](std::size_t o, std::size_t i, double wgt) { out[o] += wgt * src[i]; });
  return ag::make_result({C, od, oh, ow}, std::move(out), {x}, [x, visit](Node& self) {
    if (double* gx = grad_of(x)) {
      const double* g = self.grad.data();
      visit([&](std::size_t o, std::size_t i, double wgt) { gx[i] += wgt * g[o]; });
    }
  });
}

// ---------------------------------------------------------------------------
// losses

Tensor soft_cross_entropy(const Tensor& logits, const Tensor& target_probs, double tau) {
  require(tau > 0.0, "soft_cross_entropy: temperature must be positive");
  require_same(logits, target_probs, "soft_cross_entropy");
  const std::size_t n = logits.rows(), c = logits.cols();
  require(n > 0, "soft_cross_entropy: no rows");
  const double inv_t = 1.0 / tau;
  std::vector<double> q(n * c);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = logits.data() + i * c;
    const double* p = target_probs.data() + i * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, z[j] * inv_t);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z[j] * inv_t - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) {
      const double lq = z[j] * inv_t - lse;
      q[i * c + j] = std::exp(lq);
      total -= p[j] * lq;
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  return ag::make_result({1}, {total * inv_n}, {logits}, [logits, target_probs, n, c, inv_t, inv_n, q = std::move(q)](Node& self) {
    double* gz = grad_of(logits);
    if (!gz) return;
    const double g = self.grad[0] * inv_n * inv_t;
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = target_probs.data() + i * c;
      double ps = 0.0;
      for (std::size_t j = 0; j < c; ++j) ps += p[j];
      for (std::size_t j = 0; j < c; ++j) gz[i * c + j] += g * (ps * q[i * c + j] - p[j]);
    }
  });
}

Tensor koleo(const Tensor& x, double eps) {
  const std::size_t n = x.rows(), d = x.cols();
  require(n >= 2, "koleo: needs at least two embeddings");
  std::vector<std::size_t> nn(n);
  std::vector<double> dist(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = i;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = x.data()[i * d + k] - x.data()[j * d + k];
        s += diff * diff;
      }
      if (s < best) {
        best = s;
        arg = j;
      }
    }
    nn[i] = arg;
    dist[i] = std::sqrt(best);
    total -= std::log(dist[i] + eps);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  return ag::make_result({1}, {total * inv_n}, {x}, [x, n, d, eps, inv_n, nn = std::move(nn), dist = std::move(dist)](Node& self) {
    double* gx = grad_of(x);
    if (!gx) return;
    for (std::size_t i = 0; i < n; ++i) {
      if (dist[i] <= 0.0) continue;
      const double coef = -self.grad[0] * inv_n / ((dist[i] + eps) * dist[i]);
      const std::size_t j = nn[i];
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = x.data()[i * d + k] - x.data()[j * d + k];
        gx[i * d + k] += coef * diff;
        gx[j * d + k] -= coef * diff;
      }
    }
  });
}

Tensor cox_nll(const Tensor& risks, std::span<const double> times, std::span<const std::uint8_t> events) {
  const std::size_t n = risks.numel();
  require(n >= 2, "cox_nll: needs at least two subjects");
  require(times.size() == n && events.size() == n, "cox_nll: length mismatch");
  require(std::any_of(events.begin(), events.end(), [](auto e) { return e != 0; }), "cox_nll: no observed events");
  const double* r = risks.data();
  const double mx = *std::max_element(r, r + n);
  // Subjects sorted by descending time; risk set of time t is every j with t_j >= t.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return times[a] > times[b]; });
  std::vector<double> risk_sum(n);  // per subject: sum of exp(r_j - mx) over its risk set
  double running = 0.0;
  for (std::size_t p = 0; p < n;) {
    std::size_t q = p;
    while (q < n && times[order[q]] == times[order[p]]) running += std::exp(r[order[q++]] - mx);
    for (std::size_t t = p; t < q; ++t) risk_sum[order[t]] = running;
    p = q;
  }
  double nll = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (events[i]) nll -= (r[i] - mx) - std::log(risk_sum[i]);
  std::vector<double> t(times.begin(), times.end());
  std::vector<std::uint8_t> e(events.begin(), events.end());
  return ag::make_result({1}, {nll}, {risks}, [risks, n, mx, t = std::move(t), e = std::move(e), risk_sum = std::move(risk_sum)](Node& self) {
    double* gr = grad_of(risks);
    if (!gr) return;
    const double g = self.grad[0];
    for (std::size_t k = 0; k < n; ++k) {
      const double ek = std::exp(risks.data()[k] - mx);
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        if (e[i] && t[k] >= t[i]) s += ek / risk_sum[i];
      gr[k] += g * (s - (e[k] ? 1.0 : 0.0));
    }
  });
}

Tensor mse(const Tensor& pred, std::span<const double> target) {
  require(pred.numel() == target.size() && !target.empty(), "mse: size mismatch");
  const std::size_t n = target.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += (pred.data()[i] - target[i]) * (pred.data()[i] - target[i]);
  std::vector<double> tg(target.begin(), target.end());
  return ag::make_result({1}, {s / static_cast<double>(n)}, {pred}, [pred, n, tg = std::move(tg)](Node& self) {
    if (double* gp = grad_of(pred))
      for (std::size_t i = 0; i < n; ++i) gp[i] += self.grad[0] * 2.0 * (pred.data()[i] - tg[i]) / static_cast<double>(n);
  });
}

Tensor l1(const Tensor& pred, std::span<const double> target) {
  require(pred.numel() == target.size() && !target.empty(), "l1: size mismatch");
  const std::size_t n = target.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::abs(pred.data()[i] - target[i]);
  std::vector<double> tg(target.begin(), target.end());
  return ag::make_result({1}, {s / static_cast<double>(n)}, {pred}, [pred, n, tg = std::move(tg)](Node& self) {
    if (double* gp = grad_of(pred))
      for (std::size_t i = 0; i < n; ++i) {
        const double diff = pred.data()[i] - tg[i];
        const double sg = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
        gp[i] += self.grad[0] * sg / static_cast<double>(n);
      }
  });
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> target) {
  require(logits.numel() == target.size() && !target.empty(), "bce_with_logits: size mismatch");
  const std::size_t n = target.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = logits.data()[i];
    s += std::max(z, 0.0) - z * target[i] + std::log1p(std::exp(-std::abs(z)));
  }
  std::vector<double> tg(target.begin(), target.end());
  return ag::make_result({1}, {s / static_cast<double>(n)}, {logits}, [logits, n, tg = std::move(tg)](Node& self) {
    if (double* gz = grad_of(logits))
      for (std::size_t i = 0; i < n; ++i) {
        const double sig = 1.0 / (1.0 + std::exp(-logits.data()[i]));
        gz[i] += self.grad[0] * (sig - tg[i]) / static_cast<double>(n);
      }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> labels) {
  const std::size_t n = logits.rows(), c = logits.cols();
  require(labels.size() == n && n > 0, "cross_entropy: label count mismatch");
  auto lsm = log_softmax_rows(logits);
  std::vector<double> onehot(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < c, "cross_entropy: label out of range");
    onehot[i * c + static_cast<std::size_t>(labels[i])] = -1.0 / static_cast<double>(n);
  }
  return sum(mul(lsm, Tensor::from(logits.shape(), std::move(onehot))));
}

Tensor cross_entropy_channels_first(const Tensor& logits, std::span<const std::int32_t> labels) {
  const std::size_t c = logits.rows(), n = logits.cols();
  require(labels.size() == n && n > 0, "cross_entropy_channels_first: label count mismatch");
  std::vector<double> q(c * n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, logits.data()[k * n + i]);
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += std::exp(logits.data()[k * n + i] - mx);
    for (std::size_t k = 0; k < c; ++k) q[k * n + i] = std::exp(logits.data()[k * n + i] - mx) / s;
    require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < c, "cross_entropy: label out of range");
    total -= logits.data()[static_cast<std::size_t>(labels[i]) * n + i] - mx - std::log(s);
  }
  std::vector<std::int32_t> lab(labels.begin(), labels.end());
  const double inv_n = 1.0 / static_cast<double>(n);
  return ag::make_result({1}, {total * inv_n}, {logits}, [logits, c, n, inv_n, q = std::move(q), lab = std::move(lab)](Node& self) {
    if (double* gz = grad_of(logits)) {
      const double g = self.grad[0] * inv_n;
      for (std::size_t k = 0; k < c; ++k)
        for (std::size_t i = 0; i < n; ++i)
          gz[k * n + i] += g * (q[k * n + i] - (static_cast<std::size_t>(lab[i]) == k ? 1.0 : 0.0));
    }
  });
}

}  // namespace volssl::ops
