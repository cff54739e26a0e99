#pragma once
// ReLU sign pattern of the segmentation decoder, for kink-aware gradient checks.

#include <cstdint>
#include <vector>

#include "volssl/ops.hpp"
#include "volssl/probe.hpp"

namespace volssl::testing {

/// Signs of both ReLU inputs of dec(tokens, grid, ...), recomputed from the
/// decoder's public weights.
inline std::vector<std::uint8_t> seg_relu_pattern(const probe::SegDecoder& dec, const ag::Tensor& tokens, const Dims& grid) {
  ag::NoGradGuard ng;
  std::vector<std::uint8_t> out;
  auto signs = [&](const ag::Tensor& a) {
    for (std::size_t i = 0; i < a.numel(); ++i) out.push_back(a.at(i) > 0.0);
  };
  const ag::Tensor x = ops::reshape(ops::transpose(tokens), {tokens.cols(), grid.d, grid.h, grid.w});
  const ag::Tensor a1 = ops::conv3d(x, dec.w1, dec.b1);
  signs(a1);
  const ag::Tensor h = ops::resize_trilinear(ops::relu(a1), grid.d * 2, grid.h * 2, grid.w * 2);
  signs(ops::conv3d(h, dec.w2, dec.b2));
  return out;
}

}  // namespace volssl::testing
