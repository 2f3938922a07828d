#pragma once

#include <cstdint>

#include "infobfr/nn.hpp"
#include "infobfr/tensor_grid.hpp"

namespace infobfr {

/// Single-head spatial self-attention over manifold positions with a residual
/// connection. Q, K, V and the output projection are 1x1 convolutions.
struct AttentionBlock {
  int channels = 8;
  WeightSet weights;  ///< attn.q, attn.k, attn.v, attn.out

  /// Q, K, V default-initialized; the output projection starts at zero.
  static AttentionBlock create(int channels, uint64_t seed);

  /// Softmax scale denominator is sqrt(channels).
  double scale_dim() const noexcept { return static_cast<double>(channels); }
};

/// OutProj(softmax(Q K^T / sqrt(d)) V) + R, tokens = spatial positions.
TensorGrid attend(const AttentionBlock& block, const TensorGrid& manifold);

/// The N x HW x HW row-stochastic attention matrix used by attend().
torch::Tensor attention_matrix(const AttentionBlock& block, const TensorGrid& manifold);

}  // namespace infobfr
