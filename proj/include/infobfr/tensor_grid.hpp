#pragma once

#include <torch/torch.h>

namespace infobfr {

/// Batched channel-major grid (N x C x H x W, float32). Carrier for
/// manifolds, latents and noise; autograd history travels with the tensor.
class TensorGrid {
 public:
  TensorGrid() = default;
  explicit TensorGrid(torch::Tensor data);

  const torch::Tensor& tensor() const noexcept { return data_; }

  int64_t batch() const { return data_.size(0); }
  int64_t channels() const { return data_.size(1); }
  int64_t height() const { return data_.size(2); }
  int64_t width() const { return data_.size(3); }

  bool same_shape(const TensorGrid& other) const {
    return data_.sizes() == other.data_.sizes();
  }

 private:
  torch::Tensor data_;
};

}  // namespace infobfr
