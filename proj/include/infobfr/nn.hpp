#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace infobfr {

/// Ordered name -> tensor map holding the parameters of one network.
/// Networks in this library are written functionally against a WeightSet,
/// which keeps cloning, freezing, hashing and checkpointing uniform.
class WeightSet {
 public:
  void add(const std::string& name, torch::Tensor value);
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const torch::Tensor& at(const std::string& name) const;
  torch::Tensor& at(const std::string& name);

  const std::map<std::string, torch::Tensor>& items() const noexcept { return tensors_; }
  std::vector<torch::Tensor> parameters() const;
  int64_t numel() const;
  bool empty() const noexcept { return tensors_.empty(); }

  void set_requires_grad(bool flag);
  /// Deep copy, detached from any autograd graph.
  WeightSet clone() const;
  /// SHA-256 (hex) over names, shapes and raw float bytes, in name order.
  std::string hash() const;

 private:
  std::map<std::string, torch::Tensor> tensors_;
};

torch::Generator make_generator(uint64_t seed);

/// PyTorch-default (Kaiming-uniform, a = sqrt(5)) initialized conv/linear.
void add_conv(WeightSet& w, const std::string& name, int64_t in, int64_t out,
              int64_t kernel, torch::Generator& gen, bool bias = true);
void add_linear(WeightSet& w, const std::string& name, int64_t in, int64_t out,
                torch::Generator& gen);
void add_zero_conv(WeightSet& w, const std::string& name, int64_t in, int64_t out,
                   int64_t kernel);

/// Same-padding convolution using `weight`/`bias` supplied by the caller.
torch::Tensor conv2d(const torch::Tensor& x, const torch::Tensor& weight,
                     const torch::Tensor& bias, int64_t stride = 1);
torch::Tensor conv2d(const torch::Tensor& x, const WeightSet& w, const std::string& name,
                     int64_t stride = 1);
torch::Tensor linear(const torch::Tensor& x, const WeightSet& w, const std::string& name);

torch::Tensor upsample_nearest2x(const torch::Tensor& x);

}  // namespace infobfr
