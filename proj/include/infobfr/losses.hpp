#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "infobfr/image.hpp"
#include "infobfr/nn.hpp"

namespace infobfr {

inline constexpr int kPerceptualStages = 5;

struct LossWeights {
  double beta = 20.0;
  double lambda_lpips = 2.0;
  std::array<double, kPerceptualStages> vgg_layer_weights{1.0 / 32, 1.0 / 16, 1.0 / 8,
                                                          1.0 / 4, 1.0};

  void validate() const;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

/// Anything that maps an NCHW image batch to five feature maps.
class FeatureTaps {
 public:
  virtual ~FeatureTaps() = default;
  virtual std::vector<torch::Tensor> taps(const torch::Tensor& images) const = 0;
};

/// Frozen, seeded random conv pyramid: five stride-2 conv + SiLU stages,
/// tapped after each stage. Stands in for VGG19 / LPIPS features.
class PerceptualNet : public FeatureTaps {
 public:
  static PerceptualNet create(uint64_t seed = 0x5eed);

  std::vector<torch::Tensor> taps(const torch::Tensor& images) const override;
  const WeightSet& weights() const noexcept { return weights_; }

 private:
  WeightSet weights_;
};

/// Mean squared error over all elements.
torch::Tensor l2_loss(const torch::Tensor& x, const torch::Tensor& y);
double l2_loss(const Image& x, const Image& y);

/// sum_i w_i ||F_i(x) - F_i(y)||_2 (unsquared norm per image, batch-averaged).
torch::Tensor perceptual_loss(const FeatureTaps& net, const torch::Tensor& x,
                              const torch::Tensor& y, const LossWeights& w);

/// Mean over stages of the spatially averaged squared difference between
/// channel-unit-normalized features.
torch::Tensor lpips_like_loss(const FeatureTaps& net, const torch::Tensor& x,
                              const torch::Tensor& y);

struct DataLossParts {
  torch::Tensor l2;
  torch::Tensor perceptual;
  torch::Tensor lpips;
  torch::Tensor total;
};

DataLossParts data_loss_parts(const torch::Tensor& x, const torch::Tensor& y,
                              const FeatureTaps& net, const LossWeights& w);
/// l2 + perceptual + lambda_lpips * lpips.
torch::Tensor data_loss(const torch::Tensor& x, const torch::Tensor& y,
                        const FeatureTaps& net, const LossWeights& w);
double combine_data_loss(double l2, double perceptual, double lpips, const LossWeights& w);

/// beta * info + data. Throws on non-finite inputs.
torch::Tensor total_loss(const torch::Tensor& info, const torch::Tensor& data,
                         const LossWeights& w);
double total_loss(double info, double data, const LossWeights& w);

}  // namespace infobfr
