#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "infobfr/image.hpp"
#include "infobfr/nn.hpp"
#include "infobfr/tensor_grid.hpp"
#include "infobfr/vae.hpp"

namespace infobfr {

/// Floor for the per-channel manifold std.
inline constexpr double kMinimalStd = 0.01;
inline constexpr double kDefaultLambdaCap = 1.0 - 1e-6;

/// Per-channel mean/std of HQ manifolds, the Gaussian that both the manifold R
/// and the replacement noise are assumed to follow.
struct ManifoldStats {
  std::vector<double> mu_qc;
  std::vector<double> sigma_qc;  ///< already floored at kMinimalStd
  int64_t sample_count = 0;
  std::string vae_hash;

  int channels() const { return static_cast<int>(mu_qc.size()); }
  void validate() const;

  /// 1 x C x 1 x 1 tensors for broadcasting.
  torch::Tensor mean_tensor() const;
  torch::Tensor std_tensor() const;

  void save(const std::filesystem::path& path) const;
  static ManifoldStats load(const std::filesystem::path& path);
};

/// Per-channel statistics over every spatial position of every manifold
/// (C x H x W tensors). Population std, floored at kMinimalStd. The result
/// does not depend on the order of `manifolds`.
ManifoldStats stats_from_manifolds(std::span<const torch::Tensor> manifolds,
                                   std::string vae_hash = {});

ManifoldStats compute_manifold_stats(const AutoencoderModel& model,
                                     std::span<const Image> hq_images, std::size_t n);

/// (R - mu) / max(sigma, o), per channel.
TensorGrid normalize(const TensorGrid& manifold, const ManifoldStats& stats);

/// 1x1 conv followed by sigmoid, capped at lambda_cap.
struct FilterHead {
  int channels = 8;
  double lambda_cap = kDefaultLambdaCap;
  WeightSet weights;  ///< filter.weight, filter.bias

  /// Zero weights and bias: lambda = 0.5 everywhere.
  static FilterHead create(int channels);
};

TensorGrid info_filter(const FilterHead& head, const TensorGrid& normalized);

enum class CompressMode { kTrain, kInfer };

/// Train: lambda * R + (1 - lambda) * eps, eps ~ N(mu_qc, sigma_qc^2) per channel.
/// Infer: lambda * R.
TensorGrid compress(const TensorGrid& manifold, const TensorGrid& lambda,
                    const ManifoldStats& stats, CompressMode mode, uint64_t seed);

/// KL[N(mean, std^2) || N(0, 1)] elementwise: -1/2 [log std^2 - std^2 - mean^2 + 1].
torch::Tensor kl_to_standard_normal(const torch::Tensor& mean, const torch::Tensor& std);

/// Closed-form KL between p(Z|R) = N(lambda R + (1 - lambda) mu, (1 - lambda)^2 sigma^2)
/// and N(mu, sigma^2), averaged over all elements:
///   -1/2 [log (1 - lambda)^2 - (1 - lambda)^2 - (lambda (R - mu) / sigma)^2 + 1].
torch::Tensor info_loss(const TensorGrid& manifold, const TensorGrid& lambda,
                        const ManifoldStats& stats, double lambda_cap = kDefaultLambdaCap);

}  // namespace infobfr
