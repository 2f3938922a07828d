#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "infobfr/image.hpp"
#include "infobfr/nn.hpp"
#include "infobfr/tensor_grid.hpp"

namespace infobfr {

inline constexpr int kManifoldChannels = 8;
inline constexpr int kLatentChannels = 4;
inline constexpr double kLogvarMin = -30.0;
inline constexpr double kLogvarMax = 20.0;

struct AutoencoderConfig {
  int image_channels = 3;
  int base_channels = 32;
  int downsample_factor = 4;  ///< 2, 4 or 8

  int stages() const;
  void validate() const;
};

struct AutoencoderTrainConfig {
  int iterations = 1500;
  int batch_size = 16;
  double lr = 2e-3;
  double kl_weight = 1e-6;
  uint64_t seed = 0;
};

/// Small convolutional autoencoder: encoder E and 1x1 quant-conv QC produce the
/// 8-channel manifold; post-quant 1x1 conv and decoder D map a 4-channel latent
/// back to an image.
class AutoencoderModel {
 public:
  static AutoencoderModel create(const AutoencoderConfig& config, uint64_t seed);

  const AutoencoderConfig& config() const noexcept { return config_; }

  /// R = QC(E(images)) for an NCHW batch in [0, 1].
  TensorGrid encode_manifold(const torch::Tensor& images) const;
  /// D(post_quant(z)), NCHW in [0, 1].
  torch::Tensor decode(const TensorGrid& latent) const;

  const WeightSet& weights() const noexcept { return weights_; }
  /// Only callable before freeze().
  WeightSet& mutable_weights();

  bool frozen() const noexcept { return frozen_; }
  void freeze();

  std::string hash() const { return weights_.hash(); }

  void save(const std::filesystem::path& path) const;
  static AutoencoderModel load(const std::filesystem::path& path);

 private:
  AutoencoderConfig config_;
  WeightSet weights_;
  bool frozen_ = false;
};

TensorGrid encode_manifold(const AutoencoderModel& model, const Image& img);
Image decode(const AutoencoderModel& model, const TensorGrid& latent);

/// Diagonal Gaussian posterior: channels 0-3 mean, 4-7 log-variance.
struct Moments {
  TensorGrid mean;
  TensorGrid logvar;
};

Moments split_moments(const TensorGrid& z8);
/// mean + exp(logvar / 2) * eps, or exactly mean when deterministic.
TensorGrid sample_latent(const Moments& moments, uint64_t seed, bool deterministic);

struct TrainingCurve {
  std::vector<double> losses;

  double first() const { return losses.empty() ? 0.0 : losses.front(); }
  double last() const { return losses.empty() ? 0.0 : losses.back(); }
  /// Mean of the first / last `window` entries.
  double head_mean(std::size_t window) const;
  double tail_mean(std::size_t window) const;
};

inline constexpr std::size_t kMinPretrainImages = 200;

AutoencoderModel pretrain_autoencoder(std::span<const Image> dataset,
                                      const AutoencoderConfig& config,
                                      const AutoencoderTrainConfig& train,
                                      TrainingCurve* curve = nullptr);

}  // namespace infobfr
