#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "infobfr/image.hpp"
#include "infobfr/nn.hpp"
#include "infobfr/tensor_grid.hpp"
#include "infobfr/vae.hpp"

namespace infobfr {

/// Discrete DDPM variance schedule, t in [0, T).
class NoiseSchedule {
 public:
  /// Linearly spaced beta_t from beta_start to beta_end.
  static NoiseSchedule linear(int steps = 1000, double beta_start = 1e-4,
                              double beta_end = 2e-2);
  static NoiseSchedule from_betas(std::vector<double> betas);

  int steps() const noexcept { return static_cast<int>(betas_.size()); }
  double beta(int64_t t) const;
  double alpha_bar(int64_t t) const;
  std::span<const double> alpha_bars() const noexcept { return alpha_bars_; }

 private:
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
};

struct DenoiserConfig {
  int latent_channels = kLatentChannels;
  int channels = 64;
  int time_embed_dim = 64;

  void validate() const;
};

struct DenoiserTrainConfig {
  int iterations = 1500;
  int batch_size = 32;
  double lr = 2e-3;
  uint64_t seed = 0;
};

/// Low-rank factors for every adapted layer: W = W_base + (alpha / rank) B A,
/// A is rank x fan_in, B is out x rank and starts at zero.
struct LoraAdapterSet {
  int rank = 4;
  double alpha = 4.0;
  WeightSet factors;  ///< "<layer>.A" and "<layer>.B"

  double scaling() const noexcept { return alpha / rank; }
  bool adapts(const std::string& layer) const { return factors.contains(layer + ".A"); }
  /// (alpha / rank) * B A reshaped to the base weight's shape.
  torch::Tensor delta(const std::string& layer, at::IntArrayRef weight_shape) const;
};

/// Small UNet noise predictor eps(z_t, c, t) over 4-channel latents. The
/// conditioning c is a learned null token added to the timestep embedding.
class DenoiserModel {
 public:
  static DenoiserModel create(const DenoiserConfig& config, uint64_t seed);

  const DenoiserConfig& config() const noexcept { return config_; }

  /// Counts one forward evaluation per call.
  torch::Tensor predict_noise(const torch::Tensor& z, int64_t t) const;
  torch::Tensor predict_noise(const torch::Tensor& z, const torch::Tensor& t) const;

  const WeightSet& base() const noexcept { return base_; }
  WeightSet& mutable_base();
  bool frozen() const noexcept { return frozen_; }
  void freeze();

  bool has_lora() const noexcept { return lora_.has_value(); }
  const LoraAdapterSet& lora() const;
  LoraAdapterSet& mutable_lora();
  void set_lora(std::optional<LoraAdapterSet> lora) { lora_ = std::move(lora); }

  /// Conv and linear weight names (without ".weight"), in a fixed order.
  std::vector<std::string> adaptable_layers() const;
  /// Weight the forward pass uses for `layer`: base plus LoRA delta if adapted.
  torch::Tensor effective_weight(const std::string& layer) const;

  int64_t forward_count() const noexcept { return calls_->load(); }
  void reset_forward_count() const noexcept { calls_->store(0); }

  int64_t total_parameter_count() const;
  int64_t trainable_parameter_count() const;

  std::string hash() const { return base_.hash(); }

  /// Base weights only; adapters travel in the InfoBFR checkpoint.
  void save(const std::filesystem::path& path) const;
  static DenoiserModel load(const std::filesystem::path& path);

  DenoiserModel clone() const;

 private:
  torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& t) const;

  DenoiserConfig config_;
  WeightSet base_;
  std::optional<LoraAdapterSet> lora_;
  bool frozen_ = false;
  std::shared_ptr<std::atomic<int64_t>> calls_ = std::make_shared<std::atomic<int64_t>>(0);
};

/// Sinusoidal timestep features (N x dim).
torch::Tensor timestep_embedding(const torch::Tensor& t, int dim);

/// Copy of `model` with frozen base weights and zero-initialized adapters of the
/// given rank on every conv and linear layer; only adapters are trainable.
DenoiserModel inject_lora(const DenoiserModel& model, int rank, double alpha, uint64_t seed);

/// Folds adapters into the base weights and drops them. A model without
/// adapters is returned unchanged.
DenoiserModel merge_lora(const DenoiserModel& model);

using NoisePredictor = std::function<torch::Tensor(const torch::Tensor& z, int64_t t)>;

/// z0 = z / sqrt(abar) - sqrt(1 - abar) * eps / sqrt(abar).
torch::Tensor one_step_denoise(const torch::Tensor& z, const torch::Tensor& eps, double alpha_bar);
TensorGrid one_step_denoise(const NoisePredictor& predictor, const TensorGrid& z, int64_t t_fix,
                            const NoiseSchedule& schedule);
TensorGrid one_step_denoise(const DenoiserModel& model, const TensorGrid& z, int64_t t_fix,
                            const NoiseSchedule& schedule);

/// Clean latents used as diffusion training targets: mean half of QC(E(x)).
torch::Tensor clean_latents(const AutoencoderModel& vae, const torch::Tensor& images);

/// Standard epsilon-prediction objective E||eps - eps(sqrt(abar) z + sqrt(1 - abar) eps, c, t)||^2.
torch::Tensor ldm_loss(const DenoiserModel& model, const NoiseSchedule& schedule,
                       const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps);

DenoiserModel pretrain_denoiser(const AutoencoderModel& vae, std::span<const Image> hq_images,
                                const NoiseSchedule& schedule, const DenoiserConfig& config,
                                const DenoiserTrainConfig& train, TrainingCurve* curve = nullptr);

}  // namespace infobfr
