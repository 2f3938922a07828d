#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "infobfr/attention.hpp"
#include "infobfr/bfr_stubs.hpp"
#include "infobfr/config.hpp"
#include "infobfr/diffusion.hpp"
#include "infobfr/losses.hpp"
#include "infobfr/mib.hpp"
#include "infobfr/vae.hpp"

namespace infobfr {

struct AblationFlags {
  bool use_transformer = true;
  bool use_mib = true;
  bool use_lora = true;
};

/// Frozen autoencoder + frozen base denoiser, with the trainable attention
/// block, filter head and LoRA adapters on top.
struct InfoBfrModel {
  std::shared_ptr<const AutoencoderModel> vae;
  DenoiserModel denoiser;  ///< adapted copy when flags.use_lora
  AttentionBlock attention;
  FilterHead filter;
  ManifoldStats stats;
  NoiseSchedule schedule;
  int64_t t_fix = 200;
  AblationFlags flags;

  std::vector<torch::Tensor> trainable_parameters() const;
  int64_t trainable_parameter_count() const;
  /// Autoencoder + base denoiser + every trainable tensor.
  int64_t total_parameter_count() const;
  /// Hashes of the frozen parts, used for the freeze contract.
  std::string frozen_hash() const;

  void save(const std::filesystem::path& path, const nlohmann::json& provenance) const;
};

/// Assembles a fresh (untrained) model from frozen prerequisites.
InfoBfrModel build_model(std::shared_ptr<const AutoencoderModel> vae,
                         const DenoiserModel& base_denoiser, ManifoldStats stats,
                         const RunConfig& config);

struct LoadedModel {
  InfoBfrModel model;
  RunConfig config;
  nlohmann::json meta;
};

/// Loads an InfoBFR checkpoint and the autoencoder/denoiser it references,
/// verifying their recorded hashes.
LoadedModel load_model(const std::filesystem::path& path);

struct ForwardOutputs {
  torch::Tensor restored;   ///< NCHW in [0, 1]
  TensorGrid manifold;      ///< R after the (optional) attention block
  TensorGrid lambda;
  TensorGrid compressed;
  torch::Tensor info_loss;  ///< scalar; zero when MIB is disabled
};

/// Whole generator on an NCHW batch of BFR outputs.
ForwardOutputs forward(const InfoBfrModel& model, const torch::Tensor& x_bfr, CompressMode mode,
                       uint64_t seed);

/// encode -> attend -> normalize -> filter -> compress(infer) -> split ->
/// mean latent -> one-step denoise -> decode.
Image restore(const InfoBfrModel& model, const Image& x_bfr);
torch::Tensor restore_batch(const InfoBfrModel& model, const torch::Tensor& x_bfr);

/// Same chain, but with `denoise_steps` predictor evaluations (a strided
/// DDIM-style chain starting at t_fix). Timing baseline only.
torch::Tensor restore_multistep(const InfoBfrModel& model, const torch::Tensor& x_bfr,
                                int denoise_steps);

/// Channel-averaged lambda map, bilinearly upsampled to the input size.
Image export_manifold_mask(const InfoBfrModel& model, const Image& x_bfr);

/// Frozen inputs the training loop consumes.
struct TrainInputs {
  std::shared_ptr<const AutoencoderModel> vae;
  std::shared_ptr<const DenoiserModel> denoiser;
  std::shared_ptr<const BfrModel> stub;
  ManifoldStats stats;
  std::vector<Image> hq_images;
};

struct CurveRow {
  int iteration = 0;
  double total = 0.0;
  double info = 0.0;
  double data = 0.0;
  double mean_lambda = 0.0;
};

struct TrainResult {
  InfoBfrModel model;
  std::vector<CurveRow> curve;
};

/// Builds one training pair set: HQ batch, degraded LQ, and stub output.
struct TrainingBatch {
  torch::Tensor hq;
  torch::Tensor bfr;
};
TrainingBatch synthesize_batch(const TrainInputs& inputs, const RunConfig& config,
                               uint64_t step_seed);

/// Optimizes only the attention block, filter head and adapters on
/// beta * info + data with AdamW.
TrainResult train(const RunConfig& config, const TrainInputs& inputs);

void write_curve_csv(const std::vector<CurveRow>& curve, const std::filesystem::path& path);

struct EvalPair {
  std::vector<Image> hq;
  std::vector<Image> bfr;
};

/// Held-out HQ images with their degraded + stub-restored counterparts.
EvalPair make_eval_pair(const std::vector<Image>& hq, const BfrModel& stub,
                        const DegradationRanges& ranges, uint64_t seed);

struct EvalSummary {
  double psnr_bfr = 0.0;
  double psnr_restored = 0.0;
  double fid_bfr = 0.0;
  double fid_restored = 0.0;
  double mean_lambda = 0.0;
};

EvalSummary evaluate(const InfoBfrModel& model, const EvalPair& pair);

struct AblationCell {
  AblationFlags flags;
  double beta = 20.0;
  int rank = 4;

  std::string label() const;
};

struct AblationRow {
  AblationCell cell;
  bool ok = false;
  std::string error;
  EvalSummary summary;
};

/// Table-3 style grid: toggles (a)-(e) at the configured beta, then the beta
/// and rank sweeps around the full model.
std::vector<AblationCell> ablation_grid(const RunConfig& config);

std::vector<AblationRow> ablate(const RunConfig& config, const TrainInputs& inputs,
                                std::span<const AblationCell> cells, const EvalPair& eval);

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path);

}  // namespace infobfr
