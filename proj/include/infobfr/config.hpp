#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "infobfr/bfr_stubs.hpp"
#include "infobfr/degradation.hpp"
#include "infobfr/diffusion.hpp"
#include "infobfr/losses.hpp"
#include "infobfr/vae.hpp"

namespace infobfr {

inline constexpr int kRunConfigVersion = 1;

struct PathsConfig {
  std::string hq_dir;    ///< HQ training images
  std::string val_dir;   ///< held-out HQ images
  std::string vae;       ///< autoencoder checkpoint
  std::string denoiser;  ///< base denoiser checkpoint
  std::string stub;      ///< BFR stub: "identity" or a stub checkpoint
  std::string stats;     ///< manifold stats file
};

struct DenoiserSection {
  DenoiserConfig model;
  DenoiserTrainConfig train;
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 2e-2;

  NoiseSchedule schedule() const { return NoiseSchedule::linear(steps, beta_start, beta_end); }
};

struct VaeSection {
  AutoencoderConfig model;
  AutoencoderTrainConfig train;
};

struct TrainSection {
  double lr = 1e-4;
  double weight_decay = 1e-2;
  int iterations = 2000;
  int batch_size = 1;
  int rank = 4;
  double lora_alpha = 4.0;
  int t_fix = 200;
  bool use_transformer = true;
  bool use_mib = true;
  bool use_lora = true;
  int log_every = 10;
};

struct AblateSection {
  std::vector<double> betas{1.0, 5.0, 10.0, 20.0};
  std::vector<int> ranks{2, 4, 8};
  bool toggles = true;  ///< include rows (a)-(d)
};

struct MetricsSection {
  int feature_dim = 64;
  int kid_blocks = 4;
  int niqe_patch = 96;
};

/// Complete, versioned description of a run. Unknown keys are rejected when
/// reading; every component seed derives from `seed`.
struct RunConfig {
  int version = kRunConfigVersion;
  uint64_t seed = 0;
  int image_size = 64;
  PathsConfig paths;
  DegradationRanges degradation;
  VaeSection vae;
  DenoiserSection denoiser;
  StubConfig stub;
  int stats_samples = 3000;
  LossWeights loss;
  TrainSection train;
  AblateSection ablate;
  MetricsSection metrics;

  void validate() const;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);

  static RunConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  /// Dotted-key override, e.g. "train.rank=8" or "loss.beta=5". The value is
  /// parsed as JSON when possible and as a plain string otherwise.
  void apply_override(const std::string& assignment);
};

/// Per-component seed streams.
enum class SeedStream : uint64_t {
  kVae = 1,
  kDenoiser,
  kStub,
  kTrain,
  kDegrade,
  kAblate,
  kToyset,
  kStats,
  kLora,
  kAttention,
};

uint64_t stream_seed(uint64_t root, SeedStream stream);

}  // namespace infobfr
