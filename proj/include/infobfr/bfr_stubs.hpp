#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>

#include "infobfr/degradation.hpp"
#include "infobfr/image.hpp"
#include "infobfr/nn.hpp"
#include "infobfr/vae.hpp"

namespace infobfr {

/// A pre-trained restorer F_BFR. Shape- and range-preserving, deterministic.
class BfrModel {
 public:
  virtual ~BfrModel() = default;
  virtual const std::string& name() const = 0;
  /// NCHW batch in [0, 1] -> same shape in [0, 1].
  virtual torch::Tensor restore(const torch::Tensor& images) const = 0;

  Image restore(const Image& img) const;
};

std::shared_ptr<const BfrModel> identity_bfr();

enum class StubKind { kArtifact, kPriorBias };

std::string to_string(StubKind kind);
StubKind stub_kind_from_string(const std::string& name);

struct StubConfig {
  StubKind kind = StubKind::kArtifact;
  int channels = 16;
  int iterations = 800;
  int batch_size = 16;
  double lr = 3e-3;
  /// Weight of the pull towards the dataset-mean image (prior-bias stub only).
  double mean_weight = 0.3;
  uint64_t seed = 0;
  DegradationRanges ranges;
};

/// Capacity-starved convolutional restorer trained on (degrade(x), x) pairs.
/// Both kinds squeeze through a stride-8 bottleneck and upsample with nearest
/// neighbours; the prior-bias stub is half as wide and is pulled towards the
/// mean training image.
class ConvBfrStub : public BfrModel {
 public:
  ConvBfrStub(std::string name, StubConfig config, WeightSet weights, torch::Tensor mean_image);

  const std::string& name() const override { return name_; }
  torch::Tensor restore(const torch::Tensor& images) const override;
  using BfrModel::restore;

  const StubConfig& config() const noexcept { return config_; }
  const WeightSet& weights() const noexcept { return weights_; }
  const torch::Tensor& mean_image() const noexcept { return mean_image_; }
  std::string hash() const { return weights_.hash(); }

  void save(const std::filesystem::path& path) const;
  static std::shared_ptr<const ConvBfrStub> load(const std::filesystem::path& path);

  /// Untrained stub with freshly initialized weights.
  static ConvBfrStub create(const StubConfig& config, torch::Tensor mean_image);

 private:
  std::string name_;
  StubConfig config_;
  WeightSet weights_;
  torch::Tensor mean_image_;
};

std::shared_ptr<const ConvBfrStub> train_stub(std::span<const Image> train_images,
                                              const StubConfig& config,
                                              TrainingCurve* curve = nullptr);
std::shared_ptr<const ConvBfrStub> artifact_bfr(std::span<const Image> train_images,
                                                StubConfig config);
std::shared_ptr<const ConvBfrStub> prior_bias_bfr(std::span<const Image> train_images,
                                                  StubConfig config);

/// Name -> stub lookup with stable identity. "identity" is pre-registered;
/// anything else resolves as a checkpoint path and is cached on first use.
class BfrRegistry {
 public:
  BfrRegistry();

  void add(const std::string& name, std::shared_ptr<const BfrModel> model);
  std::shared_ptr<const BfrModel> get(const std::string& name_or_path);

 private:
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<const BfrModel>> models_;
};

/// Mean variance of the 4-neighbour Laplacian of the luma channel.
double laplacian_variance(const Image& img);

}  // namespace infobfr
