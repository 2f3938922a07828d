#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "infobfr/image.hpp"
#include "infobfr/nn.hpp"

namespace infobfr {

/// Frozen seeded conv net mapping an image to a D-dimensional descriptor
/// (global average pools of three pyramid levels, concatenated).
class FeatureExtractor {
 public:
  static FeatureExtractor create(uint64_t seed = 0xF1D, int dim = 64);

  int dim() const noexcept { return dim_; }
  /// One row per image.
  Eigen::MatrixXd features(std::span<const Image> images) const;
  std::string hash() const { return weights_.hash(); }

 private:
  int dim_ = 64;
  WeightSet weights_;
};

struct GaussianFit {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;

  /// Sample mean and (n - 1)-normalized covariance plus `shrinkage` * I.
  static GaussianFit fit(const Eigen::MatrixXd& samples, double shrinkage = 1e-6);
};

/// Symmetric PSD square root with negative eigenvalues floored at 0.
Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& m);
/// (S1 S2)^{1/2} computed through S1^{1/2} (S1^{1/2} S2 S1^{1/2})^{1/2} S1^{-1/2}.
Eigen::MatrixXd sqrtm_product(const Eigen::MatrixXd& s1, const Eigen::MatrixXd& s2);

/// ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}).
double frechet_distance(const GaussianFit& a, const GaussianFit& b);
double fid_from_features(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);
double fid(std::span<const Image> set_a, std::span<const Image> set_b, const FeatureExtractor& ex);
double fid(const std::filesystem::path& dir_a, const std::filesystem::path& dir_b,
           const FeatureExtractor& ex);

/// (x.y / D + 1)^3.
double polynomial_kernel(const Eigen::VectorXd& x, const Eigen::VectorXd& y);
/// Unbiased MMD^2 with the diagonal kernel terms excluded.
double mmd2_unbiased(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);

struct KidResult {
  double mean_x100 = 0.0;
  double std_x100 = 0.0;
  std::vector<double> block_values;  ///< raw MMD^2 per block
};

/// Rows are put in a canonical (content-sorted, seeded-shuffled) order, then
/// split into `block_count` disjoint blocks per set.
KidResult kid_from_features(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                            int block_count, uint64_t seed = 0);
KidResult kid(std::span<const Image> set_a, std::span<const Image> set_b,
              const FeatureExtractor& ex, int block_count);

struct GgdFit {
  double shape = 0.0;
  double variance = 0.0;
};

struct AggdFit {
  double shape = 0.0;
  double mean = 0.0;
  double left_variance = 0.0;
  double right_variance = 0.0;
};

GgdFit fit_ggd(std::span<const double> values);
AggdFit fit_aggd(std::span<const double> values);

inline constexpr int kNiqeFeaturesPerScale = 18;
inline constexpr int kNiqeScales = 2;
inline constexpr int kNiqeFeatureDim = kNiqeFeaturesPerScale * kNiqeScales;

/// Mean-subtracted contrast-normalized coefficients of a 0..255 luma plane.
std::vector<double> mscn_coefficients(const std::vector<double>& luma, int height, int width);

/// One 36-dim row per non-overlapping patch (patch_size at scale 1,
/// patch_size / 2 at scale 2).
Eigen::MatrixXd niqe_patch_features(const Image& img, int patch_size = 96);

struct NiqeModel {
  int patch_size = 96;
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;

  void save(const std::filesystem::path& path) const;
  static NiqeModel load(const std::filesystem::path& path);
};

inline constexpr std::size_t kMinNiqeImages = 50;

/// Gaussian fit over the patch features of every image and its mirror image.
NiqeModel fit_niqe_model(std::span<const Image> pristine, int patch_size = 96);
NiqeModel fit_niqe_model(const std::filesystem::path& pristine_dir, int patch_size = 96);

/// sqrt((nu1 - nu2)^T ((S1 + S2) / 2)^+ (nu1 - nu2)); lower is more natural.
double niqe(const Image& img, const NiqeModel& model);

}  // namespace infobfr
