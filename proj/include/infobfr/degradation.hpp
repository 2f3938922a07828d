#pragma once

#include <cstdint>

#include <nlohmann/json.hpp>

#include "infobfr/image.hpp"

namespace infobfr {

struct Range {
  double lo;
  double hi;

  bool contains(double v) const noexcept { return v >= lo && v <= hi; }
};

/// Sampling ranges for the synthetic degradation. Defaults are the ranges used
/// for training data synthesis in blind face restoration.
struct DegradationRanges {
  Range blur_sigma{0.1, 12.0};
  Range down_scale{0.8, 8.0};
  Range noise_sigma{0.0, 20.0};
  Range jpeg_quality{30.0, 100.0};

  void validate() const;
};

struct DegradationParams {
  double blur_sigma = 0.1;
  double down_scale = 1.0;
  double noise_sigma = 0.0;  ///< on the 0..255 scale
  int jpeg_quality = 100;

  /// Throws unless every field lies inside `ranges`.
  void validate(const DegradationRanges& ranges = {}) const;
};

struct DegradationSeed {
  uint64_t value = 0;
};

void to_json(nlohmann::json& j, const DegradationParams& p);
void to_json(nlohmann::json& j, const DegradationRanges& r);
void from_json(const nlohmann::json& j, DegradationRanges& r);

/// Separable normalized Gaussian, radius ceil(3*sigma), reflect padding.
Image gaussian_blur(const Image& img, double sigma);

enum class ResampleDirection { kDown, kUp };

/// Bicubic resampling to round(dim / factor) (down) or round(dim * factor) (up).
Image resample(const Image& img, double factor, ResampleDirection direction);

/// Bicubic (Keys, a = -0.5) resize to an explicit size. Kernel support widens
/// when shrinking so downsampling is antialiased.
Image resize_bicubic(const Image& img, int out_height, int out_width);

Image add_gaussian_noise(const Image& img, double sigma255, DegradationSeed seed);

/// Baseline JPEG encode/decode at `quality` in [1, 100].
Image jpeg_roundtrip(const Image& img, int quality);

/// blur -> downsample(r) -> noise -> JPEG(q) -> upsample back to input size.
Image degrade(const Image& img, const DegradationParams& params, DegradationSeed seed);

DegradationParams sample_params(DegradationSeed seed, const DegradationRanges& ranges = {});

}  // namespace infobfr
