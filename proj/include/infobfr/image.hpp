#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <torch/torch.h>

namespace infobfr {

/// Height x width x channels raster with values in [0, 1], stored row-major
/// (HWC interleaved). Construction validates range and finiteness, so every
/// Image that exists satisfies the invariant; producers clamp before building.
class Image {
 public:
  Image(int height, int width, int channels, std::vector<float> data);

  static Image filled(int height, int width, int channels, float value);

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  int channels() const noexcept { return channels_; }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<const float> data() const noexcept { return data_; }

  float at(int y, int x, int c) const {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }

  bool same_shape(const Image& other) const noexcept {
    return height_ == other.height_ && width_ == other.width_ &&
           channels_ == other.channels_;
  }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  int height_;
  int width_;
  int channels_;
  std::vector<float> data_;
};

/// Builds an Image from arbitrary floats, clamping into [0, 1]. NaN maps to 0.
Image make_clamped_image(int height, int width, int channels, std::vector<float> data);

Image load_image(const std::filesystem::path& path);
void save_image(const Image& img, const std::filesystem::path& path);

/// 10*log10(1/MSE); +infinity when the images are identical.
double psnr(const Image& a, const Image& b);
double mean_squared_error(const Image& a, const Image& b);

/// PNG files of a directory in lexicographic order of file name.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);
std::vector<Image> load_image_dir(const std::filesystem::path& dir);

/// Stacks images into an NCHW float tensor. All images must share a shape.
torch::Tensor to_tensor(std::span<const Image> images);
torch::Tensor to_tensor(const Image& image);

/// Converts one CHW (or 1xCHW) tensor back to an Image, clamping to [0, 1].
Image from_tensor(const torch::Tensor& chw);
std::vector<Image> from_batch(const torch::Tensor& nchw);

/// ITU-R BT.601 luma in [0, 1]; single-channel images are returned as is.
Image to_grayscale(const Image& img);

}  // namespace infobfr
