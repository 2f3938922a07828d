#include "infobfr/image.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "infobfr/error.hpp"
#include "infobfr/tensor_grid.hpp"

namespace infobfr {

Image::Image(int height, int width, int channels, std::vector<float> data)
    : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
  if (height < 1 || width < 1) throw_invalid("image dimensions must be positive");
  if (channels != 1 && channels != 3) throw_invalid("image channels must be 1 or 3");
  if (data_.size() != static_cast<std::size_t>(height) * width * channels) {
    throw_invalid("image data length does not match its shape");
  }
  for (float v : data_) {
    if (!(v >= 0.0f && v <= 1.0f)) throw_invalid("image values must be finite and within [0, 1]");
  }
}

Image Image::filled(int height, int width, int channels, float value) {
  return Image(height, width, channels,
               std::vector<float>(static_cast<std::size_t>(height) * width * channels, value));
}

Image make_clamped_image(int height, int width, int channels, std::vector<float> data) {
  for (float& v : data) {
    v = std::isnan(v) ? 0.0f : std::clamp(v, 0.0f, 1.0f);
  }
  return Image(height, width, channels, std::move(data));
}

Image load_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw_missing("image not found: " + path.string());
  const cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (raw.empty()) throw_invalid("cannot decode image: " + path.string());
  if (raw.depth() != CV_8U) throw_invalid("only 8-bit images are supported: " + path.string());

  cv::Mat mat;
  switch (raw.channels()) {
    case 1: mat = raw; break;
    case 3: cv::cvtColor(raw, mat, cv::COLOR_BGR2RGB); break;
    case 4: cv::cvtColor(raw, mat, cv::COLOR_BGRA2RGB); break;
    default: throw_invalid("unsupported channel count in " + path.string());
  }
  const int c = mat.channels();
  std::vector<float> data(static_cast<std::size_t>(mat.rows) * mat.cols * c);
  for (int y = 0; y < mat.rows; ++y) {
    const uint8_t* row = mat.ptr<uint8_t>(y);
    for (int i = 0; i < mat.cols * c; ++i) {
      data[static_cast<std::size_t>(y) * mat.cols * c + i] = row[i] / 255.0f;
    }
  }
  return Image(mat.rows, mat.cols, c, std::move(data));
}

void save_image(const Image& img, const std::filesystem::path& path) {
  if (path.empty()) throw_invalid("empty output path");
  const int c = img.channels();
  cv::Mat mat(img.height(), img.width(), c == 1 ? CV_8UC1 : CV_8UC3);
  const auto data = img.data();
  for (int y = 0; y < img.height(); ++y) {
    uint8_t* row = mat.ptr<uint8_t>(y);
    for (int i = 0; i < img.width() * c; ++i) {
      const float v = data[static_cast<std::size_t>(y) * img.width() * c + i];
      row[i] = static_cast<uint8_t>(std::lround(v * 255.0f));
    }
  }
  if (c == 3) cv::cvtColor(mat, mat, cv::COLOR_RGB2BGR);
  bool written = false;
  try {
    written = cv::imwrite(path.string(), mat, {cv::IMWRITE_PNG_COMPRESSION, 6});
  } catch (const cv::Exception& e) {
    throw_runtime("cannot write " + path.string() + ": " + e.what());
  }
  if (!written) throw_runtime("cannot write " + path.string());
}

double mean_squared_error(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw_invalid("shape mismatch");
  const auto da = a.data();
  const auto db = b.data();
  double sum = 0.0;
  for (std::size_t i = 0; i < da.size(); ++i) {
    const double d = static_cast<double>(da[i]) - db[i];
    sum += d * d;
  }
  return sum / static_cast<double>(da.size());
}

double psnr(const Image& a, const Image& b) {
  const double mse = mean_squared_error(a, b);
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw_missing("image directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end(),
            [](const auto& a, const auto& b) { return a.filename() < b.filename(); });
  return files;
}

std::vector<Image> load_image_dir(const std::filesystem::path& dir) {
  std::vector<Image> images;
  for (const auto& path : list_images(dir)) images.push_back(load_image(path));
  return images;
}

torch::Tensor to_tensor(std::span<const Image> images) {
  if (images.empty()) throw_invalid("empty image batch");
  const Image& first = images.front();
  const int64_t h = first.height();
  const int64_t w = first.width();
  const int64_t c = first.channels();
  auto out = torch::empty({static_cast<int64_t>(images.size()), h, w, c});
  float* dst = out.data_ptr<float>();
  for (const Image& img : images) {
    if (!img.same_shape(first)) throw_invalid("images in a batch must share a shape");
    std::copy(img.data().begin(), img.data().end(), dst);
    dst += img.size();
  }
  return out.permute({0, 3, 1, 2}).contiguous();
}

torch::Tensor to_tensor(const Image& image) { return to_tensor(std::span<const Image>(&image, 1)); }

Image from_tensor(const torch::Tensor& chw) {
  torch::Tensor t = chw.detach().to(torch::kFloat32);
  if (t.dim() == 4) {
    if (t.size(0) != 1) throw_invalid("from_tensor expects a single image");
    t = t.squeeze(0);
  }
  if (t.dim() != 3) throw_invalid("from_tensor expects a CHW tensor");
  const int c = static_cast<int>(t.size(0));
  const int h = static_cast<int>(t.size(1));
  const int w = static_cast<int>(t.size(2));
  t = t.permute({1, 2, 0}).contiguous();
  std::vector<float> data(t.data_ptr<float>(), t.data_ptr<float>() + t.numel());
  return make_clamped_image(h, w, c, std::move(data));
}

std::vector<Image> from_batch(const torch::Tensor& nchw) {
  std::vector<Image> out;
  out.reserve(nchw.size(0));
  for (int64_t i = 0; i < nchw.size(0); ++i) out.push_back(from_tensor(nchw[i]));
  return out;
}

Image to_grayscale(const Image& img) {
  if (img.channels() == 1) return img;
  std::vector<float> luma(static_cast<std::size_t>(img.height()) * img.width());
  const auto d = img.data();
  for (std::size_t i = 0; i < luma.size(); ++i) {
    luma[i] = 0.299f * d[3 * i] + 0.587f * d[3 * i + 1] + 0.114f * d[3 * i + 2];
  }
  return make_clamped_image(img.height(), img.width(), 1, std::move(luma));
}

TensorGrid::TensorGrid(torch::Tensor data) : data_(std::move(data)) {
  if (!data_.defined() || data_.dim() != 4) throw_invalid("TensorGrid expects an NCHW tensor");
  if (data_.size(0) < 1 || data_.size(1) < 1 || data_.size(2) < 1 || data_.size(3) < 1) {
    throw_invalid("TensorGrid dimensions must be positive");
  }
  if (data_.scalar_type() != torch::kFloat32) throw_invalid("TensorGrid must be float32");
  if (!torch::isfinite(data_.detach()).all().item<bool>()) {
    throw_runtime("TensorGrid contains non-finite values");
  }
}

}  // namespace infobfr
