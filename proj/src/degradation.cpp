#include "infobfr/degradation.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "infobfr/error.hpp"
#include "infobfr/rng.hpp"

namespace infobfr {

namespace {

void check_range(const char* field, double value, const Range& range) {
  if (!std::isfinite(value) || !range.contains(value)) {
    std::ostringstream msg;
    msg << field << " = " << value << " outside [" << range.lo << ", " << range.hi << "]";
    throw_invalid(msg.str());
  }
}

void check_ordered(const char* field, const Range& r) {
  if (!(std::isfinite(r.lo) && std::isfinite(r.hi) && r.lo <= r.hi)) {
    throw_invalid(std::string("degradation range ") + field + " is not an ordered finite pair");
  }
}

// Mirror without repeating the edge sample: d c b | a b c d | c b a.
int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n - 2;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

struct Tap {
  int index;
  float weight;
};

// Keys cubic convolution kernel with a = -0.5.
double cubic(double x) {
  x = std::abs(x);
  if (x <= 1.0) return (1.5 * x - 2.5) * x * x + 1.0;
  if (x < 2.0) return ((-0.5 * x + 2.5) * x - 4.0) * x + 2.0;
  return 0.0;
}

std::vector<std::vector<Tap>> bicubic_taps(int in_size, int out_size) {
  const double scale = static_cast<double>(out_size) / in_size;
  const double kernel_scale = std::min(scale, 1.0);
  const double support = 2.0 / kernel_scale;
  std::vector<std::vector<Tap>> taps(out_size);
  for (int o = 0; o < out_size; ++o) {
    const double center = (o + 0.5) / scale - 0.5;
    const int first = static_cast<int>(std::floor(center - support));
    const int last = static_cast<int>(std::ceil(center + support));
    double total = 0.0;
    std::vector<std::pair<int, double>> raw;
    for (int i = first; i <= last; ++i) {
      const double w = cubic((center - i) * kernel_scale);
      if (w == 0.0) continue;
      raw.emplace_back(std::clamp(i, 0, in_size - 1), w);
      total += w;
    }
    for (const auto& [idx, w] : raw) {
      taps[o].push_back({idx, static_cast<float>(w / total)});
    }
  }
  return taps;
}

// Applies per-row taps along x, then per-column taps along y.
std::vector<float> separable(const Image& img, int out_h, int out_w,
                             const std::vector<std::vector<Tap>>& taps_y,
                             const std::vector<std::vector<Tap>>& taps_x) {
  const int h = img.height();
  const int w = img.width();
  const int c = img.channels();
  const auto src = img.data();
  std::vector<float> tmp(static_cast<std::size_t>(h) * out_w * c, 0.0f);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (const Tap& t : taps_x[x]) {
          acc += t.weight * src[(static_cast<std::size_t>(y) * w + t.index) * c + ch];
        }
        tmp[(static_cast<std::size_t>(y) * out_w + x) * c + ch] = static_cast<float>(acc);
      }
    }
  }
  std::vector<float> out(static_cast<std::size_t>(out_h) * out_w * c, 0.0f);
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (const Tap& t : taps_y[y]) {
          acc += t.weight * tmp[(static_cast<std::size_t>(t.index) * out_w + x) * c + ch];
        }
        out[(static_cast<std::size_t>(y) * out_w + x) * c + ch] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

std::vector<std::vector<Tap>> gaussian_taps(int size, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    kernel[k + radius] = std::exp(-(k * k) / (2.0 * sigma * sigma));
    total += kernel[k + radius];
  }
  std::vector<std::vector<Tap>> taps(size);
  for (int o = 0; o < size; ++o) {
    for (int k = -radius; k <= radius; ++k) {
      taps[o].push_back({reflect_index(o + k, size), static_cast<float>(kernel[k + radius] / total)});
    }
  }
  return taps;
}

}  // namespace

void DegradationRanges::validate() const {
  check_ordered("blur_sigma", blur_sigma);
  check_ordered("down_scale", down_scale);
  check_ordered("noise_sigma", noise_sigma);
  check_ordered("jpeg_quality", jpeg_quality);
  if (blur_sigma.lo < 0.0 || down_scale.lo <= 0.0 || noise_sigma.lo < 0.0 ||
      jpeg_quality.lo < 1.0 || jpeg_quality.hi > 100.0) {
    throw_invalid("degradation ranges outside the operators' domains");
  }
}

void DegradationParams::validate(const DegradationRanges& ranges) const {
  check_range("blur_sigma", blur_sigma, ranges.blur_sigma);
  check_range("down_scale", down_scale, ranges.down_scale);
  check_range("noise_sigma", noise_sigma, ranges.noise_sigma);
  check_range("jpeg_quality", jpeg_quality, ranges.jpeg_quality);
}

void to_json(nlohmann::json& j, const DegradationParams& p) {
  j = {{"blur_sigma", p.blur_sigma},
       {"down_scale", p.down_scale},
       {"noise_sigma", p.noise_sigma},
       {"jpeg_quality", p.jpeg_quality}};
}

void to_json(nlohmann::json& j, const DegradationRanges& r) {
  j = {{"blur_sigma", {r.blur_sigma.lo, r.blur_sigma.hi}},
       {"down_scale", {r.down_scale.lo, r.down_scale.hi}},
       {"noise_sigma", {r.noise_sigma.lo, r.noise_sigma.hi}},
       {"jpeg_quality", {r.jpeg_quality.lo, r.jpeg_quality.hi}}};
}

void from_json(const nlohmann::json& j, DegradationRanges& r) {
  auto read = [&](const char* key, Range& range) {
    if (!j.contains(key)) return;
    const auto& pair = j.at(key);
    if (!pair.is_array() || pair.size() != 2) {
      throw_invalid(std::string("degradation.") + key + " must be a [lo, hi] pair");
    }
    range = {pair[0].get<double>(), pair[1].get<double>()};
  };
  for (const auto& [key, _] : j.items()) {
    if (key != "blur_sigma" && key != "down_scale" && key != "noise_sigma" && key != "jpeg_quality") {
      throw_invalid("unknown config key: degradation." + key);
    }
  }
  read("blur_sigma", r.blur_sigma);
  read("down_scale", r.down_scale);
  read("noise_sigma", r.noise_sigma);
  read("jpeg_quality", r.jpeg_quality);
  r.validate();
}

Image gaussian_blur(const Image& img, double sigma) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw_invalid("blur sigma must be >= 0");
  if (sigma == 0.0) return img;
  const auto ty = gaussian_taps(img.height(), sigma);
  const auto tx = gaussian_taps(img.width(), sigma);
  return make_clamped_image(img.height(), img.width(), img.channels(),
                            separable(img, img.height(), img.width(), ty, tx));
}

Image resize_bicubic(const Image& img, int out_height, int out_width) {
  if (out_height < 1 || out_width < 1) throw_invalid("resize target must be at least 1x1");
  if (out_height == img.height() && out_width == img.width()) return img;
  return make_clamped_image(out_height, out_width, img.channels(),
                            separable(img, out_height, out_width,
                                      bicubic_taps(img.height(), out_height),
                                      bicubic_taps(img.width(), out_width)));
}

Image resample(const Image& img, double factor, ResampleDirection direction) {
  if (!(factor > 0.0) || !std::isfinite(factor)) throw_invalid("resample factor must be > 0");
  auto target = [&](int dim) {
    const double v = direction == ResampleDirection::kDown ? dim / factor : dim * factor;
    return static_cast<int>(std::lround(v));
  };
  const int h = target(img.height());
  const int w = target(img.width());
  if (h < 1 || w < 1) throw_invalid("resample factor produces an empty image");
  return resize_bicubic(img, h, w);
}

Image add_gaussian_noise(const Image& img, double sigma255, DegradationSeed seed) {
  if (!(sigma255 >= 0.0) || !std::isfinite(sigma255)) throw_invalid("noise sigma must be >= 0");
  if (sigma255 == 0.0) return img;
  CounterRng rng(seed.value);
  const double sigma = sigma255 / 255.0;
  std::vector<float> out(img.data().begin(), img.data().end());
  for (float& v : out) v = static_cast<float>(v + sigma * rng.normal());
  return make_clamped_image(img.height(), img.width(), img.channels(), std::move(out));
}

Image jpeg_roundtrip(const Image& img, int quality) {
  if (quality < 1 || quality > 100) throw_invalid("JPEG quality must lie in [1, 100]");
  const int c = img.channels();
  cv::Mat mat(img.height(), img.width(), c == 1 ? CV_8UC1 : CV_8UC3);
  const auto d = img.data();
  for (int y = 0; y < img.height(); ++y) {
    uint8_t* row = mat.ptr<uint8_t>(y);
    for (int x = 0; x < img.width(); ++x) {
      for (int ch = 0; ch < c; ++ch) {
        // OpenCV stores colour as BGR.
        const int src_ch = c == 3 ? 2 - ch : ch;
        const float v = d[(static_cast<std::size_t>(y) * img.width() + x) * c + src_ch];
        row[x * c + ch] = static_cast<uint8_t>(std::lround(v * 255.0f));
      }
    }
  }
  std::vector<uint8_t> encoded;
  if (!cv::imencode(".jpg", mat, encoded, {cv::IMWRITE_JPEG_QUALITY, quality})) {
    throw_runtime("JPEG encoding failed");
  }
  const cv::Mat decoded = cv::imdecode(encoded, c == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
  if (decoded.empty()) throw_runtime("JPEG decoding failed");
  std::vector<float> out(img.size());
  for (int y = 0; y < img.height(); ++y) {
    const uint8_t* row = decoded.ptr<uint8_t>(y);
    for (int x = 0; x < img.width(); ++x) {
      for (int ch = 0; ch < c; ++ch) {
        const int dst_ch = c == 3 ? 2 - ch : ch;
        out[(static_cast<std::size_t>(y) * img.width() + x) * c + dst_ch] = row[x * c + ch] / 255.0f;
      }
    }
  }
  return Image(img.height(), img.width(), c, std::move(out));
}

Image degrade(const Image& img, const DegradationParams& params, DegradationSeed seed) {
  params.validate();
  Image x = gaussian_blur(img, params.blur_sigma);
  x = resample(x, params.down_scale, ResampleDirection::kDown);
  x = add_gaussian_noise(x, params.noise_sigma, seed);
  x = jpeg_roundtrip(x, params.jpeg_quality);
  return resize_bicubic(x, img.height(), img.width());
}

DegradationParams sample_params(DegradationSeed seed, const DegradationRanges& ranges) {
  ranges.validate();
  CounterRng rng(seed.value);
  DegradationParams p;
  p.blur_sigma = rng.uniform(ranges.blur_sigma.lo, ranges.blur_sigma.hi);
  p.down_scale = rng.uniform(ranges.down_scale.lo, ranges.down_scale.hi);
  p.noise_sigma = rng.uniform(ranges.noise_sigma.lo, ranges.noise_sigma.hi);
  const int q_lo = static_cast<int>(std::ceil(ranges.jpeg_quality.lo));
  const int q_hi = static_cast<int>(std::floor(ranges.jpeg_quality.hi));
  p.jpeg_quality = q_lo + static_cast<int>(rng.uniform() * (q_hi - q_lo + 1));
  p.jpeg_quality = std::min(p.jpeg_quality, q_hi);
  return p;
}

}  // namespace infobfr
