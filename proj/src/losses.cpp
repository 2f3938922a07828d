#include "infobfr/losses.hpp"

#include <cmath>

#include "infobfr/error.hpp"

namespace infobfr {

namespace {

constexpr std::array<int64_t, kPerceptualStages> kStageChannels{8, 16, 32, 32, 32};

void check_same_shape(const torch::Tensor& x, const torch::Tensor& y) {
  if (x.sizes() != y.sizes()) throw_invalid("loss inputs differ in shape");
}

}  // namespace

void LossWeights::validate() const {
  if (!(beta >= 0.0) || !(lambda_lpips >= 0.0)) throw_invalid("loss weights must be >= 0");
  for (double w : vgg_layer_weights) {
    if (!(w >= 0.0)) throw_invalid("perceptual layer weights must be >= 0");
  }
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"beta", w.beta}, {"lambda_lpips", w.lambda_lpips}, {"vgg_layer_weights", w.vgg_layer_weights}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  for (const auto& [key, _] : j.items()) {
    if (key != "beta" && key != "lambda_lpips" && key != "vgg_layer_weights") {
      throw_invalid("unknown config key: loss." + key);
    }
  }
  if (j.contains("beta")) w.beta = j.at("beta").get<double>();
  if (j.contains("lambda_lpips")) w.lambda_lpips = j.at("lambda_lpips").get<double>();
  if (j.contains("vgg_layer_weights")) {
    const auto v = j.at("vgg_layer_weights").get<std::vector<double>>();
    if (v.size() != kPerceptualStages) throw_invalid("loss.vgg_layer_weights needs exactly 5 entries");
    std::copy(v.begin(), v.end(), w.vgg_layer_weights.begin());
  }
  w.validate();
}

PerceptualNet PerceptualNet::create(uint64_t seed) {
  auto gen = make_generator(seed);
  PerceptualNet net;
  int64_t in = 3;
  for (int s = 0; s < kPerceptualStages; ++s) {
    const int64_t out = kStageChannels[s];
    const double std = std::sqrt(2.0 / static_cast<double>(in * 9));
    net.weights_.add("p" + std::to_string(s) + ".weight", torch::randn({out, in, 3, 3}, gen) * std);
    net.weights_.add("p" + std::to_string(s) + ".bias", torch::zeros({out}));
    in = out;
  }
  net.weights_.set_requires_grad(false);
  return net;
}

std::vector<torch::Tensor> PerceptualNet::taps(const torch::Tensor& images) const {
  auto x = images.size(1) == 1 ? images.expand({-1, 3, -1, -1}) : images;
  x = x * 2.0 - 1.0;
  std::vector<torch::Tensor> out;
  for (int s = 0; s < kPerceptualStages; ++s) {
    x = torch::silu(conv2d(x, weights_, "p" + std::to_string(s), 2));
    out.push_back(x);
  }
  return out;
}

torch::Tensor l2_loss(const torch::Tensor& x, const torch::Tensor& y) {
  check_same_shape(x, y);
  return (x - y).pow(2).mean();
}

double l2_loss(const Image& x, const Image& y) { return mean_squared_error(x, y); }

torch::Tensor perceptual_loss(const FeatureTaps& net, const torch::Tensor& x, const torch::Tensor& y,
                              const LossWeights& w) {
  check_same_shape(x, y);
  const auto fx = net.taps(x);
  const auto fy = net.taps(y);
  if (fx.size() != kPerceptualStages || fy.size() != kPerceptualStages) {
    throw_invalid("perceptual net must provide exactly 5 taps");
  }
  auto total = torch::zeros({}, x.options());
  for (int i = 0; i < kPerceptualStages; ++i) {
    const auto norms = torch::linalg_vector_norm((fx[i] - fy[i]).flatten(1), 2, {1});
    total = total + w.vgg_layer_weights[i] * norms.mean();
  }
  return total;
}

torch::Tensor lpips_like_loss(const FeatureTaps& net, const torch::Tensor& x, const torch::Tensor& y) {
  check_same_shape(x, y);
  const auto fx = net.taps(x);
  const auto fy = net.taps(y);
  if (fx.size() != fy.size() || fx.empty()) throw_invalid("feature taps disagree");
  auto unit = [](const torch::Tensor& f) {
    return f / (torch::sqrt((f * f).sum(1, true)) + 1e-10);
  };
  auto total = torch::zeros({}, x.options());
  for (std::size_t i = 0; i < fx.size(); ++i) {
    total = total + (unit(fx[i]) - unit(fy[i])).pow(2).sum(1).mean();
  }
  return total / static_cast<double>(fx.size());
}

DataLossParts data_loss_parts(const torch::Tensor& x, const torch::Tensor& y, const FeatureTaps& net,
                              const LossWeights& w) {
  DataLossParts parts;
  parts.l2 = l2_loss(x, y);
  parts.perceptual = perceptual_loss(net, x, y, w);
  parts.lpips = lpips_like_loss(net, x, y);
  parts.total = parts.l2 + parts.perceptual + w.lambda_lpips * parts.lpips;
  return parts;
}

torch::Tensor data_loss(const torch::Tensor& x, const torch::Tensor& y, const FeatureTaps& net,
                        const LossWeights& w) {
  return data_loss_parts(x, y, net, w).total;
}

double combine_data_loss(double l2, double perceptual, double lpips, const LossWeights& w) {
  return l2 + perceptual + w.lambda_lpips * lpips;
}

torch::Tensor total_loss(const torch::Tensor& info, const torch::Tensor& data, const LossWeights& w) {
  if (!std::isfinite(info.item<double>()) || !std::isfinite(data.item<double>())) {
    throw_runtime("non-finite loss component");
  }
  return w.beta * info + data;
}

double total_loss(double info, double data, const LossWeights& w) {
  if (!std::isfinite(info) || !std::isfinite(data)) throw_runtime("non-finite loss component");
  return w.beta * info + data;
}

}  // namespace infobfr
