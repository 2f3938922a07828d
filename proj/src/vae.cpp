#include "infobfr/vae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "infobfr/checkpoint.hpp"
#include "infobfr/error.hpp"
#include "infobfr/rng.hpp"

namespace infobfr {

namespace {

torch::Tensor res_block(const torch::Tensor& x, const WeightSet& w, const std::string& name) {
  auto h = conv2d(torch::silu(x), w, name + ".conv1");
  h = conv2d(torch::silu(h), w, name + ".conv2");
  return x + h;
}

void add_res_block(WeightSet& w, const std::string& name, int64_t ch, torch::Generator& gen) {
  add_conv(w, name + ".conv1", ch, ch, 3, gen);
  add_conv(w, name + ".conv2", ch, ch, 3, gen);
}

nlohmann::json shapes_of(const WeightSet& w) {
  nlohmann::json shapes = nlohmann::json::object();
  for (const auto& [name, t] : w.items()) shapes[name] = t.sizes().vec();
  return shapes;
}

}  // namespace

int AutoencoderConfig::stages() const {
  int s = 0;
  for (int f = downsample_factor; f > 1; f /= 2) ++s;
  return s;
}

void AutoencoderConfig::validate() const {
  if (image_channels != 1 && image_channels != 3) throw_invalid("vae image_channels must be 1 or 3");
  if (base_channels < 4) throw_invalid("vae base_channels must be >= 4");
  if (downsample_factor != 2 && downsample_factor != 4 && downsample_factor != 8) {
    throw_invalid("vae downsample factor must be 2, 4 or 8");
  }
}

AutoencoderModel AutoencoderModel::create(const AutoencoderConfig& config, uint64_t seed) {
  config.validate();
  auto gen = make_generator(seed);
  const int64_t c = config.base_channels;
  const int64_t wide = 2 * c;
  AutoencoderModel model;
  model.config_ = config;
  WeightSet& w = model.weights_;

  add_conv(w, "enc.in", config.image_channels, c, 3, gen);
  int64_t ch = c;
  for (int s = 0; s < config.stages(); ++s) {
    add_conv(w, "enc.down" + std::to_string(s), ch, wide, 3, gen);
    ch = wide;
  }
  add_res_block(w, "enc.mid", wide, gen);
  add_conv(w, "enc.out", wide, kManifoldChannels, 3, gen);
  add_conv(w, "qc", kManifoldChannels, kManifoldChannels, 1, gen);

  add_conv(w, "pq", kLatentChannels, kLatentChannels, 1, gen);
  add_conv(w, "dec.in", kLatentChannels, wide, 3, gen);
  add_res_block(w, "dec.mid", wide, gen);
  for (int s = 0; s < config.stages(); ++s) {
    const bool last = s + 1 == config.stages();
    add_conv(w, "dec.up" + std::to_string(s), wide, last ? c : wide, 3, gen);
  }
  add_conv(w, "dec.out", c, config.image_channels, 3, gen);
  return model;
}

WeightSet& AutoencoderModel::mutable_weights() {
  if (frozen_) throw_runtime("autoencoder is frozen");
  return weights_;
}

void AutoencoderModel::freeze() {
  weights_.set_requires_grad(false);
  frozen_ = true;
}

TensorGrid AutoencoderModel::encode_manifold(const torch::Tensor& images) const {
  if (images.dim() != 4 || images.size(1) != config_.image_channels) {
    throw_invalid("encode_manifold expects N x " + std::to_string(config_.image_channels) +
                  " x H x W images");
  }
  const int f = config_.downsample_factor;
  if (images.size(2) % f != 0 || images.size(3) % f != 0) {
    throw_invalid("image dimensions must be divisible by the downsample factor " + std::to_string(f));
  }
  auto h = conv2d(images * 2.0 - 1.0, weights_, "enc.in");
  for (int s = 0; s < config_.stages(); ++s) {
    h = conv2d(torch::silu(h), weights_, "enc.down" + std::to_string(s), 2);
  }
  h = res_block(h, weights_, "enc.mid");
  h = conv2d(torch::silu(h), weights_, "enc.out");
  return TensorGrid(conv2d(h, weights_, "qc"));
}

torch::Tensor AutoencoderModel::decode(const TensorGrid& latent) const {
  if (latent.channels() != kLatentChannels) throw_invalid("decode expects a 4-channel latent");
  auto h = conv2d(latent.tensor(), weights_, "pq");
  h = conv2d(h, weights_, "dec.in");
  h = res_block(h, weights_, "dec.mid");
  for (int s = 0; s < config_.stages(); ++s) {
    h = conv2d(upsample_nearest2x(torch::silu(h)), weights_, "dec.up" + std::to_string(s));
  }
  h = conv2d(torch::silu(h), weights_, "dec.out");
  return torch::sigmoid(h);
}

void AutoencoderModel::save(const std::filesystem::path& path) const {
  Checkpoint ckpt;
  ckpt.meta = {{"kind", "autoencoder"},
               {"format_version", kCheckpointFormatVersion},
               {"image_channels", config_.image_channels},
               {"base_channels", config_.base_channels},
               {"downsample_factor", config_.downsample_factor},
               {"manifold_channels", kManifoldChannels},
               {"latent_channels", kLatentChannels},
               {"frozen", frozen_},
               {"hash", hash()},
               {"shapes", shapes_of(weights_)}};
  ckpt.sections["vae"] = weights_;
  ckpt.save(path);
}

AutoencoderModel AutoencoderModel::load(const std::filesystem::path& path) {
  const Checkpoint ckpt = Checkpoint::load(path);
  if (ckpt.meta.value("kind", "") != "autoencoder") {
    throw_invalid(path.string() + " is not an autoencoder checkpoint");
  }
  AutoencoderConfig config;
  config.image_channels = ckpt.meta.at("image_channels").get<int>();
  config.base_channels = ckpt.meta.at("base_channels").get<int>();
  config.downsample_factor = ckpt.meta.at("downsample_factor").get<int>();
  AutoencoderModel model = create(config, 0);
  const WeightSet& stored = ckpt.section("vae");
  for (const auto& [name, t] : model.weights_.items()) {
    if (!stored.contains(name) || stored.at(name).sizes() != t.sizes()) {
      throw_invalid("autoencoder checkpoint is missing or mis-shapes " + name);
    }
  }
  model.weights_ = stored.clone();
  if (ckpt.meta.value("frozen", true)) model.freeze();
  return model;
}

TensorGrid encode_manifold(const AutoencoderModel& model, const Image& img) {
  torch::NoGradGuard no_grad;
  return model.encode_manifold(to_tensor(img));
}

Image decode(const AutoencoderModel& model, const TensorGrid& latent) {
  torch::NoGradGuard no_grad;
  return from_tensor(model.decode(latent)[0]);
}

Moments split_moments(const TensorGrid& z8) {
  if (z8.channels() != kManifoldChannels) throw_invalid("split_moments expects 8 channels");
  auto parts = z8.tensor().chunk(2, 1);
  return {TensorGrid(parts[0]), TensorGrid(parts[1].clamp(kLogvarMin, kLogvarMax))};
}

TensorGrid sample_latent(const Moments& moments, uint64_t seed, bool deterministic) {
  if (deterministic) return moments.mean;
  auto gen = make_generator(seed);
  const auto eps = torch::randn(moments.mean.tensor().sizes(), gen);
  return TensorGrid(moments.mean.tensor() + torch::exp(0.5 * moments.logvar.tensor()) * eps);
}

double TrainingCurve::head_mean(std::size_t window) const {
  window = std::min(window, losses.size());
  if (window == 0) return 0.0;
  return std::accumulate(losses.begin(), losses.begin() + window, 0.0) / window;
}

double TrainingCurve::tail_mean(std::size_t window) const {
  window = std::min(window, losses.size());
  if (window == 0) return 0.0;
  return std::accumulate(losses.end() - window, losses.end(), 0.0) / window;
}

AutoencoderModel pretrain_autoencoder(std::span<const Image> dataset,
                                      const AutoencoderConfig& config,
                                      const AutoencoderTrainConfig& train,
                                      TrainingCurve* curve) {
  if (dataset.size() < kMinPretrainImages) {
    throw_invalid("autoencoder pretraining needs at least " + std::to_string(kMinPretrainImages) +
                  " images, got " + std::to_string(dataset.size()));
  }
  AutoencoderModel model = AutoencoderModel::create(config, derive_seed(train.seed, 1));
  WeightSet& w = model.mutable_weights();
  w.set_requires_grad(true);
  torch::optim::Adam opt(w.parameters(), torch::optim::AdamOptions(train.lr));

  const torch::Tensor all = to_tensor(dataset);
  CounterRng rng(derive_seed(train.seed, 2));
  const int64_t n = all.size(0);
  for (int it = 0; it < train.iterations; ++it) {
    std::vector<int64_t> idx(train.batch_size);
    for (auto& i : idx) i = static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(n));
    const auto batch = all.index_select(0, torch::tensor(idx));

    const auto moments = split_moments(model.encode_manifold(batch));
    const auto z = sample_latent(moments, derive_seed(train.seed, 1000 + it), false);
    const auto recon = model.decode(z);
    const auto rec_loss = torch::mse_loss(recon, batch);
    const auto& mean = moments.mean.tensor();
    const auto& logvar = moments.logvar.tensor();
    const auto kl = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).sum({1, 2, 3}).mean();
    const auto loss = rec_loss + train.kl_weight * kl;
    const double value = loss.item<double>();
    if (!std::isfinite(value)) throw_runtime("autoencoder loss became non-finite at step " + std::to_string(it));
    if (curve) curve->losses.push_back(value);

    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  model.freeze();
  return model;
}

}  // namespace infobfr
