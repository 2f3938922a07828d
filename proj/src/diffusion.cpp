#include "infobfr/diffusion.hpp"

#include <cmath>
#include <numbers>

#include "infobfr/checkpoint.hpp"
#include "infobfr/error.hpp"
#include "infobfr/rng.hpp"

namespace infobfr {

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw_invalid("schedule needs at least one step");
  std::vector<double> betas(steps);
  for (int t = 0; t < steps; ++t) {
    betas[t] = steps == 1 ? beta_start
                          : beta_start + (beta_end - beta_start) * t / static_cast<double>(steps - 1);
  }
  return from_betas(std::move(betas));
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  if (betas.empty()) throw_invalid("schedule needs at least one step");
  NoiseSchedule s;
  s.alpha_bars_.resize(betas.size());
  double running = 1.0;
  for (std::size_t t = 0; t < betas.size(); ++t) {
    if (!(betas[t] >= 0.0 && betas[t] < 1.0)) throw_invalid("beta_t must lie in [0, 1)");
    running *= 1.0 - betas[t];
    s.alpha_bars_[t] = running;
  }
  s.betas_ = std::move(betas);
  return s;
}

double NoiseSchedule::beta(int64_t t) const {
  if (t < 0 || t >= steps()) throw_invalid("timestep out of range");
  return betas_[t];
}

double NoiseSchedule::alpha_bar(int64_t t) const {
  if (t < 0 || t >= steps()) {
    throw_invalid("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps()) + ")");
  }
  return alpha_bars_[t];
}

void DenoiserConfig::validate() const {
  if (latent_channels < 1) throw_invalid("denoiser latent_channels must be positive");
  if (channels < 8 || channels % 8 != 0) throw_invalid("denoiser channels must be a positive multiple of 8");
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0) throw_invalid("time_embed_dim must be even");
}

torch::Tensor LoraAdapterSet::delta(const std::string& layer, at::IntArrayRef weight_shape) const {
  const auto& a = factors.at(layer + ".A");
  const auto& b = factors.at(layer + ".B");
  return (scaling() * torch::mm(b, a)).view(weight_shape);
}

namespace {

void add_res_block(WeightSet& w, const std::string& name, int64_t ch, int64_t emb,
                   torch::Generator& gen) {
  add_conv(w, name + ".conv1", ch, ch, 3, gen);
  add_linear(w, name + ".emb", emb, ch, gen);
  add_conv(w, name + ".conv2", ch, ch, 3, gen);
}

constexpr int64_t kGroups = 8;

}  // namespace

torch::Tensor timestep_embedding(const torch::Tensor& t, int dim) {
  const int half = dim / 2;
  const auto idx = torch::arange(half, torch::kFloat32);
  const auto freqs = torch::exp(-std::log(10000.0) * idx / half);
  const auto args = t.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::cos(args), torch::sin(args)}, 1);
}

DenoiserModel DenoiserModel::create(const DenoiserConfig& config, uint64_t seed) {
  config.validate();
  auto gen = make_generator(seed);
  DenoiserModel m;
  m.config_ = config;
  WeightSet& w = m.base_;
  const int64_t c = config.channels;
  const int64_t emb = 2 * config.time_embed_dim;

  add_linear(w, "time.fc1", config.time_embed_dim, emb, gen);
  add_linear(w, "time.fc2", emb, emb, gen);
  w.add("cond.null", torch::zeros({emb}));
  add_conv(w, "in", config.latent_channels, c, 3, gen);
  add_res_block(w, "d0", c, emb, gen);
  add_conv(w, "down", c, 2 * c, 3, gen);
  add_res_block(w, "m0", 2 * c, emb, gen);
  add_res_block(w, "m1", 2 * c, emb, gen);
  add_conv(w, "up", 2 * c, c, 3, gen);
  add_conv(w, "u0.skip", 2 * c, c, 1, gen);
  add_res_block(w, "u0", c, emb, gen);
  add_zero_conv(w, "out", c, config.latent_channels, 3);
  return m;
}

WeightSet& DenoiserModel::mutable_base() {
  if (frozen_) throw_runtime("denoiser base weights are frozen");
  return base_;
}

void DenoiserModel::freeze() {
  base_.set_requires_grad(false);
  frozen_ = true;
}

const LoraAdapterSet& DenoiserModel::lora() const {
  if (!lora_) throw_invalid("denoiser has no LoRA adapters");
  return *lora_;
}

LoraAdapterSet& DenoiserModel::mutable_lora() {
  if (!lora_) throw_invalid("denoiser has no LoRA adapters");
  return *lora_;
}

std::vector<std::string> DenoiserModel::adaptable_layers() const {
  std::vector<std::string> layers;
  const std::string suffix = ".weight";
  for (const auto& [name, _] : base_.items()) {
    if (name.size() > suffix.size() && name.ends_with(suffix)) {
      layers.push_back(name.substr(0, name.size() - suffix.size()));
    }
  }
  return layers;
}

torch::Tensor DenoiserModel::effective_weight(const std::string& layer) const {
  const auto& w = base_.at(layer + ".weight");
  if (lora_ && lora_->adapts(layer)) return w + lora_->delta(layer, w.sizes());
  return w;
}

torch::Tensor DenoiserModel::forward(const torch::Tensor& z, const torch::Tensor& t) const {
  if (z.dim() != 4 || z.size(1) != config_.latent_channels) {
    throw_invalid("denoiser expects N x " + std::to_string(config_.latent_channels) + " x H x W latents");
  }
  if (z.size(2) % 2 != 0 || z.size(3) % 2 != 0) throw_invalid("denoiser needs even latent dimensions");
  calls_->fetch_add(1);

  auto conv = [&](const torch::Tensor& x, const std::string& layer, int64_t stride = 1) {
    return conv2d(x, effective_weight(layer), base_.at(layer + ".bias"), stride);
  };
  auto lin = [&](const torch::Tensor& x, const std::string& layer) {
    return torch::linear(x, effective_weight(layer), base_.at(layer + ".bias"));
  };
  auto norm_act = [](const torch::Tensor& x) { return torch::silu(torch::group_norm(x, kGroups)); };

  auto emb = lin(torch::silu(lin(timestep_embedding(t, config_.time_embed_dim), "time.fc1")), "time.fc2");
  emb = torch::silu(emb + base_.at("cond.null"));

  auto res = [&](const torch::Tensor& x, const std::string& name) {
    auto h = conv(norm_act(x), name + ".conv1");
    h = h + lin(emb, name + ".emb").unsqueeze(-1).unsqueeze(-1);
    h = conv(norm_act(h), name + ".conv2");
    return x + h;
  };

  const auto h0 = res(conv(z, "in"), "d0");
  auto h = conv(torch::silu(h0), "down", 2);
  h = res(h, "m0");
  h = res(h, "m1");
  h = conv(upsample_nearest2x(torch::silu(h)), "up");
  h = conv(torch::cat({h, h0}, 1), "u0.skip");
  h = res(h, "u0");
  return conv(norm_act(h), "out");
}

torch::Tensor DenoiserModel::predict_noise(const torch::Tensor& z, int64_t t) const {
  return forward(z, torch::full({z.size(0)}, t, torch::kInt64));
}

torch::Tensor DenoiserModel::predict_noise(const torch::Tensor& z, const torch::Tensor& t) const {
  return forward(z, t);
}

int64_t DenoiserModel::total_parameter_count() const {
  return base_.numel() + (lora_ ? lora_->factors.numel() : 0);
}

int64_t DenoiserModel::trainable_parameter_count() const {
  if (lora_) return lora_->factors.numel();
  return frozen_ ? 0 : base_.numel();
}

DenoiserModel DenoiserModel::clone() const {
  DenoiserModel copy;
  copy.config_ = config_;
  copy.base_ = base_.clone();
  copy.frozen_ = frozen_;
  copy.base_.set_requires_grad(!frozen_);
  if (lora_) {
    LoraAdapterSet l = *lora_;
    l.factors = lora_->factors.clone();
    l.factors.set_requires_grad(true);
    copy.lora_ = std::move(l);
  }
  return copy;
}

void DenoiserModel::save(const std::filesystem::path& path) const {
  Checkpoint ckpt;
  nlohmann::json shapes = nlohmann::json::object();
  for (const auto& [name, t] : base_.items()) shapes[name] = t.sizes().vec();
  ckpt.meta = {{"kind", "denoiser"},
               {"format_version", kCheckpointFormatVersion},
               {"latent_channels", config_.latent_channels},
               {"channels", config_.channels},
               {"time_embed_dim", config_.time_embed_dim},
               {"frozen", frozen_},
               {"hash", hash()},
               {"shapes", shapes}};
  ckpt.sections["base"] = base_;
  ckpt.save(path);
}

DenoiserModel DenoiserModel::load(const std::filesystem::path& path) {
  const Checkpoint ckpt = Checkpoint::load(path);
  if (ckpt.meta.value("kind", "") != "denoiser") throw_invalid(path.string() + " is not a denoiser checkpoint");
  DenoiserConfig config;
  config.latent_channels = ckpt.meta.at("latent_channels").get<int>();
  config.channels = ckpt.meta.at("channels").get<int>();
  config.time_embed_dim = ckpt.meta.at("time_embed_dim").get<int>();
  DenoiserModel m = create(config, 0);
  const WeightSet& stored = ckpt.section("base");
  for (const auto& [name, t] : m.base_.items()) {
    if (!stored.contains(name) || stored.at(name).sizes() != t.sizes()) {
      throw_invalid("denoiser checkpoint is missing or mis-shapes " + name);
    }
  }
  m.base_ = stored.clone();
  if (ckpt.meta.value("frozen", true)) m.freeze();
  return m;
}

DenoiserModel inject_lora(const DenoiserModel& model, int rank, double alpha, uint64_t seed) {
  if (rank <= 0) throw_invalid("LoRA rank must be positive");
  DenoiserModel adapted = model.clone();
  adapted.freeze();
  auto gen = make_generator(seed);
  LoraAdapterSet lora;
  lora.rank = rank;
  lora.alpha = alpha;
  for (const auto& layer : adapted.adaptable_layers()) {
    const auto& w = adapted.base().at(layer + ".weight");
    const int64_t out = w.size(0);
    const int64_t fan_in = w.numel() / out;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    lora.factors.add(layer + ".A", torch::rand({rank, fan_in}, gen) * (2.0 * bound) - bound);
    lora.factors.add(layer + ".B", torch::zeros({out, rank}));
  }
  lora.factors.set_requires_grad(true);
  adapted.set_lora(std::move(lora));
  return adapted;
}

DenoiserModel merge_lora(const DenoiserModel& model) {
  if (!model.has_lora()) return model.clone();
  DenoiserModel merged = model.clone();
  const bool was_frozen = merged.frozen();
  WeightSet base = merged.base().clone();
  {
    torch::NoGradGuard no_grad;
    for (const auto& layer : merged.adaptable_layers()) {
      if (!merged.lora().adapts(layer)) continue;
      auto& w = base.at(layer + ".weight");
      w = w + merged.lora().delta(layer, w.sizes());
    }
  }
  DenoiserModel out = DenoiserModel::create(merged.config(), 0);
  out.mutable_base() = std::move(base);
  out.mutable_base().set_requires_grad(!was_frozen);
  if (was_frozen) out.freeze();
  return out;
}

torch::Tensor one_step_denoise(const torch::Tensor& z, const torch::Tensor& eps, double alpha_bar) {
  if (!(alpha_bar > 0.0 && alpha_bar <= 1.0)) throw_invalid("alpha_bar must lie in (0, 1]");
  const double root = std::sqrt(alpha_bar);
  return z / root - std::sqrt(1.0 - alpha_bar) * eps / root;
}

TensorGrid one_step_denoise(const NoisePredictor& predictor, const TensorGrid& z, int64_t t_fix,
                            const NoiseSchedule& schedule) {
  const double alpha_bar = schedule.alpha_bar(t_fix);
  return TensorGrid(one_step_denoise(z.tensor(), predictor(z.tensor(), t_fix), alpha_bar));
}

TensorGrid one_step_denoise(const DenoiserModel& model, const TensorGrid& z, int64_t t_fix,
                            const NoiseSchedule& schedule) {
  const double alpha_bar = schedule.alpha_bar(t_fix);
  return TensorGrid(one_step_denoise(z.tensor(), model.predict_noise(z.tensor(), t_fix), alpha_bar));
}

torch::Tensor clean_latents(const AutoencoderModel& vae, const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  return split_moments(vae.encode_manifold(images)).mean.tensor();
}

torch::Tensor ldm_loss(const DenoiserModel& model, const NoiseSchedule& schedule,
                       const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps) {
  const auto abar = torch::tensor(std::vector<double>(schedule.alpha_bars().begin(),
                                                      schedule.alpha_bars().end()))
                        .to(torch::kFloat32)
                        .index_select(0, t)
                        .view({-1, 1, 1, 1});
  const auto zt = torch::sqrt(abar) * z0 + torch::sqrt(1.0 - abar) * eps;
  return torch::mse_loss(model.predict_noise(zt, t), eps);
}

DenoiserModel pretrain_denoiser(const AutoencoderModel& vae, std::span<const Image> hq_images,
                                const NoiseSchedule& schedule, const DenoiserConfig& config,
                                const DenoiserTrainConfig& train, TrainingCurve* curve) {
  if (hq_images.size() < kMinPretrainImages) {
    throw_invalid("denoiser pretraining needs at least " + std::to_string(kMinPretrainImages) +
                  " images, got " + std::to_string(hq_images.size()));
  }
  torch::Tensor latents;
  {
    std::vector<torch::Tensor> chunks;
    for (std::size_t s = 0; s < hq_images.size(); s += 64) {
      chunks.push_back(clean_latents(vae, to_tensor(hq_images.subspan(s, std::min<std::size_t>(64, hq_images.size() - s)))));
    }
    latents = torch::cat(chunks, 0);
  }

  DenoiserModel model = DenoiserModel::create(config, derive_seed(train.seed, 1));
  model.mutable_base().set_requires_grad(true);
  torch::optim::Adam opt(model.base().parameters(), torch::optim::AdamOptions(train.lr));
  CounterRng rng(derive_seed(train.seed, 2));
  auto gen = make_generator(derive_seed(train.seed, 3));
  const int64_t n = latents.size(0);
  for (int it = 0; it < train.iterations; ++it) {
    std::vector<int64_t> idx(train.batch_size), ts(train.batch_size);
    for (auto& i : idx) i = static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(n));
    for (auto& t : ts) t = static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(schedule.steps()));
    const auto z0 = latents.index_select(0, torch::tensor(idx));
    const auto eps = torch::randn(z0.sizes(), gen);
    const auto loss = ldm_loss(model, schedule, z0, torch::tensor(ts), eps);
    const double value = loss.item<double>();
    if (!std::isfinite(value)) throw_runtime("denoiser loss became non-finite at step " + std::to_string(it));
    if (curve) curve->losses.push_back(value);
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  model.freeze();
  model.reset_forward_count();
  return model;
}

}  // namespace infobfr
