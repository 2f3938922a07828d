#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "infobfr/diffusion.hpp"
#include "infobfr/error.hpp"
#include "test_util.hpp"

namespace infobfr {
namespace {

using testing::grad_check;
using testing::random_image;
using testing::temp_dir;

torch::Tensor randn(std::vector<int64_t> shape, uint64_t seed) {
  auto gen = make_generator(seed);
  return torch::randn(shape, gen);
}

DenoiserModel small_denoiser(uint64_t seed = 1) {
  DenoiserConfig cfg;
  cfg.channels = 16;
  cfg.time_embed_dim = 16;
  return DenoiserModel::create(cfg, seed);
}

// Gives every adapter a non-zero B so the delta is visible.
void perturb_adapters(DenoiserModel& model, uint64_t seed) {
  torch::NoGradGuard no_grad;
  auto& factors = model.mutable_lora().factors;
  uint64_t k = seed;
  for (const auto& [name, t] : factors.items()) {
    if (name.size() > 2 && name.compare(name.size() - 2, 2, ".B") == 0) {
      factors.at(name).copy_(randn(t.sizes().vec(), ++k) * 0.05);
    }
  }
}

TEST(Schedule, LinearIsMonotone) {
  const auto s = NoiseSchedule::linear(1000, 1e-4, 2e-2);
  EXPECT_EQ(s.steps(), 1000);
  EXPECT_NEAR(s.alpha_bar(0), 1.0 - 1e-4, 1e-12);
  EXPECT_NEAR(s.beta(999), 2e-2, 1e-12);
  for (int t = 1; t < 1000; ++t) {
    ASSERT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    ASSERT_GT(s.alpha_bar(t), 0.0);
    ASSERT_GT(s.beta(t), 0.0);
    ASSERT_LT(s.beta(t), 1.0);
  }
  EXPECT_THROW(s.alpha_bar(1000), Error);
  EXPECT_THROW(s.alpha_bar(-1), Error);
  EXPECT_THROW(NoiseSchedule::from_betas({0.1, 1.0}), Error);
  EXPECT_THROW(NoiseSchedule::from_betas({}), Error);
}

TEST(OneStep, DegenerateScheduleIsIdentity) {
  const auto s = NoiseSchedule::from_betas({0.0, 0.1});
  const auto z = randn({1, 4, 4, 4}, 1);
  NoisePredictor huge = [](const torch::Tensor& x, int64_t) { return x * 1e6; };
  EXPECT_TRUE(torch::equal(one_step_denoise(huge, TensorGrid(z), 0, s).tensor(), z));
}

TEST(OneStep, InvertsForwardProcess) {
  const auto s = NoiseSchedule::linear();
  const auto f64 = torch::TensorOptions().dtype(torch::kFloat64);
  CounterRng rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    auto gen = make_generator(100 + trial);
    const auto z0 = torch::randn({2, 4, 4, 4}, gen, f64);
    const auto eps = torch::randn({2, 4, 4, 4}, gen, f64);
    const int64_t t = static_cast<int64_t>(rng.next_u64() % 1000);
    const double ab = s.alpha_bar(t);
    const auto zt = std::sqrt(ab) * z0 + std::sqrt(1 - ab) * eps;
    const auto back = one_step_denoise(zt, eps, ab);
    EXPECT_LT((back - z0).abs().max().item<double>(), 1e-6) << "t=" << t;
  }
}

TEST(OneStep, InvertsForwardProcessFloat32) {
  const auto s = NoiseSchedule::linear();
  const auto z0 = randn({2, 4, 4, 4}, 2);
  const auto eps = randn({2, 4, 4, 4}, 3);
  for (int64_t t : {0, 200, 600, 999}) {
    const double ab = s.alpha_bar(t);
    const auto zt = std::sqrt(ab) * z0 + std::sqrt(1 - ab) * eps;
    NoisePredictor oracle = [&](const torch::Tensor&, int64_t) { return eps; };
    const auto back = one_step_denoise(oracle, TensorGrid(zt), t, s).tensor();
    // float32 rounding scaled by the 1 / sqrt(abar) amplification
    EXPECT_LT((back - z0).abs().max().item<double>(), 4e-6 / std::sqrt(ab)) << "t=" << t;
  }
}

TEST(OneStep, ZeroPredictionRescales) {
  const auto s = NoiseSchedule::linear();
  const auto z = randn({1, 4, 2, 2}, 4);
  NoisePredictor zero = [](const torch::Tensor& x, int64_t) { return torch::zeros_like(x); };
  const auto out = one_step_denoise(zero, TensorGrid(z), 200, s).tensor();
  EXPECT_LT((out - z / std::sqrt(s.alpha_bar(200))).abs().max().item<double>(), 1e-6);
  EXPECT_THROW(one_step_denoise(zero, TensorGrid(z), 1000, s), Error);
  EXPECT_THROW(one_step_denoise(z, z, 0.0), Error);
}

TEST(OneStep, LinearInInputs) {
  const double ab = 0.6;
  const auto z1 = randn({1, 4, 3, 3}, 5), z2 = randn({1, 4, 3, 3}, 6);
  const auto e1 = randn({1, 4, 3, 3}, 7), e2 = randn({1, 4, 3, 3}, 8);
  const auto lhs = one_step_denoise(2.0 * z1 - 3.0 * z2, 2.0 * e1 - 3.0 * e2, ab);
  const auto rhs = 2.0 * one_step_denoise(z1, e1, ab) - 3.0 * one_step_denoise(z2, e2, ab);
  EXPECT_LT((lhs - rhs).abs().max().item<double>(), 1e-5);
}

TEST(Denoiser, ShapeCountAndErrors) {
  const auto model = small_denoiser();
  model.reset_forward_count();
  const auto z = randn({2, 4, 8, 8}, 1);
  const auto out = model.predict_noise(z, 10);
  EXPECT_EQ(out.sizes(), z.sizes());
  EXPECT_EQ(model.forward_count(), 1);
  const auto s = NoiseSchedule::linear();
  one_step_denoise(model, TensorGrid(z), 200, s);
  EXPECT_EQ(model.forward_count(), 2);
  EXPECT_THROW(model.predict_noise(randn({1, 3, 8, 8}, 1), 1), Error);
  EXPECT_THROW(model.predict_noise(randn({1, 4, 7, 8}, 1), 1), Error);
  EXPECT_TRUE(torch::equal(out, model.predict_noise(z, 10)));
}

TEST(Denoiser, CheckpointRoundTrip) {
  auto model = small_denoiser(2);
  model.freeze();
  const auto dir = temp_dir("denoiser");
  model.save(dir / "d.ibfr");
  const auto back = DenoiserModel::load(dir / "d.ibfr");
  EXPECT_EQ(back.hash(), model.hash());
  const auto z = randn({1, 4, 8, 8}, 3);
  EXPECT_TRUE(torch::equal(model.predict_noise(z, 7), back.predict_noise(z, 7)));
  try {
    DenoiserModel::load(dir / "missing.ibfr");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kMissingArtifact);
  }
}

TEST(Denoiser, PretrainNeedsEnoughImages) {
  AutoencoderConfig vc;
  vc.base_channels = 8;
  const auto vae = AutoencoderModel::create(vc, 1);
  std::vector<Image> few;
  for (int i = 0; i < 4; ++i) few.push_back(random_image(16, 16, 3, i));
  EXPECT_THROW(pretrain_denoiser(vae, few, NoiseSchedule::linear(), DenoiserConfig{}, DenoiserTrainConfig{}),
               Error);
}

TEST(Lora, InitEquivalenceAndFrozenBase) {
  auto base = small_denoiser(3);
  base.freeze();
  const auto adapted = inject_lora(base, 4, 4.0, 9);
  EXPECT_TRUE(adapted.has_lora());
  EXPECT_TRUE(adapted.frozen());
  EXPECT_EQ(adapted.hash(), base.hash());
  const auto z = randn({2, 4, 8, 8}, 4);
  EXPECT_EQ((adapted.predict_noise(z, 50) - base.predict_noise(z, 50)).abs().max().item<double>(), 0.0);
  for (const auto& layer : adapted.adaptable_layers()) ASSERT_TRUE(adapted.lora().adapts(layer)) << layer;
  for (const auto& p : adapted.base().parameters()) EXPECT_FALSE(p.requires_grad());
  for (const auto& p : adapted.lora().factors.parameters()) EXPECT_TRUE(p.requires_grad());
  EXPECT_THROW(inject_lora(base, 0, 1.0, 1), Error);
  EXPECT_THROW(base.lora(), Error);
}

TEST(Lora, TrainableFractionAndRankScaling) {
  DenoiserConfig cfg;
  const auto base = DenoiserModel::create(cfg, 4);
  const auto r4 = inject_lora(base, 4, 4.0, 1);
  const auto r8 = inject_lora(base, 8, 8.0, 1);
  const auto r2 = inject_lora(base, 2, 2.0, 1);
  const double frac = static_cast<double>(r4.trainable_parameter_count()) / r4.total_parameter_count();
  EXPECT_LT(frac, 0.10);
  EXPECT_GT(frac, 0.0);
  const double ratio = static_cast<double>(r8.trainable_parameter_count()) / r4.trainable_parameter_count();
  EXPECT_NEAR(ratio, 2.0, 0.02);
  EXPECT_EQ(r4.trainable_parameter_count(), 2 * r2.trainable_parameter_count());
}

TEST(Lora, DeltaRankBoundedBySvd) {
  auto adapted = inject_lora(small_denoiser(5), 2, 2.0, 3);
  perturb_adapters(adapted, 100);
  int checked = 0;
  for (const auto& layer : adapted.adaptable_layers()) {
    const auto w = adapted.base().at(layer + ".weight");
    const auto delta = adapted.lora().delta(layer, w.sizes()).detach().reshape({w.size(0), -1});
    const auto sv = torch::linalg_svdvals(delta.to(torch::kFloat64));
    const double cutoff = 1e-6 * sv.max().item<double>();
    EXPECT_LE((sv > cutoff).sum().item<int64_t>(), 2) << layer;
    if (std::min(delta.size(0), delta.size(1)) > 2) ++checked;
  }
  EXPECT_GT(checked, 0);
}

TEST(Lora, MergeMatchesAdapted) {
  auto adapted = inject_lora(small_denoiser(6), 4, 4.0, 5);
  perturb_adapters(adapted, 200);
  const auto merged = merge_lora(adapted);
  EXPECT_FALSE(merged.has_lora());
  const auto z = randn({2, 4, 8, 8}, 6);
  torch::NoGradGuard no_grad;
  EXPECT_LT((merged.predict_noise(z, 30) - adapted.predict_noise(z, 30)).abs().max().item<double>(), 1e-5);
  const auto twice = merge_lora(merged);
  EXPECT_EQ(twice.hash(), merged.hash());
}

TEST(Lora, MergeOfZeroAdaptersKeepsBase) {
  auto base = small_denoiser(7);
  base.freeze();
  const auto merged = merge_lora(inject_lora(base, 4, 4.0, 1));
  EXPECT_EQ(merged.hash(), base.hash());
}

TEST(Lora, GradientThroughOneStep) {
  auto adapted = inject_lora(small_denoiser(8), 2, 2.0, 7);
  perturb_adapters(adapted, 300);
  const auto s = NoiseSchedule::linear();
  const auto z = randn({1, 4, 4, 4}, 9);
  const auto target = randn({1, 4, 4, 4}, 10);
  auto loss = [&] { return (one_step_denoise(adapted, TensorGrid(z), 200, s).tensor() - target).pow(2).mean(); };
  const auto result = grad_check(loss, adapted.lora().factors.parameters(), 40, 11, 1e-2);
  EXPECT_EQ(result.checked, 40);
  EXPECT_LT(result.max_rel_error, 1e-2);
}

TEST(Diffusion, LdmLossFinite) {
  const auto model = small_denoiser(9);
  const auto s = NoiseSchedule::linear();
  const auto z0 = randn({3, 4, 4, 4}, 12);
  const auto eps = randn({3, 4, 4, 4}, 13);
  const auto t = torch::tensor(std::vector<int64_t>{0, 500, 999});
  const double v = ldm_loss(model, s, z0, t, eps).item<double>();
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_GE(v, 0.0);
  const auto emb = timestep_embedding(t, 16);
  EXPECT_EQ(emb.sizes(), (std::vector<int64_t>{3, 16}));
}

}  // namespace
}  // namespace infobfr
