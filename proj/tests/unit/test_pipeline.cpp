#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "infobfr/bfr_stubs.hpp"
#include "infobfr/cli.hpp"
#include "infobfr/config.hpp"
#include "infobfr/error.hpp"
#include "infobfr/pipeline.hpp"
#include "infobfr/toy_faces.hpp"
#include "test_util.hpp"

namespace infobfr {
namespace {

using testing::grad_check;
using testing::random_image;
using testing::temp_dir;

// Stubs

TEST(Stubs, IdentityIsBitwise) {
  const auto id = identity_bfr();
  const auto img = random_image(16, 16, 3, 1);
  const auto out = id->restore(img);
  ASSERT_EQ(out.data().size(), img.data().size());
  EXPECT_TRUE(std::equal(out.data().begin(), out.data().end(), img.data().begin()));
  EXPECT_EQ(psnr(out, random_image(16, 16, 3, 2)), psnr(img, random_image(16, 16, 3, 2)));
}

TEST(Stubs, RegistryIdentity) {
  BfrRegistry reg;
  EXPECT_EQ(reg.get("identity").get(), reg.get("identity").get());
  try {
    reg.get("/nonexistent/stub.ibfr");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kMissingArtifact);
  }
  auto stub = std::make_shared<const ConvBfrStub>(ConvBfrStub::create(StubConfig{}, torch::zeros({3, 32, 32})));
  reg.add("mine", stub);
  EXPECT_EQ(reg.get("mine").get(), stub.get());
}

TEST(Stubs, ConvStubShapeRangeDeterminism) {
  for (auto kind : {StubKind::kArtifact, StubKind::kPriorBias}) {
    StubConfig cfg;
    cfg.kind = kind;
    const auto stub = ConvBfrStub::create(cfg, torch::full({3, 32, 32}, 0.5));
    const auto img = random_image(32, 32, 3, 4);
    const auto a = stub.restore(img);
    const auto b = stub.restore(img);
    EXPECT_EQ(a.height(), 32);
    EXPECT_EQ(a.width(), 32);
    EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
    for (float v : a.data()) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
  }
  EXPECT_EQ(stub_kind_from_string(to_string(StubKind::kPriorBias)), StubKind::kPriorBias);
  EXPECT_THROW(stub_kind_from_string("bogus"), Error);
}

TEST(Stubs, SaveLoadAndTrainingGuard) {
  StubConfig cfg;
  const auto stub = ConvBfrStub::create(cfg, torch::full({3, 32, 32}, 0.25));
  const auto dir = temp_dir("stub");
  stub.save(dir / "stub.ibfr");
  const auto back = ConvBfrStub::load(dir / "stub.ibfr");
  EXPECT_EQ(back->hash(), stub.hash());
  const auto x = random_image(32, 32, 3, 5);
  const auto a = stub.restore(x), b = back->restore(x);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));

  std::vector<Image> few(4, random_image(32, 32, 3, 1));
  EXPECT_THROW(train_stub(few, cfg), Error);
}

TEST(Stubs, LaplacianVariance) {
  const Image flat(16, 16, 3, std::vector<float>(16 * 16 * 3, 0.3f));
  EXPECT_EQ(laplacian_variance(flat), 0.0);
  EXPECT_GT(laplacian_variance(random_image(16, 16, 3, 1)), laplacian_variance(generate_toy_face(1, 16)));
}

// Config

TEST(Config, DefaultsRoundTrip) {
  RunConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  const auto j = cfg.to_json();
  EXPECT_EQ(RunConfig::from_json(j).to_json(), j);
  EXPECT_DOUBLE_EQ(cfg.train.lr, 1e-4);
  EXPECT_DOUBLE_EQ(cfg.loss.beta, 20.0);
  EXPECT_EQ(cfg.train.rank, 4);

  const auto dir = temp_dir("config");
  cfg.seed = 77;
  cfg.save(dir / "run.json");
  EXPECT_EQ(RunConfig::load(dir / "run.json").to_json(), cfg.to_json());
}

TEST(Config, RejectsUnknownKeys) {
  auto j = RunConfig{}.to_json();
  j["bogus"] = 1;
  EXPECT_THROW(RunConfig::from_json(j), Error);
  j = RunConfig{}.to_json();
  j["train"]["bogus"] = 1;
  EXPECT_THROW(RunConfig::from_json(j), Error);
  j = RunConfig{}.to_json();
  j["degradation"]["bogus"] = 1;
  EXPECT_THROW(RunConfig::from_json(j), Error);
}

TEST(Config, PartialDocumentKeepsDefaults) {
  const auto cfg = RunConfig::from_json(nlohmann::json{{"train", {{"rank", 8}}}});
  EXPECT_EQ(cfg.train.rank, 8);
  EXPECT_EQ(cfg.train.t_fix, 200);
}

TEST(Config, Overrides) {
  RunConfig cfg;
  cfg.apply_override("train.rank=8");
  cfg.apply_override("loss.beta=5");
  cfg.apply_override("paths.stub=identity");
  cfg.apply_override("train.use_mib=false");
  EXPECT_EQ(cfg.train.rank, 8);
  EXPECT_DOUBLE_EQ(cfg.loss.beta, 5.0);
  EXPECT_EQ(cfg.paths.stub, "identity");
  EXPECT_FALSE(cfg.train.use_mib);
  EXPECT_THROW(cfg.apply_override("train.nope=1"), Error);
  EXPECT_THROW(cfg.apply_override("no_equals_sign"), Error);
}

TEST(Config, Validation) {
  RunConfig cfg;
  cfg.image_size = 30;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = RunConfig{};
  cfg.train.rank = 0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = RunConfig{};
  cfg.train.t_fix = 1000;
  EXPECT_THROW(cfg.validate(), Error);
  try {
    RunConfig::load("/nonexistent/run.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kMissingArtifact);
  }
  EXPECT_NE(stream_seed(1, SeedStream::kVae), stream_seed(1, SeedStream::kDenoiser));
  EXPECT_NE(stream_seed(1, SeedStream::kVae), stream_seed(2, SeedStream::kVae));
}

// CLI

int cli(std::vector<std::string> args, std::string* err_text = nullptr) {
  args.insert(args.begin(), "infobfr");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  if (err_text) *err_text = err.str();
  return code;
}

TEST(Cli, ExitCodes) {
  std::string err;
  EXPECT_EQ(cli({"train", "--bogus-flag"}, &err), kExitUsage);
  EXPECT_NE(err.find("Usage"), std::string::npos);
  EXPECT_EQ(cli({}, &err), kExitUsage);
  EXPECT_EQ(cli({"--help"}), kExitOk);
  const auto dir = temp_dir("cli_codes");
  EXPECT_EQ(cli({"degrade", "--in", (dir / "absent").string(), "--out", (dir / "o").string()}), kExitMissingArtifact);
  EXPECT_EQ(cli({"train", "--out", (dir / "t").string(), "--hq", (dir / "absent").string()}), kExitMissingArtifact);
  EXPECT_EQ(cli({"toyset", "--out", (dir / "bad").string(), "--set", "image_size=30"}), kExitUsage);
}

TEST(Cli, ToysetDegradeEvalReplay) {
  const auto dir = temp_dir("cli_flow");
  const std::string s = "--set";
  ASSERT_EQ(cli({"toyset", "--out", (dir / "a").string(), "--count", "6", "--size", "32", "--seed", "1"}), kExitOk);
  ASSERT_EQ(cli({"degrade", "--in", (dir / "a").string(), "--out", (dir / "lq").string(), s, "image_size=32"}),
            kExitOk);
  EXPECT_TRUE(std::filesystem::exists(dir / "lq" / "params.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "lq" / "manifest.json"));
  ASSERT_EQ(cli({"eval", "--out", (dir / "ev").string(), "--a", (dir / "lq").string(), "--b", (dir / "a").string(),
                 s, "image_size=32", s, "metrics.kid_blocks=2"}),
            kExitOk);
  std::ifstream csv(dir / "ev" / "metrics.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "metric,value,set_a_size,set_b_size,extractor_hash");
  EXPECT_EQ(cli({"replay", "--manifest", (dir / "lq" / "manifest.json").string(), "--out", (dir / "lq2").string()}),
            kExitOk);
  EXPECT_EQ(cli({"replay", "--manifest", (dir / "ev" / "manifest.json").string(), "--out", (dir / "ev2").string()}),
            kExitOk);
}

// Pipeline on a small untrained model

class PipelineFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    AutoencoderConfig vc;
    vc.base_channels = 8;
    auto vae = AutoencoderModel::create(vc, 1);
    vae.freeze();
    vae_ = new std::shared_ptr<const AutoencoderModel>(std::make_shared<const AutoencoderModel>(std::move(vae)));
    DenoiserConfig dc;
    dc.channels = 16;
    dc.time_embed_dim = 16;
    auto den = DenoiserModel::create(dc, 2);
    den.freeze();
    denoiser_ = new DenoiserModel(std::move(den));
    images_ = new std::vector<Image>();
    for (int i = 0; i < 8; ++i) images_->push_back(generate_toy_face(i, 32));
    stats_ = new ManifoldStats(compute_manifold_stats(**vae_, *images_, 8));
  }
  static void TearDownTestSuite() {
    delete vae_;
    delete denoiser_;
    delete images_;
    delete stats_;
  }

  static RunConfig config() {
    RunConfig cfg;
    cfg.image_size = 32;
    cfg.seed = 5;
    cfg.train.iterations = 3;
    cfg.train.batch_size = 2;
    cfg.train.lr = 1e-2;
    cfg.train.log_every = 1;
    return cfg;
  }
  static InfoBfrModel model(const RunConfig& cfg) { return build_model(*vae_, *denoiser_, *stats_, cfg); }
  static TrainInputs inputs() {
    return {*vae_, std::make_shared<const DenoiserModel>(denoiser_->clone()), identity_bfr(), *stats_, *images_};
  }

  static std::shared_ptr<const AutoencoderModel>* vae_;
  static DenoiserModel* denoiser_;
  static std::vector<Image>* images_;
  static ManifoldStats* stats_;
};
std::shared_ptr<const AutoencoderModel>* PipelineFixture::vae_ = nullptr;
DenoiserModel* PipelineFixture::denoiser_ = nullptr;
std::vector<Image>* PipelineFixture::images_ = nullptr;
ManifoldStats* PipelineFixture::stats_ = nullptr;

TEST_F(PipelineFixture, UntrainedMaskIsHalf) {
  const auto m = model(config());
  const auto mask = export_manifold_mask(m, (*images_)[0]);
  EXPECT_EQ(mask.height(), 32);
  EXPECT_EQ(mask.channels(), 1);
  for (float v : mask.data()) ASSERT_NEAR(v, 0.5f, 1e-7);
}

TEST_F(PipelineFixture, OneDenoiserPassAndDeterminism) {
  const auto m = model(config());
  m.denoiser.reset_forward_count();
  const auto a = restore(m, (*images_)[1]);
  EXPECT_EQ(m.denoiser.forward_count(), 1);
  const auto b = restore(m, (*images_)[1]);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  m.denoiser.reset_forward_count();
  restore_multistep(m, to_tensor(std::span<const Image>(*images_).subspan(0, 1)), 5);
  EXPECT_EQ(m.denoiser.forward_count(), 5);
}

TEST_F(PipelineFixture, AllOffIsVaeRoundTripOfRescaledLatent) {
  auto cfg = config();
  cfg.train.use_transformer = false;
  cfg.train.use_mib = false;
  cfg.train.use_lora = false;
  const auto m = model(cfg);
  EXPECT_EQ(m.trainable_parameter_count(), 0);
  const auto x = to_tensor(std::span<const Image>(*images_).subspan(0, 2));
  const auto out = restore_batch(m, x);
  torch::NoGradGuard no_grad;
  const auto r = (*vae_)->encode_manifold(x);
  const auto mean = split_moments(r).mean;
  const auto z0 = one_step_denoise(*denoiser_, mean, cfg.train.t_fix, cfg.denoiser.schedule());
  const auto expect = (*vae_)->decode(z0);
  EXPECT_LT((out - expect).abs().max().item<double>(), 1e-6);
  EXPECT_TRUE(torch::equal(out, restore_batch(m, x)));
}

TEST_F(PipelineFixture, TrainableFractionAndFlags) {
  auto cfg = config();
  // Desk-scale widths; the fixture's tiny denoiser is too narrow for the ratio.
  AutoencoderConfig vc;
  vc.base_channels = 16;
  auto vae = std::make_shared<AutoencoderModel>(AutoencoderModel::create(vc, 1));
  vae->freeze();
  auto den = DenoiserModel::create(DenoiserConfig{}, 2);
  den.freeze();
  auto stats = *stats_;
  stats.vae_hash.clear();
  const auto m = build_model(vae, den, stats, cfg);
  EXPECT_LT(static_cast<double>(m.trainable_parameter_count()) / m.total_parameter_count(), 0.10);
  cfg.train.use_lora = false;
  const auto no_lora = build_model(vae, den, stats, cfg);
  EXPECT_FALSE(no_lora.denoiser.has_lora());
  EXPECT_LT(no_lora.trainable_parameter_count(), m.trainable_parameter_count());
}

TEST_F(PipelineFixture, TrainKeepsFrozenWeightsAndConnectsGradients) {
  const auto cfg = config();
  const auto before = model(cfg).frozen_hash();
  const auto result = train(cfg, inputs());
  EXPECT_EQ(result.model.frozen_hash(), before);
  ASSERT_FALSE(result.curve.empty());
  EXPECT_EQ(result.curve.back().iteration, 2);

  const auto& m = result.model;
  const auto batch = synthesize_batch(inputs(), cfg, 99);
  const auto params = m.trainable_parameters();
  for (const auto& p : params) {
    if (p.grad().defined()) p.grad().zero_();
  }
  const auto out = forward(m, batch.bfr, CompressMode::kTrain, 3);
  const auto loss = total_loss(out.info_loss, data_loss(out.restored, batch.hq, PerceptualNet::create(), cfg.loss),
                               cfg.loss);
  loss.backward();
  ASSERT_FALSE(params.empty());
  for (const auto& p : params) {
    ASSERT_TRUE(p.grad().defined());
    EXPECT_GT(p.grad().abs().max().item<double>(), 0.0);
  }
}

TEST_F(PipelineFixture, TrainingIsDeterministic) {
  const auto cfg = config();
  const auto a = train(cfg, inputs());
  const auto b = train(cfg, inputs());
  ASSERT_EQ(a.curve.size(), b.curve.size());
  for (std::size_t i = 0; i < a.curve.size(); ++i) EXPECT_EQ(a.curve[i].total, b.curve[i].total);
  EXPECT_EQ(a.model.filter.weights.hash(), b.model.filter.weights.hash());
}

TEST_F(PipelineFixture, EndToEndGradient) {
  auto m = model(config());
  {
    torch::NoGradGuard no_grad;
    auto gen = make_generator(8);
    for (auto& p : m.trainable_parameters()) p.add_(torch::randn(p.sizes(), gen) * 0.05);
  }
  const auto batch = synthesize_batch(inputs(), config(), 7);
  const auto net = PerceptualNet::create();
  const LossWeights w;
  auto loss = [&] {
    const auto out = forward(m, batch.bfr, CompressMode::kTrain, 11);
    return total_loss(out.info_loss, data_loss(out.restored, batch.hq, net, w), w);
  };
  const auto result = grad_check(loss, m.trainable_parameters(), 25, 12, 1e-2);
  EXPECT_EQ(result.checked, 25);
  EXPECT_LT(result.max_rel_error, 1e-2);
}

TEST_F(PipelineFixture, CheckpointRoundTripIsBitIdentical) {
  const auto cfg = config();
  auto trained = train(cfg, inputs()).model;
  const auto dir = temp_dir("pipeline_ckpt");
  (*vae_)->save(dir / "vae.ibfr");
  denoiser_->save(dir / "den.ibfr");
  const nlohmann::json prov = {{"config", cfg.to_json()},
                               {"inputs", {{"vae", (dir / "vae.ibfr").string()}, {"denoiser", (dir / "den.ibfr").string()}}}};
  trained.save(dir / "model.ibfr", prov);
  const auto loaded = load_model(dir / "model.ibfr");
  const auto x = to_tensor(std::span<const Image>(*images_).subspan(2, 3));
  EXPECT_TRUE(torch::equal(restore_batch(trained, x), restore_batch(loaded.model, x)));
  EXPECT_EQ(loaded.model.frozen_hash(), trained.frozen_hash());

  AutoencoderConfig vc;
  vc.base_channels = 8;
  AutoencoderModel::create(vc, 99).save(dir / "vae.ibfr");
  EXPECT_THROW(load_model(dir / "model.ibfr"), Error);
}

TEST_F(PipelineFixture, StatsMustMatchAutoencoder) {
  auto stats = *stats_;
  stats.vae_hash = "deadbeef";
  EXPECT_THROW(build_model(*vae_, *denoiser_, stats, config()), Error);
}

TEST(Ablation, GridLabels) {
  RunConfig cfg;
  const auto grid = ablation_grid(cfg);
  ASSERT_FALSE(grid.empty());
  std::set<std::string> labels;
  for (const auto& c : grid) EXPECT_TRUE(labels.insert(c.label()).second) << c.label();
  EXPECT_EQ(grid.front().label().substr(0, 3), "(a)");
  int betas = 0, ranks = 0;
  for (const auto& c : grid) {
    if (c.flags.use_transformer && c.flags.use_mib && c.flags.use_lora) {
      if (c.rank == 4) ++betas;
      if (c.beta == cfg.loss.beta) ++ranks;
    }
  }
  EXPECT_EQ(betas, 4);
  EXPECT_EQ(ranks, 3);
  cfg.ablate.toggles = false;
  cfg.ablate.betas = {20.0};
  cfg.ablate.ranks = {4};
  EXPECT_EQ(ablation_grid(cfg).size(), 1u);
}

}  // namespace
}  // namespace infobfr
