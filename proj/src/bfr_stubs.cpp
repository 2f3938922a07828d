#include "infobfr/bfr_stubs.hpp"

#include <cmath>

#include "infobfr/checkpoint.hpp"
#include "infobfr/error.hpp"
#include "infobfr/rng.hpp"

namespace infobfr {

Image BfrModel::restore(const Image& img) const {
  torch::NoGradGuard no_grad;
  return from_tensor(restore(to_tensor(img))[0]);
}

namespace {

class IdentityBfr : public BfrModel {
 public:
  const std::string& name() const override { return name_; }
  torch::Tensor restore(const torch::Tensor& images) const override { return images; }
  using BfrModel::restore;

 private:
  std::string name_ = "identity";
};

constexpr int kStubStages = 3;

int stub_width(const StubConfig& config) {
  return config.kind == StubKind::kArtifact ? config.channels : std::max(2, config.channels / 2);
}

}  // namespace

std::shared_ptr<const BfrModel> identity_bfr() {
  static const auto instance = std::make_shared<const IdentityBfr>();
  return instance;
}

std::string to_string(StubKind kind) { return kind == StubKind::kArtifact ? "artifact" : "prior_bias"; }

StubKind stub_kind_from_string(const std::string& name) {
  if (name == "artifact") return StubKind::kArtifact;
  if (name == "prior_bias") return StubKind::kPriorBias;
  throw_invalid("unknown stub kind '" + name + "' (expected artifact or prior_bias)");
}

ConvBfrStub::ConvBfrStub(std::string name, StubConfig config, WeightSet weights, torch::Tensor mean_image)
    : name_(std::move(name)),
      config_(std::move(config)),
      weights_(std::move(weights)),
      mean_image_(std::move(mean_image)) {}

ConvBfrStub ConvBfrStub::create(const StubConfig& config, torch::Tensor mean_image) {
  if (config.channels < 2) throw_invalid("stub channels must be >= 2");
  auto gen = make_generator(derive_seed(config.seed, 11));
  const int64_t c = stub_width(config);
  const int stages = kStubStages;
  WeightSet w;
  int64_t in = 3;
  for (int s = 0; s < stages; ++s) {
    add_conv(w, "enc" + std::to_string(s), in, c, 3, gen);
    in = c;
  }
  for (int s = 0; s < stages; ++s) {
    add_conv(w, "dec" + std::to_string(s), c, s + 1 == stages ? 3 : c, 3, gen);
  }
  return ConvBfrStub(to_string(config.kind), config, std::move(w), std::move(mean_image));
}

torch::Tensor ConvBfrStub::restore(const torch::Tensor& images) const {
  const int stages = kStubStages;
  const int64_t factor = int64_t{1} << stages;
  if (images.dim() != 4 || images.size(1) != 3) throw_invalid("stub expects N x 3 x H x W images");
  if (images.size(2) % factor != 0 || images.size(3) % factor != 0) {
    throw_invalid("stub input dimensions must be divisible by " + std::to_string(factor));
  }
  auto h = images * 2.0 - 1.0;
  for (int s = 0; s < stages; ++s) {
    h = torch::silu(conv2d(h, weights_, "enc" + std::to_string(s), 2));
  }
  for (int s = 0; s < stages; ++s) {
    h = conv2d(upsample_nearest2x(h), weights_, "dec" + std::to_string(s));
    if (s + 1 < stages) h = torch::silu(h);
  }
  return torch::sigmoid(h);
}

void ConvBfrStub::save(const std::filesystem::path& path) const {
  Checkpoint ckpt;
  ckpt.meta = {{"kind", "bfr_stub"},
               {"format_version", kCheckpointFormatVersion},
               {"name", name_},
               {"stub_kind", to_string(config_.kind)},
               {"channels", config_.channels},
               {"hash", hash()}};
  ckpt.sections["stub"] = weights_;
  WeightSet mean;
  mean.add("image", mean_image_);
  ckpt.sections["mean"] = std::move(mean);
  ckpt.save(path);
}

std::shared_ptr<const ConvBfrStub> ConvBfrStub::load(const std::filesystem::path& path) {
  const Checkpoint ckpt = Checkpoint::load(path);
  if (ckpt.meta.value("kind", "") != "bfr_stub") throw_invalid(path.string() + " is not a BFR stub checkpoint");
  StubConfig config;
  config.kind = stub_kind_from_string(ckpt.meta.at("stub_kind").get<std::string>());
  config.channels = ckpt.meta.at("channels").get<int>();
  const auto fresh = create(config, torch::Tensor());
  const WeightSet& stored = ckpt.section("stub");
  for (const auto& [name, t] : fresh.weights().items()) {
    if (!stored.contains(name) || stored.at(name).sizes() != t.sizes()) {
      throw_invalid("stub checkpoint is missing or mis-shapes " + name);
    }
  }
  WeightSet weights = stored.clone();
  weights.set_requires_grad(false);
  return std::make_shared<const ConvBfrStub>(ckpt.meta.at("name").get<std::string>(), config,
                                             std::move(weights),
                                             ckpt.section("mean").at("image").clone());
}

std::shared_ptr<const ConvBfrStub> train_stub(std::span<const Image> train_images, const StubConfig& config,
                                              TrainingCurve* curve) {
  if (train_images.size() < 16) throw_invalid("stub training needs at least 16 images");
  const torch::Tensor hq_all = to_tensor(train_images);
  const torch::Tensor mean_image = hq_all.mean(0, true);
  ConvBfrStub stub = ConvBfrStub::create(config, mean_image);
  WeightSet weights = stub.weights().clone();
  weights.set_requires_grad(true);
  torch::optim::Adam opt(weights.parameters(), torch::optim::AdamOptions(config.lr));

  CounterRng rng(derive_seed(config.seed, 12));
  const auto n = static_cast<uint64_t>(train_images.size());
  for (int it = 0; it < config.iterations; ++it) {
    std::vector<Image> lq;
    std::vector<int64_t> idx;
    for (int b = 0; b < config.batch_size; ++b) {
      const auto i = static_cast<int64_t>(rng.next_u64() % n);
      const uint64_t pair_seed = rng.next_u64();
      idx.push_back(i);
      lq.push_back(degrade(train_images[i], sample_params({pair_seed}, config.ranges),
                           {derive_seed(pair_seed, 1)}));
    }
    const auto hq = hq_all.index_select(0, torch::tensor(idx));
    ConvBfrStub current(stub.name(), config, weights, mean_image);
    const auto out = current.restore(to_tensor(lq));
    auto loss = torch::mse_loss(out, hq);
    if (config.kind == StubKind::kPriorBias) {
      loss = loss + config.mean_weight * torch::mse_loss(out, mean_image.expand_as(out));
    }
    const double value = loss.item<double>();
    if (!std::isfinite(value)) throw_runtime("stub training diverged at step " + std::to_string(it));
    if (curve) curve->losses.push_back(value);
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  weights.set_requires_grad(false);
  return std::make_shared<const ConvBfrStub>(stub.name(), config, weights.clone(), mean_image);
}

std::shared_ptr<const ConvBfrStub> artifact_bfr(std::span<const Image> train_images, StubConfig config) {
  config.kind = StubKind::kArtifact;
  return train_stub(train_images, config);
}

std::shared_ptr<const ConvBfrStub> prior_bias_bfr(std::span<const Image> train_images, StubConfig config) {
  config.kind = StubKind::kPriorBias;
  return train_stub(train_images, config);
}

BfrRegistry::BfrRegistry() { models_["identity"] = identity_bfr(); }

void BfrRegistry::add(const std::string& name, std::shared_ptr<const BfrModel> model) {
  std::lock_guard lock(mutex_);
  models_[name] = std::move(model);
}

std::shared_ptr<const BfrModel> BfrRegistry::get(const std::string& name_or_path) {
  std::lock_guard lock(mutex_);
  if (auto it = models_.find(name_or_path); it != models_.end()) return it->second;
  if (!std::filesystem::exists(name_or_path)) throw_missing("unknown BFR model '" + name_or_path + "'");
  auto model = ConvBfrStub::load(name_or_path);
  models_[name_or_path] = model;
  return model;
}

double laplacian_variance(const Image& img) {
  const Image gray = to_grayscale(img);
  const int h = gray.height(), w = gray.width();
  if (h < 3 || w < 3) throw_invalid("laplacian_variance needs at least 3x3 pixels");
  double sum = 0.0, sq = 0.0;
  int count = 0;
  for (int y = 1; y < h - 1; ++y) {
    for (int x = 1; x < w - 1; ++x) {
      const double lap = gray.at(y - 1, x, 0) + gray.at(y + 1, x, 0) + gray.at(y, x - 1, 0) +
                         gray.at(y, x + 1, 0) - 4.0 * gray.at(y, x, 0);
      sum += lap;
      sq += lap * lap;
      ++count;
    }
  }
  const double mean = sum / count;
  return sq / count - mean * mean;
}

}  // namespace infobfr
