#include "infobfr/pipeline.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "infobfr/checkpoint.hpp"
#include "infobfr/error.hpp"
#include "infobfr/metrics.hpp"
#include "infobfr/rng.hpp"

namespace infobfr {

namespace {

constexpr int kEvalChunk = 32;

nlohmann::json stats_to_json(const ManifoldStats& s) {
  return {{"mu_qc", s.mu_qc}, {"sigma_qc", s.sigma_qc}, {"sample_count", s.sample_count}, {"vae_hash", s.vae_hash}};
}

ManifoldStats stats_from_json(const nlohmann::json& j) {
  ManifoldStats s;
  s.mu_qc = j.at("mu_qc").get<std::vector<double>>();
  s.sigma_qc = j.at("sigma_qc").get<std::vector<double>>();
  s.sample_count = j.at("sample_count").get<int64_t>();
  s.vae_hash = j.at("vae_hash").get<std::string>();
  s.validate();
  return s;
}

void append(std::vector<torch::Tensor>& out, const WeightSet& w) {
  for (const auto& t : w.parameters()) out.push_back(t);
}

std::string format_double(double v) {
  std::ostringstream s;
  s << std::setprecision(9) << v;
  return s.str();
}

}  // namespace

std::vector<torch::Tensor> InfoBfrModel::trainable_parameters() const {
  std::vector<torch::Tensor> out;
  if (flags.use_transformer) append(out, attention.weights);
  if (flags.use_mib) append(out, filter.weights);
  if (flags.use_lora && denoiser.has_lora()) append(out, denoiser.lora().factors);
  return out;
}

int64_t InfoBfrModel::trainable_parameter_count() const {
  int64_t n = 0;
  for (const auto& t : trainable_parameters()) n += t.numel();
  return n;
}

int64_t InfoBfrModel::total_parameter_count() const {
  return vae->weights().numel() + denoiser.base().numel() + trainable_parameter_count();
}

std::string InfoBfrModel::frozen_hash() const {
  const std::string joined = vae->hash() + ":" + denoiser.hash();
  return sha256_hex(joined.data(), joined.size());
}

void InfoBfrModel::save(const std::filesystem::path& path, const nlohmann::json& provenance) const {
  Checkpoint ckpt;
  ckpt.meta = provenance;
  ckpt.meta["kind"] = "infobfr";
  ckpt.meta["format_version"] = kCheckpointFormatVersion;
  ckpt.meta["flags"] = {{"use_transformer", flags.use_transformer},
                        {"use_mib", flags.use_mib},
                        {"use_lora", flags.use_lora}};
  ckpt.meta["t_fix"] = t_fix;
  ckpt.meta["stats"] = stats_to_json(stats);
  ckpt.meta["lambda_cap"] = filter.lambda_cap;
  ckpt.meta["vae_hash"] = vae->hash();
  ckpt.meta["denoiser_hash"] = denoiser.hash();
  ckpt.meta["frozen_hash"] = frozen_hash();
  ckpt.sections["attention"] = attention.weights;
  ckpt.sections["filter"] = filter.weights;
  if (denoiser.has_lora()) {
    ckpt.meta["lora"] = {{"rank", denoiser.lora().rank}, {"alpha", denoiser.lora().alpha}};
    ckpt.sections["lora"] = denoiser.lora().factors;
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  ckpt.save(path);
}

InfoBfrModel build_model(std::shared_ptr<const AutoencoderModel> vae, const DenoiserModel& base_denoiser,
                         ManifoldStats stats, const RunConfig& config) {
  if (!vae) throw_invalid("build_model needs an autoencoder");
  stats.validate();
  if (stats.channels() != kManifoldChannels) throw_invalid("manifold stats must have 8 channels");
  if (!stats.vae_hash.empty() && stats.vae_hash != vae->hash()) {
    throw_invalid("manifold stats were computed for a different autoencoder");
  }
  if (base_denoiser.config().latent_channels != kLatentChannels) {
    throw_invalid("denoiser latent channels must be 4");
  }
  InfoBfrModel m{std::move(vae),
                 base_denoiser.clone(),
                 AttentionBlock::create(kManifoldChannels, stream_seed(config.seed, SeedStream::kAttention)),
                 FilterHead::create(kManifoldChannels),
                 std::move(stats),
                 config.denoiser.schedule(),
                 config.train.t_fix,
                 {config.train.use_transformer, config.train.use_mib, config.train.use_lora}};
  m.denoiser.set_lora(std::nullopt);
  m.denoiser.freeze();
  if (m.flags.use_lora) {
    m.denoiser = inject_lora(m.denoiser, config.train.rank, config.train.lora_alpha,
                             stream_seed(config.seed, SeedStream::kLora));
  }
  m.attention.weights.set_requires_grad(true);
  m.filter.weights.set_requires_grad(true);
  return m;
}

LoadedModel load_model(const std::filesystem::path& path) {
  const Checkpoint ckpt = Checkpoint::load(path);
  if (ckpt.meta.value("kind", "") != "infobfr") throw_invalid(path.string() + " is not an InfoBFR checkpoint");
  RunConfig config = RunConfig::from_json(ckpt.meta.at("config"));
  const auto& inputs = ckpt.meta.at("inputs");
  const std::filesystem::path vae_path = inputs.at("vae").get<std::string>();
  const std::filesystem::path den_path = inputs.at("denoiser").get<std::string>();
  auto vae = std::make_shared<const AutoencoderModel>(AutoencoderModel::load(vae_path));
  if (vae->hash() != ckpt.meta.at("vae_hash").get<std::string>()) {
    throw_invalid("autoencoder " + vae_path.string() + " does not match the checkpoint's recorded hash");
  }
  const DenoiserModel base = DenoiserModel::load(den_path);
  if (base.hash() != ckpt.meta.at("denoiser_hash").get<std::string>()) {
    throw_invalid("denoiser " + den_path.string() + " does not match the checkpoint's recorded hash");
  }
  const auto& flags = ckpt.meta.at("flags");
  config.train.use_transformer = flags.at("use_transformer").get<bool>();
  config.train.use_mib = flags.at("use_mib").get<bool>();
  config.train.use_lora = flags.at("use_lora").get<bool>();
  config.train.t_fix = ckpt.meta.at("t_fix").get<int>();
  if (ckpt.meta.contains("lora")) {
    config.train.rank = ckpt.meta.at("lora").at("rank").get<int>();
    config.train.lora_alpha = ckpt.meta.at("lora").at("alpha").get<double>();
  }
  InfoBfrModel model = build_model(vae, base, stats_from_json(ckpt.meta.at("stats")), config);

  auto restore_into = [&](WeightSet& dst, const std::string& section) {
    const WeightSet& src = ckpt.section(section);
    for (auto& [name, t] : dst.items()) {
      if (!src.contains(name) || src.at(name).sizes() != t.sizes()) {
        throw_invalid("checkpoint section '" + section + "' is missing or mis-shapes " + name);
      }
    }
    WeightSet copy = src.clone();
    copy.set_requires_grad(true);
    dst = std::move(copy);
  };
  restore_into(model.attention.weights, "attention");
  restore_into(model.filter.weights, "filter");
  if (model.denoiser.has_lora()) restore_into(model.denoiser.mutable_lora().factors, "lora");
  model.filter.lambda_cap = ckpt.meta.value("lambda_cap", kDefaultLambdaCap);
  if (model.frozen_hash() != ckpt.meta.at("frozen_hash").get<std::string>()) {
    throw_invalid("frozen weights differ from the checkpoint's provenance record");
  }
  return {std::move(model), std::move(config), ckpt.meta};
}

ForwardOutputs forward(const InfoBfrModel& model, const torch::Tensor& x_bfr, CompressMode mode, uint64_t seed) {
  TensorGrid r = [&] {
    torch::NoGradGuard no_grad;
    return model.vae->encode_manifold(x_bfr);
  }();
  if (model.flags.use_transformer) r = attend(model.attention, r);

  TensorGrid lambda(torch::ones_like(r.tensor()));
  TensorGrid z = r;
  torch::Tensor info = torch::zeros({});
  if (model.flags.use_mib) {
    lambda = info_filter(model.filter, normalize(r, model.stats));
    z = compress(r, lambda, model.stats, mode, seed);
    info = info_loss(r, lambda, model.stats, model.filter.lambda_cap);
  }
  const TensorGrid latent = sample_latent(split_moments(z), 0, true);
  const TensorGrid z0 = one_step_denoise(model.denoiser, latent, model.t_fix, model.schedule);
  return {model.vae->decode(z0), r, lambda, z, info};
}

torch::Tensor restore_batch(const InfoBfrModel& model, const torch::Tensor& x_bfr) {
  torch::NoGradGuard no_grad;
  return forward(model, x_bfr, CompressMode::kInfer, 0).restored;
}

Image restore(const InfoBfrModel& model, const Image& x_bfr) {
  return from_tensor(restore_batch(model, to_tensor(x_bfr))[0]);
}

torch::Tensor restore_multistep(const InfoBfrModel& model, const torch::Tensor& x_bfr, int denoise_steps) {
  if (denoise_steps < 1) throw_invalid("denoise_steps must be >= 1");
  torch::NoGradGuard no_grad;
  TensorGrid r = model.vae->encode_manifold(x_bfr);
  if (model.flags.use_transformer) r = attend(model.attention, r);
  TensorGrid z = r;
  if (model.flags.use_mib) {
    const TensorGrid lambda = info_filter(model.filter, normalize(r, model.stats));
    z = compress(r, lambda, model.stats, CompressMode::kInfer, 0);
  }
  torch::Tensor zt = split_moments(z).mean.tensor();
  for (int i = 0; i < denoise_steps; ++i) {
    const auto t = static_cast<int64_t>(std::llround(model.t_fix * double(denoise_steps - i) / denoise_steps));
    const double abar = model.schedule.alpha_bar(t);
    const auto eps = model.denoiser.predict_noise(zt, t);
    const auto z0 = one_step_denoise(zt, eps, abar);
    if (i + 1 == denoise_steps) {
      zt = z0;
    } else {
      const auto next = static_cast<int64_t>(
          std::llround(model.t_fix * double(denoise_steps - i - 1) / denoise_steps));
      const double abar_next = model.schedule.alpha_bar(next);
      zt = std::sqrt(abar_next) * z0 + std::sqrt(1.0 - abar_next) * eps;
    }
  }
  return model.vae->decode(TensorGrid(zt));
}

Image export_manifold_mask(const InfoBfrModel& model, const Image& x_bfr) {
  torch::NoGradGuard no_grad;
  const auto out = forward(model, to_tensor(x_bfr), CompressMode::kInfer, 0);
  const auto mean = out.lambda.tensor().mean(1, true);
  const auto up = torch::nn::functional::interpolate(
      mean, torch::nn::functional::InterpolateFuncOptions()
                .size(std::vector<int64_t>{x_bfr.height(), x_bfr.width()})
                .mode(torch::kBilinear)
                .align_corners(false));
  return from_tensor(up[0].clamp(0.0, 1.0));
}

TrainingBatch synthesize_batch(const TrainInputs& inputs, const RunConfig& config, uint64_t step_seed) {
  CounterRng rng(step_seed);
  const auto n = static_cast<uint64_t>(inputs.hq_images.size());
  std::vector<Image> hq, lq;
  for (int b = 0; b < config.train.batch_size; ++b) {
    const Image& img = inputs.hq_images[rng.next_u64() % n];
    const uint64_t pair_seed = rng.next_u64();
    hq.push_back(img);
    lq.push_back(degrade(img, sample_params({pair_seed}, config.degradation), {derive_seed(pair_seed, 1)}));
  }
  torch::NoGradGuard no_grad;
  return {to_tensor(hq), inputs.stub->restore(to_tensor(lq))};
}

namespace {

void check_inputs(const TrainInputs& inputs) {
  if (!inputs.vae || !inputs.denoiser || !inputs.stub) throw_missing("training needs an autoencoder, denoiser and stub");
  if (inputs.hq_images.empty()) throw_missing("training needs HQ images");
}

}  // namespace

TrainResult train(const RunConfig& config, const TrainInputs& inputs) {
  config.validate();
  check_inputs(inputs);
  TrainResult result{build_model(inputs.vae, *inputs.denoiser, inputs.stats, config), {}};
  InfoBfrModel& model = result.model;
  const std::string frozen_before = model.frozen_hash();

  const auto params = model.trainable_parameters();
  std::optional<torch::optim::AdamW> opt;
  if (!params.empty()) {
    opt.emplace(params, torch::optim::AdamWOptions(config.train.lr).weight_decay(config.train.weight_decay));
  }
  const PerceptualNet net = PerceptualNet::create();
  const uint64_t data_seed = stream_seed(config.seed, SeedStream::kDegrade);
  const uint64_t noise_seed = stream_seed(config.seed, SeedStream::kTrain);

  for (int it = 0; it < config.train.iterations; ++it) {
    const TrainingBatch batch = synthesize_batch(inputs, config, derive_seed(data_seed, static_cast<uint64_t>(it)));
    const auto out = forward(model, batch.bfr, CompressMode::kTrain, derive_seed(noise_seed, static_cast<uint64_t>(it)));
    const auto data = data_loss(out.restored, batch.hq, net, config.loss);
    torch::Tensor total;
    try {
      total = model.flags.use_mib ? total_loss(out.info_loss, data, config.loss) : total_loss(torch::zeros({}), data, config.loss);
    } catch (const Error& e) {
      throw_runtime("non-finite loss at iteration " + std::to_string(it) + ": " + e.what());
    }
    if (opt) {
      opt->zero_grad();
      total.backward();
      opt->step();
    }
    if (it % config.train.log_every == 0 || it + 1 == config.train.iterations) {
      result.curve.push_back({it, total.item<double>(), out.info_loss.item<double>(), data.item<double>(),
                              out.lambda.tensor().mean().item<double>()});
    }
  }
  if (model.frozen_hash() != frozen_before) throw_runtime("frozen weights changed during training");
  return result;
}

void write_curve_csv(const std::vector<CurveRow>& curve, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw_runtime("cannot write " + path.string());
  f << "iteration,total,info,data,mean_lambda\n";
  for (const auto& r : curve) {
    f << r.iteration << ',' << format_double(r.total) << ',' << format_double(r.info) << ','
      << format_double(r.data) << ',' << format_double(r.mean_lambda) << '\n';
  }
}

EvalPair make_eval_pair(const std::vector<Image>& hq, const BfrModel& stub, const DegradationRanges& ranges,
                        uint64_t seed) {
  EvalPair pair;
  pair.hq = hq;
  for (std::size_t i = 0; i < hq.size(); ++i) {
    const uint64_t pair_seed = derive_seed(seed, i);
    const Image lq = degrade(hq[i], sample_params({pair_seed}, ranges), {derive_seed(pair_seed, 1)});
    pair.bfr.push_back(stub.restore(lq));
  }
  return pair;
}

EvalSummary evaluate(const InfoBfrModel& model, const EvalPair& pair) {
  if (pair.hq.empty() || pair.hq.size() != pair.bfr.size()) throw_invalid("evaluation pair is empty or unbalanced");
  torch::NoGradGuard no_grad;
  std::vector<Image> restored;
  double lambda_sum = 0.0;
  for (std::size_t s = 0; s < pair.bfr.size(); s += kEvalChunk) {
    const std::size_t count = std::min<std::size_t>(kEvalChunk, pair.bfr.size() - s);
    const auto out = forward(model, to_tensor(std::span(pair.bfr).subspan(s, count)), CompressMode::kInfer, 0);
    lambda_sum += out.lambda.tensor().mean().item<double>() * static_cast<double>(count);
    for (auto& img : from_batch(out.restored)) restored.push_back(std::move(img));
  }
  EvalSummary summary;
  for (std::size_t i = 0; i < pair.hq.size(); ++i) {
    summary.psnr_bfr += psnr(pair.bfr[i], pair.hq[i]);
    summary.psnr_restored += psnr(restored[i], pair.hq[i]);
  }
  const double n = static_cast<double>(pair.hq.size());
  summary.psnr_bfr /= n;
  summary.psnr_restored /= n;
  summary.mean_lambda = lambda_sum / n;
  const FeatureExtractor ex = FeatureExtractor::create();
  const auto anchor = ex.features(pair.hq);
  summary.fid_bfr = fid_from_features(ex.features(pair.bfr), anchor);
  summary.fid_restored = fid_from_features(ex.features(restored), anchor);
  return summary;
}

std::string AblationCell::label() const {
  const bool t = flags.use_transformer, m = flags.use_mib, l = flags.use_lora;
  std::string row = "(custom)";
  if (t && !m && l) row = "(a)";
  if (!t && m && l) row = "(b)";
  if (!t && !m && l) row = "(c)";
  if (t && m && !l) row = "(d)";
  if (t && m && l) row = "(e)";
  std::ostringstream s;
  s << row << " beta=" << beta << " rank=" << rank;
  return s.str();
}

std::vector<AblationCell> ablation_grid(const RunConfig& config) {
  std::vector<AblationCell> cells;
  const double beta = config.loss.beta;
  const int rank = config.train.rank;
  auto add = [&](AblationCell c) {
    for (const auto& e : cells) {
      if (e.label() == c.label()) return;
    }
    cells.push_back(c);
  };
  if (config.ablate.toggles) {
    add({{true, false, true}, beta, rank});
    add({{false, true, true}, beta, rank});
    add({{false, false, true}, beta, rank});
    add({{true, true, false}, beta, rank});
  }
  add({{true, true, true}, beta, rank});
  for (double b : config.ablate.betas) add({{true, true, true}, b, rank});
  for (int r : config.ablate.ranks) add({{true, true, true}, beta, r});
  return cells;
}

std::vector<AblationRow> ablate(const RunConfig& config, const TrainInputs& inputs,
                                std::span<const AblationCell> cells, const EvalPair& eval) {
  std::vector<AblationRow> rows;
  for (const auto& cell : cells) {
    AblationRow row{cell, false, {}, {}};
    try {
      RunConfig c = config;
      c.train.use_transformer = cell.flags.use_transformer;
      c.train.use_mib = cell.flags.use_mib;
      c.train.use_lora = cell.flags.use_lora;
      c.loss.beta = cell.beta;
      if (cell.rank != c.train.rank) c.train.lora_alpha = c.train.lora_alpha * cell.rank / c.train.rank;
      c.train.rank = cell.rank;
      const TrainResult trained = train(c, inputs);
      row.summary = evaluate(trained.model, eval);
      row.ok = true;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw_runtime("cannot write " + path.string());
  f << "label,use_transformer,use_mib,use_lora,beta,rank,ok,psnr_bfr,psnr_restored,fid_bfr,fid_restored,"
       "mean_lambda,error\n";
  for (const auto& r : rows) {
    std::string err = r.error;
    for (auto& ch : err) {
      if (ch == ',' || ch == '\n' || ch == '"') ch = ' ';
    }
    f << r.cell.label() << ',' << r.cell.flags.use_transformer << ',' << r.cell.flags.use_mib << ','
      << r.cell.flags.use_lora << ',' << r.cell.beta << ',' << r.cell.rank << ',' << r.ok << ','
      << format_double(r.summary.psnr_bfr) << ',' << format_double(r.summary.psnr_restored) << ','
      << format_double(r.summary.fid_bfr) << ',' << format_double(r.summary.fid_restored) << ','
      << format_double(r.summary.mean_lambda) << ',' << err << '\n';
  }
}

}  // namespace infobfr
