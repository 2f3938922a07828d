// Prints one PASS/FAIL line per acceptance criterion; exits nonzero on any FAIL.
// usage: infobfr_acceptance [run dir produced by run_pipeline.sh]
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "infobfr/bfr_stubs.hpp"
#include "infobfr/checkpoint.hpp"
#include "infobfr/cli.hpp"
#include "infobfr/degradation.hpp"
#include "infobfr/metrics.hpp"
#include "infobfr/pipeline.hpp"
#include "infobfr/rng.hpp"
#include "infobfr/toy_faces.hpp"
#include "test_util.hpp"

namespace infobfr {
namespace {

namespace fs = std::filesystem;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(4) << v;
  return s.str();
}

using CsvRow = std::map<std::string, std::string>;

std::vector<CsvRow> read_csv(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    return cells;
  };
  std::string line;
  std::getline(f, line);
  const auto header = split(line);
  std::vector<CsvRow> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    CsvRow row;
    for (std::size_t i = 0; i < header.size() && i < cells.size(); ++i) row[header[i]] = cells[i];
    rows.push_back(row);
  }
  return rows;
}

ManifoldStats flat_stats(int channels, double mu, double sigma) {
  ManifoldStats s;
  s.mu_qc.assign(channels, mu);
  s.sigma_qc.assign(channels, sigma);
  s.sample_count = 1;
  return s;
}

// Artifacts written by run_pipeline.sh, loaded once.
struct Run {
  fs::path dir;
  LoadedModel model;
  std::shared_ptr<const AutoencoderModel> vae;
  std::shared_ptr<const DenoiserModel> denoiser;
  std::shared_ptr<const ConvBfrStub> stub;
  std::vector<Image> hq;
  std::vector<Image> val;

  static Run load(const fs::path& dir) {
    if (!fs::exists(dir / "stamp")) throw std::runtime_error("no pipeline artifacts in " + dir.string());
    return {dir,
            load_model(dir / "model" / "model.ibfr"),
            std::make_shared<const AutoencoderModel>(AutoencoderModel::load(dir / "vae" / "vae.ibfr")),
            std::make_shared<const DenoiserModel>(DenoiserModel::load(dir / "denoiser" / "denoiser.ibfr")),
            ConvBfrStub::load(dir / "stub" / "stub.ibfr"),
            load_image_dir(dir / "hq"),
            load_image_dir(dir / "val")};
  }

  TrainInputs inputs() const { return {vae, denoiser, stub, model.model.stats, hq}; }
};

double info_scalar(double lambda, double r, double mu, double sigma) {
  return info_loss(TensorGrid(torch::full({1, 1, 1, 1}, r)), TensorGrid(torch::full({1, 1, 1, 1}, lambda)),
                   flat_stats(1, mu, sigma))
      .item<double>();
}

Outcome criterion1() {
  const auto start = std::chrono::steady_clock::now();
  CounterRng rng(2024);
  const auto f64 = torch::TensorOptions().dtype(torch::kFloat64);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double lambda = 0.05 + 0.85 * rng.uniform();
    const double mu = rng.uniform() * 4 - 2;
    const double sigma = 0.2 + 1.8 * rng.uniform();
    const double r = mu + sigma * (rng.uniform() * 4 - 2);
    const double mp = lambda * r + (1 - lambda) * mu, sp = (1 - lambda) * sigma;
    auto gen = make_generator(5000 + i);
    const auto x = torch::randn({1'000'000}, gen, f64) * sp + mp;
    const auto log_ratio = -0.5 * ((x - mp) / sp).pow(2) - std::log(sp) + 0.5 * ((x - mu) / sigma).pow(2) +
                           std::log(sigma);
    worst = std::max(worst, std::abs(info_scalar(lambda, r, mu, sigma) - log_ratio.mean().item<double>()));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {worst < 1e-2 && secs < 120.0, "max |closed - MC| " + fmt(worst) + " over 100 configs, " + fmt(secs) + " s"};
}

Outcome criterion2() {
  const auto stats = flat_stats(8, 0.3, 1.7);
  auto gen = make_generator(7);
  const auto r = torch::randn({2, 8, 4, 4}, gen) * 3;
  const double at_zero = info_loss(TensorGrid(r), TensorGrid(torch::zeros_like(r)), stats).item<double>();
  const double at_cap =
      info_loss(TensorGrid(r), TensorGrid(torch::full_like(r, kDefaultLambdaCap)), stats).item<double>();
  const auto z = compress(TensorGrid(r), TensorGrid(torch::ones_like(r)), stats, CompressMode::kInfer, 3).tensor();
  const bool same = torch::equal(z, r);
  return {std::abs(at_zero) <= 1e-12 && std::isfinite(at_cap) && same,
          "L(0) " + fmt(at_zero) + ", L(cap) " + fmt(at_cap) + ", Z==R " + (same ? "yes" : "no")};
}

Outcome criterion3() {
  const auto schedule = NoiseSchedule::linear();
  const auto f64 = torch::TensorOptions().dtype(torch::kFloat64);
  CounterRng rng(33);
  double worst = 0.0;
  for (int i = 0; i < 10; ++i) {
    auto gen = make_generator(300 + i);
    const auto z0 = torch::randn({1, 4, 8, 8}, gen, f64);
    const auto eps = torch::randn({1, 4, 8, 8}, gen, f64);
    const int64_t t = static_cast<int64_t>(rng.next_u64() % schedule.steps());
    const double ab = schedule.alpha_bar(t);
    const auto zt = std::sqrt(ab) * z0 + std::sqrt(1 - ab) * eps;
    const NoisePredictor oracle = [&](const torch::Tensor&, int64_t) { return eps; };
    worst = std::max(worst, (one_step_denoise(zt, oracle(zt, t), ab) - z0).abs().max().item<double>());
  }
  return {worst < 1e-6, "max |z0_hat - z0| " + fmt(worst) + " over 10 triples"};
}

Outcome criterion4(const Run& run) {
  torch::NoGradGuard no_grad;
  auto gen = make_generator(44);
  const auto z = torch::randn({2, 4, 16, 16}, gen);
  const auto fresh = inject_lora(*run.denoiser, 4, 4.0, 1);
  const double init_diff = (fresh.predict_noise(z, 200) - run.denoiser->predict_noise(z, 200)).abs().max().item<double>();

  const DenoiserModel& trained = run.model.model.denoiser;
  if (!trained.has_lora()) return {false, "trained model carries no adapters"};
  const auto merged = merge_lora(trained);
  const double merge_diff = (merged.predict_noise(z, 200) - trained.predict_noise(z, 200)).abs().max().item<double>();

  const int rank = trained.lora().rank;
  int64_t worst_rank = 0;
  for (const auto& layer : trained.adaptable_layers()) {
    const auto w = trained.base().at(layer + ".weight");
    const auto delta = trained.lora().delta(layer, w.sizes()).reshape({w.size(0), -1}).to(torch::kFloat64);
    const auto sv = torch::linalg_svdvals(delta);
    const double cutoff = 1e-6 * std::max(sv.max().item<double>(), 1e-30);
    worst_rank = std::max(worst_rank, (sv > cutoff).sum().item<int64_t>());
  }
  const double frac = static_cast<double>(run.model.model.trainable_parameter_count()) /
                      static_cast<double>(run.model.model.total_parameter_count());
  const bool ok = init_diff == 0.0 && merge_diff < 1e-5 && worst_rank <= rank && frac < 0.10;
  return {ok, "init diff " + fmt(init_diff) + ", merge diff " + fmt(merge_diff) + ", max rank " +
                  std::to_string(worst_rank) + "/" + std::to_string(rank) + ", trainable " + fmt(100 * frac) + "%"};
}

Outcome criterion5(const Run& run) {
  torch::NoGradGuard no_grad;
  const auto& m = run.model.model;
  m.denoiser.reset_forward_count();
  restore(m, run.val.front());
  const int64_t passes = m.denoiser.forward_count();

  const auto x = to_tensor(std::span<const Image>(run.val).subspan(0, 16));
  auto median_seconds = [](int reps, const std::function<void()>& fn) {
    fn();
    std::vector<double> t;
    for (int i = 0; i < reps; ++i) {
      const auto s = std::chrono::steady_clock::now();
      fn();
      t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - s).count());
    }
    std::sort(t.begin(), t.end());
    return t[t.size() / 2];
  };
  const double one = median_seconds(5, [&] { restore_batch(m, x); });
  const double fifty = median_seconds(3, [&] { restore_multistep(m, x, 50); });
  return {passes == 1 && one < fifty / 10.0, std::to_string(passes) + " denoiser pass, restore " + fmt(one) +
                                                 " s vs 50-step " + fmt(fifty) + " s (ratio " + fmt(one / fifty) + ")"};
}

Outcome criterion6(const Run& run) {
  using testing::grad_check;
  // Roughly cbrt(float32 eps): balances truncation against rounding.
  constexpr double kStep = 5e-3;
  const auto& config = run.model.config;
  std::vector<std::pair<std::string, testing::GradCheck>> checks;

  {
    auto r = encode_manifold(*run.vae, run.val[0]).tensor().detach().clone().requires_grad_(true);
    auto gen = make_generator(61);
    auto l = (torch::rand(r.sizes(), gen) * 0.7 + 0.1).requires_grad_(true);
    const auto& stats = run.model.model.stats;
    checks.emplace_back("info_loss", grad_check([&] { return info_loss(TensorGrid(r), TensorGrid(l), stats); },
                                                {r, l}, 30, 62, kStep));
  }
  {
    AttentionBlock block = run.model.model.attention;
    block.weights = block.weights.clone();
    block.weights.set_requires_grad(true);
    const auto r = encode_manifold(*run.vae, run.val[1]).tensor().detach();
    auto gen = make_generator(63);
    const auto target = torch::randn(r.sizes(), gen);
    checks.emplace_back("attend", grad_check([&] { return (attend(block, TensorGrid(r)).tensor() - target).pow(2).mean(); },
                                             block.weights.parameters(), 30, 64, kStep));
  }
  const auto net = PerceptualNet::create();
  {
    auto x = to_tensor(run.stub->restore(run.val[2])).clamp(0.02, 0.98).requires_grad_(true);
    const auto y = to_tensor(run.val[2]);
    checks.emplace_back("data_loss", grad_check([&] { return data_loss(x, y, net, config.loss); }, {x}, 30, 65, kStep));
  }
  {
    const InfoBfrModel& m = run.model.model;
    const auto batch = synthesize_batch(run.inputs(), config, 66);
    auto params = m.trainable_parameters();
    for (auto& p : params) p.requires_grad_(true);
    auto loss = [&] {
      const auto out = forward(m, batch.bfr, CompressMode::kTrain, 67);
      return total_loss(out.info_loss, data_loss(out.restored, batch.hq, net, config.loss), config.loss);
    };
    checks.emplace_back("total_loss", grad_check(loss, params, 30, 68, kStep));
  }
  bool ok = true;
  std::string detail;
  for (const auto& [name, c] : checks) {
    ok = ok && c.checked >= 20 && c.max_rel_error < 1e-2;
    detail += (detail.empty() ? "" : ", ") + name + " " + fmt(c.max_rel_error) + " (" + std::to_string(c.checked) + ")";
  }
  return {ok, "max rel error: " + detail};
}

Eigen::MatrixXd gaussian_rows(int n, const std::vector<double>& mean, const std::vector<double>& sd, uint64_t seed) {
  auto gen = make_generator(seed);
  const int d = static_cast<int>(mean.size());
  const auto z = torch::randn({n, d}, gen, torch::TensorOptions().dtype(torch::kFloat64)).contiguous();
  Eigen::MatrixXd out(n, d);
  const double* p = z.data_ptr<double>();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out(i, j) = mean[j] + sd[j] * p[i * d + j];
  return out;
}

Outcome criterion7() {
  const auto ex = FeatureExtractor::create();
  std::vector<Image> set;
  for (int i = 0; i < 16; ++i) set.push_back(generate_toy_face(700 + i, 64));
  const double self = std::abs(fid(set, set, ex));

  const std::vector<double> m1 = {0, 1, -1, 2}, m2 = {3, -2, 2, -1};
  const std::vector<double> s1 = {1, 2, 0.5, 1.5}, s2 = {2, 1, 1, 0.5};
  double expect = 0;
  for (int j = 0; j < 4; ++j) expect += (m1[j] - m2[j]) * (m1[j] - m2[j]) + (s1[j] - s2[j]) * (s1[j] - s2[j]);
  const double rel = std::abs(fid_from_features(gaussian_rows(5000, m1, s1, 1), gaussian_rows(5000, m2, s2, 2)) - expect) / expect;

  Eigen::MatrixXd x(3, 2), y(3, 2);
  x << 0.1, 0.9, -0.4, 0.3, 1.2, -0.7;
  y << 0.5, 0.5, 0.0, -1.1, 0.8, 0.2;
  auto k = [](const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) { return std::pow(a.dot(b) / 2.0 + 1.0, 3); };
  double xx = 0, yy = 0, xy = 0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      if (i != j) {
        xx += k(x.row(i), x.row(j));
        yy += k(y.row(i), y.row(j));
      }
      xy += k(x.row(i), y.row(j));
    }
  const double kid_err = std::abs(mmd2_unbiased(x, y) - (xx / 6 + yy / 6 - 2 * xy / 9));

  std::vector<Image> pristine;
  for (int i = 0; i < 50; ++i) pristine.push_back(generate_toy_face(5000 + i, 192));
  const NiqeModel model = fit_niqe_model(pristine, 96);
  int wins = 0;
  for (int i = 0; i < 20; ++i) {
    const auto clean = generate_toy_face(9000 + i, 192);
    const auto noisy = add_gaussian_noise(clean, 20.0, {static_cast<uint64_t>(i)});
    if (niqe(clean, model) < niqe(noisy, model)) ++wins;
  }
  const bool ok = self < 1e-6 && rel < 0.02 && kid_err < 1e-8 && wins >= 18;
  return {ok, "fid(S,S) " + fmt(self) + ", gaussian FID rel err " + fmt(rel) + ", KID err " + fmt(kid_err) +
                  ", NIQE " + std::to_string(wins) + "/20"};
}

Outcome criterion8(const Run& run) {
  std::map<double, double> lambda;
  for (const auto& r : read_csv(run.dir / "ablate" / "ablation.csv")) {
    if (r.at("ok") == "1") lambda[std::stod(r.at("beta"))] = std::stod(r.at("mean_lambda"));
  }
  bool ok = true;
  double previous = 2.0;
  std::string detail;
  for (double b : {0.0, 1.0, 5.0, 20.0}) {
    if (!lambda.contains(b)) return {false, "no successful ablation row for beta " + fmt(b)};
    ok = ok && lambda.at(b) <= previous;
    previous = lambda.at(b);
    detail += (detail.empty() ? "" : ", ") + std::string("beta ") + fmt(b) + ": " + fmt(lambda.at(b));
  }
  return {ok, "mean lambda " + detail};
}

Outcome criterion9(const Run& run) {
  std::map<std::string, double> m;
  for (const auto& r : read_csv(run.dir / "eval" / "metrics.csv")) m[r.at("metric")] = std::stod(r.at("value"));
  const double gain = m.at("psnr_restored") - m.at("psnr_bfr");
  const double fid_ratio = m.at("fid_restored") / m.at("fid_bfr");
  return {gain >= 0.5 && fid_ratio <= 0.9, "PSNR " + fmt(m.at("psnr_bfr")) + " -> " + fmt(m.at("psnr_restored")) +
                                               " dB (+" + fmt(gain) + "), FID " + fmt(m.at("fid_bfr")) + " -> " +
                                               fmt(m.at("fid_restored")) + " (x" + fmt(fid_ratio) + ")"};
}

Outcome criterion10(const Run& run) {
  std::ifstream status_file(run.dir / "replay.status");
  int train_status = -1;
  status_file >> train_status;
  const bool train_same = train_status == 0 && file_sha256(run.dir / "model" / "model.ibfr") ==
                                                   file_sha256(run.dir / "model_replay" / "model.ibfr");
  const fs::path scratch = fs::temp_directory_path() / "infobfr_acceptance_replay";
  fs::remove_all(scratch);
  int replayed = 0, reproduced = 0;
  std::ostringstream sink;
  for (const char* step : {"lq", "stats", "restored", "mask", "eval"}) {
    ++replayed;
    const int code = run_cli({"infobfr", "replay", "--manifest", (run.dir / step / "manifest.json").string(), "--out",
                              (scratch / step).string()},
                             sink, sink);
    if (code == kExitOk) ++reproduced;
  }
  fs::remove_all(scratch);
  const bool frozen = run.model.model.vae->hash() == run.vae->hash() &&
                      run.model.model.denoiser.hash() == run.denoiser->hash();
  return {train_same && reproduced == replayed && frozen,
          std::string("train replay ") + (train_same ? "identical" : "DIFFERENT") + ", " + std::to_string(reproduced) +
              "/" + std::to_string(replayed) + " other runs reproduced, frozen hashes " + (frozen ? "unchanged" : "CHANGED")};
}

}  // namespace
}  // namespace infobfr

int main(int argc, char** argv) {
  using namespace infobfr;
  torch::set_num_threads(1);
  const std::filesystem::path dir = argc > 1 ? argv[1] : INFOBFR_RUN_DIR;

  std::optional<Run> run;
  std::string load_error;
  try {
    run = Run::load(dir);
  } catch (const std::exception& e) {
    load_error = e.what();
  }

  const std::vector<std::function<Outcome()>> criteria = {
      criterion1,
      criterion2,
      criterion3,
      [&] { return criterion4(*run); },
      [&] { return criterion5(*run); },
      [&] { return criterion6(*run); },
      criterion7,
      [&] { return criterion8(*run); },
      [&] { return criterion9(*run); },
      [&] { return criterion10(*run); },
  };
  const std::vector<bool> needs_run = {false, false, false, true, true, true, false, true, true, true};
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    if (needs_run[i] && !run) {
      o = {false, "pipeline artifacts unavailable: " + load_error};
    } else {
      try {
        o = criteria[i]();
      } catch (const std::exception& e) {
        o = {false, std::string("error: ") + e.what()};
      }
    }
    if (!o.pass) ++failed;
    std::cout << "criterion " << std::setw(2) << i + 1 << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
