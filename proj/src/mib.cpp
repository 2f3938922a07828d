#include "infobfr/mib.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "infobfr/error.hpp"

namespace infobfr {

void ManifoldStats::validate() const {
  if (mu_qc.empty() || mu_qc.size() != sigma_qc.size()) {
    throw_invalid("manifold stats need matching, non-empty mean/std arrays");
  }
  if (sample_count < 1) throw_invalid("manifold stats sample_count must be >= 1");
  for (std::size_t c = 0; c < mu_qc.size(); ++c) {
    if (!std::isfinite(mu_qc[c]) || !std::isfinite(sigma_qc[c])) {
      throw_invalid("manifold stats must be finite");
    }
    if (sigma_qc[c] < kMinimalStd) throw_invalid("manifold std below the minimal std floor");
  }
}

torch::Tensor ManifoldStats::mean_tensor() const {
  std::vector<float> v(mu_qc.begin(), mu_qc.end());
  return torch::tensor(v).view({1, channels(), 1, 1});
}

torch::Tensor ManifoldStats::std_tensor() const {
  std::vector<float> v(sigma_qc.size());
  for (std::size_t c = 0; c < v.size(); ++c) v[c] = static_cast<float>(std::max(sigma_qc[c], kMinimalStd));
  return torch::tensor(v).view({1, channels(), 1, 1});
}

void ManifoldStats::save(const std::filesystem::path& path) const {
  validate();
  const nlohmann::json j = {{"kind", "manifold_stats"},
                            {"version", 1},
                            {"mu_qc", mu_qc},
                            {"sigma_qc", sigma_qc},
                            {"minimal_std", kMinimalStd},
                            {"sample_count", sample_count},
                            {"vae_hash", vae_hash}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw_runtime("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

ManifoldStats ManifoldStats::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw_missing("manifold stats not found: " + path.string());
  const auto j = nlohmann::json::parse(in);
  if (j.value("kind", "") != "manifold_stats") throw_invalid(path.string() + " is not a stats file");
  ManifoldStats stats;
  stats.mu_qc = j.at("mu_qc").get<std::vector<double>>();
  stats.sigma_qc = j.at("sigma_qc").get<std::vector<double>>();
  stats.sample_count = j.at("sample_count").get<int64_t>();
  stats.vae_hash = j.value("vae_hash", "");
  stats.validate();
  return stats;
}

ManifoldStats stats_from_manifolds(std::span<const torch::Tensor> manifolds, std::string vae_hash) {
  if (manifolds.empty()) throw_invalid("no manifolds to summarize");
  const int64_t channels = manifolds.front().size(0);

  // Per-manifold (sum, sum of squares, count) in double, sorted before the
  // final reduction so the result is independent of input order.
  struct Partial {
    std::vector<double> sum, sq;
    double count;
    bool operator<(const Partial& o) const { return std::tie(sum, sq) < std::tie(o.sum, o.sq); }
  };
  std::vector<Partial> partials;
  for (const auto& m : manifolds) {
    if (m.dim() != 3 || m.size(0) != channels) throw_invalid("manifolds must be C x H x W with equal C");
    const auto d = m.detach().to(torch::kFloat64).reshape({channels, -1}).contiguous();
    const double* p = d.data_ptr<double>();
    const int64_t n = d.size(1);
    Partial part{std::vector<double>(channels, 0.0), std::vector<double>(channels, 0.0),
                 static_cast<double>(n)};
    for (int64_t c = 0; c < channels; ++c) {
      for (int64_t i = 0; i < n; ++i) {
        const double v = p[c * n + i];
        part.sum[c] += v;
        part.sq[c] += v * v;
      }
    }
    partials.push_back(std::move(part));
  }
  std::sort(partials.begin(), partials.end());

  ManifoldStats stats;
  stats.mu_qc.assign(channels, 0.0);
  stats.sigma_qc.assign(channels, 0.0);
  std::vector<double> sum(channels, 0.0), sq(channels, 0.0);
  double count = 0.0;
  for (const auto& part : partials) {
    for (int64_t c = 0; c < channels; ++c) {
      sum[c] += part.sum[c];
      sq[c] += part.sq[c];
    }
    count += part.count;
  }
  for (int64_t c = 0; c < channels; ++c) {
    const double mean = sum[c] / count;
    const double var = std::max(0.0, sq[c] / count - mean * mean);
    stats.mu_qc[c] = mean;
    stats.sigma_qc[c] = std::max(std::sqrt(var), kMinimalStd);
  }
  stats.sample_count = static_cast<int64_t>(manifolds.size());
  stats.vae_hash = std::move(vae_hash);
  return stats;
}

ManifoldStats compute_manifold_stats(const AutoencoderModel& model, std::span<const Image> hq_images,
                                     std::size_t n) {
  if (n < 2) throw_invalid("manifold stats need n >= 2");
  if (hq_images.size() < n) {
    throw_invalid("manifold stats need " + std::to_string(n) + " images, found " +
                  std::to_string(hq_images.size()));
  }
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> manifolds;
  manifolds.reserve(n);
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < n; start += kChunk) {
    const auto count = std::min(kChunk, n - start);
    const auto r = model.encode_manifold(to_tensor(hq_images.subspan(start, count))).tensor();
    for (int64_t i = 0; i < r.size(0); ++i) manifolds.push_back(r[i]);
  }
  return stats_from_manifolds(manifolds, model.hash());
}

TensorGrid normalize(const TensorGrid& manifold, const ManifoldStats& stats) {
  if (manifold.channels() != stats.channels()) throw_invalid("stats channel count mismatch");
  return TensorGrid((manifold.tensor() - stats.mean_tensor()) / stats.std_tensor());
}

FilterHead FilterHead::create(int channels) {
  FilterHead head;
  head.channels = channels;
  add_zero_conv(head.weights, "filter", channels, channels, 1);
  return head;
}

TensorGrid info_filter(const FilterHead& head, const TensorGrid& normalized) {
  if (normalized.channels() != head.channels) throw_invalid("filter head channel mismatch");
  const auto logits = conv2d(normalized.tensor(), head.weights, "filter");
  // Lower clamp keeps lambda strictly positive once sigmoid underflows.
  return TensorGrid(torch::sigmoid(logits).clamp(1e-12, head.lambda_cap));
}

namespace {

void check_lambda(const torch::Tensor& lambda, double upper, const char* what) {
  const auto l = lambda.detach();
  if (!(l.min().item<double>() >= 0.0) || !(l.max().item<double>() <= upper)) {
    throw_invalid(std::string(what) + ": lambda outside [0, " + std::to_string(upper) + "]");
  }
}

}  // namespace

TensorGrid compress(const TensorGrid& manifold, const TensorGrid& lambda, const ManifoldStats& stats,
                    CompressMode mode, uint64_t seed) {
  if (!manifold.same_shape(lambda)) throw_invalid("compress: manifold and lambda shapes differ");
  if (manifold.channels() != stats.channels()) throw_invalid("compress: stats channel mismatch");
  check_lambda(lambda.tensor(), 1.0, "compress");
  const auto& r = manifold.tensor();
  const auto& l = lambda.tensor();
  if (mode == CompressMode::kInfer) return TensorGrid(l * r);
  auto gen = make_generator(seed);
  const auto eps = stats.mean_tensor() + stats.std_tensor() * torch::randn(r.sizes(), gen);
  return TensorGrid(l * r + (1.0 - l) * eps);
}

torch::Tensor kl_to_standard_normal(const torch::Tensor& mean, const torch::Tensor& std) {
  const auto var = std * std;
  return -0.5 * (torch::log(var) - var - mean * mean + 1.0);
}

torch::Tensor info_loss(const TensorGrid& manifold, const TensorGrid& lambda, const ManifoldStats& stats,
                        double lambda_cap) {
  if (!manifold.same_shape(lambda)) throw_invalid("info_loss: manifold and lambda shapes differ");
  if (manifold.channels() != stats.channels()) throw_invalid("info_loss: stats channel mismatch");
  check_lambda(lambda.tensor(), lambda_cap, "info_loss");
  const auto& l = lambda.tensor();
  const auto keep = 1.0 - l;
  const auto shifted = l * (manifold.tensor() - stats.mean_tensor()) / stats.std_tensor();
  const auto per_element =
      -0.5 * (torch::log(keep * keep) - keep * keep - shifted * shifted + 1.0);
  return per_element.mean();
}

}  // namespace infobfr
