#include "infobfr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>
#include <opencv2/imgproc.hpp>

#include "infobfr/degradation.hpp"
#include "infobfr/error.hpp"
#include "infobfr/rng.hpp"

namespace infobfr {

namespace {

constexpr int kFeatureBatch = 64;

std::vector<int64_t> stage_widths(int dim) {
  const int64_t d1 = std::max(1, dim / 4);
  const int64_t d2 = std::max(1, dim / 4);
  std::vector<int64_t> widths{d1, d2};
  if (dim - d1 - d2 > 0) widths.push_back(dim - d1 - d2);
  return widths;
}

void require_finite(const Eigen::MatrixXd& m, const char* what) {
  if (!m.allFinite()) throw_invalid(std::string(what) + " contains non-finite values");
}

// Lexicographic row order, so that reductions do not depend on input order.
Eigen::MatrixXd sorted_rows(const Eigen::MatrixXd& m) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(m.rows()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (m(a, c) != m(b, c)) return m(a, c) < m(b, c);
    }
    return false;
  });
  Eigen::MatrixXd out(m.rows(), m.cols());
  for (std::size_t i = 0; i < order.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(order[i]);
  return out;
}

Eigen::MatrixXd symmetrize(const Eigen::MatrixXd& m) { return 0.5 * (m + m.transpose()); }

}  // namespace

FeatureExtractor FeatureExtractor::create(uint64_t seed, int dim) {
  if (dim < 2) throw_invalid("feature dimension must be >= 2");
  FeatureExtractor ex;
  ex.dim_ = dim;
  auto gen = make_generator(seed);
  int64_t in = 3;
  const auto widths = stage_widths(dim);
  for (std::size_t s = 0; s < widths.size(); ++s) {
    const std::string name = "fx" + std::to_string(s);
    add_conv(ex.weights_, name, in, widths[s], 3, gen);
    ex.weights_.at(name + ".weight").mul_(std::sqrt(6.0));
    in = widths[s];
  }
  ex.weights_.set_requires_grad(false);
  return ex;
}

Eigen::MatrixXd FeatureExtractor::features(std::span<const Image> images) const {
  torch::NoGradGuard no_grad;
  const auto stages = weights_.items().size() / 2;
  Eigen::MatrixXd out(static_cast<Eigen::Index>(images.size()), dim_);
  for (std::size_t start = 0; start < images.size(); start += kFeatureBatch) {
    const std::size_t count = std::min<std::size_t>(kFeatureBatch, images.size() - start);
    auto h = to_tensor(images.subspan(start, count)) * 2.0 - 1.0;
    std::vector<torch::Tensor> pools;
    for (std::size_t s = 0; s < stages; ++s) {
      h = torch::relu(conv2d(h, weights_, "fx" + std::to_string(s), 2));
      pools.push_back(h.mean({2, 3}));
    }
    const auto f = torch::cat(pools, 1).to(torch::kFloat64).contiguous();
    const double* p = f.data_ptr<double>();
    for (std::size_t i = 0; i < count; ++i) {
      for (int d = 0; d < dim_; ++d) out(static_cast<Eigen::Index>(start + i), d) = p[i * dim_ + d];
    }
  }
  require_finite(out, "features");
  return out;
}

GaussianFit GaussianFit::fit(const Eigen::MatrixXd& samples, double shrinkage) {
  if (samples.rows() < 2) throw_invalid("Gaussian fit needs at least 2 samples");
  require_finite(samples, "samples");
  GaussianFit g;
  g.mean = samples.colwise().mean().transpose();
  const Eigen::MatrixXd centered = samples.rowwise() - g.mean.transpose();
  g.cov = symmetrize(centered.transpose() * centered / static_cast<double>(samples.rows() - 1));
  g.cov.diagonal().array() += shrinkage;
  return g;
}

Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(symmetrize(m));
  const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

Eigen::MatrixXd sqrtm_product(const Eigen::MatrixXd& s1, const Eigen::MatrixXd& s2) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(symmetrize(s1));
  const Eigen::VectorXd ev = eig.eigenvalues().cwiseMax(0.0);
  const double floor = 1e-15 * std::max(1.0, ev.maxCoeff());
  Eigen::VectorXd root(ev.size()), inv_root(ev.size());
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    root(i) = std::sqrt(ev(i));
    inv_root(i) = ev(i) > floor ? 1.0 / root(i) : 0.0;
  }
  const Eigen::MatrixXd& v = eig.eigenvectors();
  const Eigen::MatrixXd a = v * root.asDiagonal() * v.transpose();
  const Eigen::MatrixXd a_inv = v * inv_root.asDiagonal() * v.transpose();
  return a * sqrtm_psd(a * s2 * a) * a_inv;
}

double frechet_distance(const GaussianFit& a, const GaussianFit& b) {
  if (a.mean.size() != b.mean.size()) throw_invalid("Gaussian fits have different dimensions");
  const Eigen::MatrixXd ra = sqrtm_psd(a.cov);
  const double cross = sqrtm_psd(ra * b.cov * ra).trace();
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
  return std::max(0.0, d);
}

double fid_from_features(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() == 0 || b.rows() == 0) throw_invalid("FID needs non-empty sets");
  if (a.cols() != b.cols()) throw_invalid("FID feature dimensions differ");
  require_finite(a, "features");
  require_finite(b, "features");
  return frechet_distance(GaussianFit::fit(sorted_rows(a)), GaussianFit::fit(sorted_rows(b)));
}

double fid(std::span<const Image> set_a, std::span<const Image> set_b, const FeatureExtractor& ex) {
  if (set_a.empty() || set_b.empty()) throw_invalid("FID needs non-empty sets");
  return fid_from_features(ex.features(set_a), ex.features(set_b));
}

double fid(const std::filesystem::path& dir_a, const std::filesystem::path& dir_b,
           const FeatureExtractor& ex) {
  const auto a = load_image_dir(dir_a);
  const auto b = load_image_dir(dir_b);
  return fid(a, b, ex);
}

double polynomial_kernel(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  const double v = x.dot(y) / static_cast<double>(x.size()) + 1.0;
  return v * v * v;
}

double mmd2_unbiased(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  const Eigen::Index m = x.rows(), n = y.rows();
  if (m < 2 || n < 2) throw_invalid("unbiased MMD needs at least 2 samples per set");
  if (x.cols() != y.cols()) throw_invalid("MMD feature dimensions differ");
  const double dim = static_cast<double>(x.cols());
  auto kernel = [dim](const Eigen::MatrixXd& p, const Eigen::MatrixXd& q) {
    Eigen::ArrayXXd k = (p * q.transpose()).array() / dim + 1.0;
    return Eigen::MatrixXd(k.cube());
  };
  const Eigen::MatrixXd kxx = kernel(x, x), kyy = kernel(y, y), kxy = kernel(x, y);
  const double sxx = kxx.sum() - kxx.trace();
  const double syy = kyy.sum() - kyy.trace();
  return sxx / static_cast<double>(m * (m - 1)) + syy / static_cast<double>(n * (n - 1)) -
         2.0 * kxy.sum() / static_cast<double>(m * n);
}

KidResult kid_from_features(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, int block_count,
                            uint64_t seed) {
  if (block_count < 1) throw_invalid("KID block count must be >= 1");
  const Eigen::Index size_a = a.rows() / block_count, size_b = b.rows() / block_count;
  if (size_a < 2 || size_b < 2) {
    throw_invalid("KID sets too small for " + std::to_string(block_count) + " blocks");
  }
  auto canonical = [&](const Eigen::MatrixXd& m, uint64_t stream) {
    Eigen::MatrixXd s = sorted_rows(m);
    CounterRng rng(derive_seed(seed, stream));
    for (Eigen::Index i = s.rows() - 1; i > 0; --i) {
      const auto j = static_cast<Eigen::Index>(rng.next_u64() % static_cast<uint64_t>(i + 1));
      s.row(i).swap(s.row(j));
    }
    return s;
  };
  const Eigen::MatrixXd sa = canonical(a, 1), sb = canonical(b, 2);
  KidResult r;
  for (int blk = 0; blk < block_count; ++blk) {
    r.block_values.push_back(
        mmd2_unbiased(sa.middleRows(blk * size_a, size_a), sb.middleRows(blk * size_b, size_b)));
  }
  const double mean =
      std::accumulate(r.block_values.begin(), r.block_values.end(), 0.0) / block_count;
  double var = 0.0;
  for (double v : r.block_values) var += (v - mean) * (v - mean);
  var = block_count > 1 ? var / (block_count - 1) : 0.0;
  r.mean_x100 = 100.0 * mean;
  r.std_x100 = 100.0 * std::sqrt(var);
  return r;
}

KidResult kid(std::span<const Image> set_a, std::span<const Image> set_b, const FeatureExtractor& ex,
              int block_count) {
  return kid_from_features(ex.features(set_a), ex.features(set_b), block_count);
}

namespace {

constexpr double kTiny = 1e-12;

struct GammaTable {
  std::vector<double> shapes;
  std::vector<double> ggd_ratio;   // Γ(1/a)Γ(3/a)/Γ(2/a)²
  std::vector<double> aggd_ratio;  // Γ(2/a)²/(Γ(1/a)Γ(3/a))

  GammaTable() {
    for (int i = 0; i <= 9800; ++i) {
      const double a = 0.2 + 0.001 * i;
      const double l1 = std::lgamma(1.0 / a), l2 = std::lgamma(2.0 / a), l3 = std::lgamma(3.0 / a);
      shapes.push_back(a);
      ggd_ratio.push_back(std::exp(l1 + l3 - 2.0 * l2));
      aggd_ratio.push_back(std::exp(2.0 * l2 - l1 - l3));
    }
  }

  double closest(const std::vector<double>& ratios, double target) const {
    std::size_t best = 0;
    double best_err = std::abs(ratios[0] - target);
    for (std::size_t i = 1; i < ratios.size(); ++i) {
      const double err = std::abs(ratios[i] - target);
      if (err < best_err) {
        best_err = err;
        best = i;
      }
    }
    return shapes[best];
  }
};

const GammaTable& gamma_table() {
  static const GammaTable table;
  return table;
}

std::vector<double> resize_luma_half(const std::vector<double>& luma, int h, int w) {
  std::vector<float> data(luma.begin(), luma.end());
  for (auto& v : data) v /= 255.0f;
  const Image small = resize_bicubic(make_clamped_image(h, w, 1, std::move(data)), h / 2, w / 2);
  std::vector<double> out(small.size());
  const auto d = small.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 255.0 * d[i];
  return out;
}

void append_scale_features(const std::vector<double>& mscn, int w, int y0, int x0, int p,
                           std::vector<double>& row) {
  std::vector<double> block;
  block.reserve(static_cast<std::size_t>(p) * p);
  for (int y = y0; y < y0 + p; ++y) {
    for (int x = x0; x < x0 + p; ++x) block.push_back(mscn[static_cast<std::size_t>(y) * w + x]);
  }
  const GgdFit g = fit_ggd(block);
  row.push_back(g.shape);
  row.push_back(g.variance);
  const int shifts[4][2] = {{0, 1}, {1, 0}, {1, 1}, {1, -1}};
  for (const auto& s : shifts) {
    std::vector<double> prod;
    prod.reserve(block.size());
    for (int y = y0; y < y0 + p; ++y) {
      for (int x = x0; x < x0 + p; ++x) {
        const int yy = y + s[0], xx = x + s[1];
        if (yy >= y0 + p || xx < x0 || xx >= x0 + p) continue;
        prod.push_back(mscn[static_cast<std::size_t>(y) * w + x] *
                       mscn[static_cast<std::size_t>(yy) * w + xx]);
      }
    }
    const AggdFit a = fit_aggd(prod);
    row.push_back(a.shape);
    row.push_back(a.mean);
    row.push_back(a.left_variance);
    row.push_back(a.right_variance);
  }
}

Eigen::MatrixXd pseudo_inverse_psd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(symmetrize(m));
  const Eigen::VectorXd ev = eig.eigenvalues();
  const double cutoff = 1e-10 * std::max(kTiny, ev.cwiseAbs().maxCoeff());
  Eigen::VectorXd inv(ev.size());
  for (Eigen::Index i = 0; i < ev.size(); ++i) inv(i) = ev(i) > cutoff ? 1.0 / ev(i) : 0.0;
  return eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

GgdFit fit_ggd(std::span<const double> values) {
  if (values.empty()) throw_invalid("GGD fit needs samples");
  double sq = 0.0, abs_sum = 0.0;
  for (double v : values) {
    sq += v * v;
    abs_sum += std::abs(v);
  }
  const double n = static_cast<double>(values.size());
  const double variance = sq / n;
  const double mean_abs = abs_sum / n;
  if (variance < kTiny || mean_abs < kTiny) return {2.0, variance};
  const double rho = variance / (mean_abs * mean_abs);
  return {gamma_table().closest(gamma_table().ggd_ratio, rho), variance};
}

AggdFit fit_aggd(std::span<const double> values) {
  if (values.empty()) throw_invalid("AGGD fit needs samples");
  double left_sq = 0.0, right_sq = 0.0, abs_sum = 0.0, sq = 0.0;
  std::size_t left_n = 0, right_n = 0;
  for (double v : values) {
    if (v < 0) {
      left_sq += v * v;
      ++left_n;
    } else if (v > 0) {
      right_sq += v * v;
      ++right_n;
    }
    abs_sum += std::abs(v);
    sq += v * v;
  }
  const double n = static_cast<double>(values.size());
  const double left_var = left_n ? left_sq / static_cast<double>(left_n) : 0.0;
  const double right_var = right_n ? right_sq / static_cast<double>(right_n) : 0.0;
  if (sq / n < kTiny) return {2.0, 0.0, left_var, right_var};
  const double left_std = std::sqrt(std::max(left_var, kTiny));
  const double right_std = std::sqrt(std::max(right_var, kTiny));
  const double gamma_hat = left_std / right_std;
  const double mean_abs = abs_sum / n;
  const double r_hat = mean_abs * mean_abs / (sq / n);
  const double g2 = gamma_hat * gamma_hat;
  const double r_norm = r_hat * (g2 * gamma_hat + 1.0) * (gamma_hat + 1.0) / ((g2 + 1.0) * (g2 + 1.0));
  const double shape = gamma_table().closest(gamma_table().aggd_ratio, r_norm);
  const double ratio = std::exp(std::lgamma(1.0 / shape) - std::lgamma(3.0 / shape));
  const double bl = left_std * std::sqrt(ratio);
  const double br = right_std * std::sqrt(ratio);
  const double mean = (br - bl) * std::exp(std::lgamma(2.0 / shape) - std::lgamma(1.0 / shape));
  return {shape, mean, left_var, right_var};
}

std::vector<double> mscn_coefficients(const std::vector<double>& luma, int height, int width) {
  if (luma.size() != static_cast<std::size_t>(height) * width) throw_invalid("luma size mismatch");
  cv::Mat img(height, width, CV_64F, const_cast<double*>(luma.data()));
  cv::Mat mu, mu_sq, sigma;
  const cv::Size window(7, 7);
  cv::GaussianBlur(img, mu, window, 7.0 / 6.0, 7.0 / 6.0, cv::BORDER_REPLICATE);
  cv::GaussianBlur(img.mul(img), mu_sq, window, 7.0 / 6.0, 7.0 / 6.0, cv::BORDER_REPLICATE);
  std::vector<double> out(luma.size());
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double m = mu.at<double>(y, x);
      const double s = std::sqrt(std::abs(mu_sq.at<double>(y, x) - m * m));
      out[static_cast<std::size_t>(y) * width + x] = (img.at<double>(y, x) - m) / (s + 1.0);
    }
  }
  return out;
}

Eigen::MatrixXd niqe_patch_features(const Image& img, int patch_size) {
  if (patch_size < 8 || patch_size % 2 != 0) throw_invalid("NIQE patch size must be even and >= 8");
  if (img.height() < patch_size || img.width() < patch_size) {
    throw_invalid("NIQE needs images of at least " + std::to_string(patch_size) + "x" +
                  std::to_string(patch_size));
  }
  const Image gray = to_grayscale(img);
  const int h = gray.height(), w = gray.width();
  std::vector<double> luma(gray.size());
  const auto d = gray.data();
  for (std::size_t i = 0; i < luma.size(); ++i) luma[i] = 255.0 * d[i];
  const auto mscn1 = mscn_coefficients(luma, h, w);
  const auto mscn2 = mscn_coefficients(resize_luma_half(luma, h, w), h / 2, w / 2);

  const int rows = h / patch_size, cols = w / patch_size;
  const int half = patch_size / 2;
  Eigen::MatrixXd out(rows * cols, kNiqeFeatureDim);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      std::vector<double> row;
      row.reserve(kNiqeFeatureDim);
      append_scale_features(mscn1, w, r * patch_size, c * patch_size, patch_size, row);
      append_scale_features(mscn2, w / 2, r * half, c * half, half, row);
      for (int k = 0; k < kNiqeFeatureDim; ++k) out(r * cols + c, k) = row[static_cast<std::size_t>(k)];
    }
  }
  return out;
}

void NiqeModel::save(const std::filesystem::path& path) const {
  nlohmann::json j;
  j["patch_size"] = patch_size;
  j["mean"] = std::vector<double>(mean.data(), mean.data() + mean.size());
  std::vector<std::vector<double>> rows;
  for (Eigen::Index r = 0; r < cov.rows(); ++r) {
    rows.emplace_back(cov.cols());
    for (Eigen::Index c = 0; c < cov.cols(); ++c) rows.back()[static_cast<std::size_t>(c)] = cov(r, c);
  }
  j["cov"] = rows;
  std::ofstream f(path);
  if (!f) throw_runtime("cannot write " + path.string());
  f << j.dump(1) << "\n";
}

NiqeModel NiqeModel::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw_missing("cannot open NIQE model " + path.string());
  const auto j = nlohmann::json::parse(f);
  NiqeModel m;
  m.patch_size = j.at("patch_size").get<int>();
  const auto mean = j.at("mean").get<std::vector<double>>();
  const auto cov = j.at("cov").get<std::vector<std::vector<double>>>();
  if (mean.size() != static_cast<std::size_t>(kNiqeFeatureDim) || cov.size() != mean.size()) {
    throw_invalid("NIQE model has wrong dimensions");
  }
  m.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
  m.cov.resize(kNiqeFeatureDim, kNiqeFeatureDim);
  for (int r = 0; r < kNiqeFeatureDim; ++r) {
    if (cov[static_cast<std::size_t>(r)].size() != mean.size()) throw_invalid("NIQE model has wrong dimensions");
    for (int c = 0; c < kNiqeFeatureDim; ++c) m.cov(r, c) = cov[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
  }
  return m;
}

namespace {

Image mirror(const Image& img) {
  const int h = img.height(), w = img.width(), c = img.channels();
  std::vector<float> data(img.data().size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < c; ++k) {
        data[(static_cast<std::size_t>(y) * w + x) * c + k] = img.at(y, w - 1 - x, k);
      }
  return Image(h, w, c, std::move(data));
}

}  // namespace

NiqeModel fit_niqe_model(std::span<const Image> pristine, int patch_size) {
  if (pristine.size() < kMinNiqeImages) {
    throw_invalid("NIQE fit needs at least " + std::to_string(kMinNiqeImages) + " pristine images");
  }
  std::vector<Eigen::MatrixXd> parts;
  Eigen::Index total = 0;
  for (const auto& img : pristine) {
    parts.push_back(niqe_patch_features(img, patch_size));
    total += parts.back().rows();
    // Mirrored copy: left/right handedness of the corpus should not count as unnatural.
    parts.push_back(niqe_patch_features(mirror(img), patch_size));
    total += parts.back().rows();
  }
  if (total < 2) throw_invalid("NIQE fit has too few patches");
  Eigen::MatrixXd all(total, kNiqeFeatureDim);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    all.middleRows(at, p.rows()) = p;
    at += p.rows();
  }
  const GaussianFit g = GaussianFit::fit(sorted_rows(all));
  return {patch_size, g.mean, g.cov};
}

NiqeModel fit_niqe_model(const std::filesystem::path& pristine_dir, int patch_size) {
  const auto images = load_image_dir(pristine_dir);
  return fit_niqe_model(images, patch_size);
}

double niqe(const Image& img, const NiqeModel& model) {
  const Eigen::MatrixXd f = niqe_patch_features(img, model.patch_size);
  const Eigen::VectorXd nu = f.colwise().mean().transpose();
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(kNiqeFeatureDim, kNiqeFeatureDim);
  if (f.rows() > 1) cov = GaussianFit::fit(f, 0.0).cov;
  const Eigen::VectorXd diff = nu - model.mean;
  const double d2 = diff.dot(pseudo_inverse_psd(0.5 * (cov + model.cov)) * diff);
  return std::sqrt(std::max(0.0, d2));
}

}  // namespace infobfr
