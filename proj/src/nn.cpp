#include "infobfr/nn.hpp"

#include <cmath>

#include "infobfr/checkpoint.hpp"
#include "infobfr/error.hpp"

namespace infobfr {

void WeightSet::add(const std::string& name, torch::Tensor value) {
  if (tensors_.count(name)) throw_invalid("duplicate weight name: " + name);
  tensors_.emplace(name, std::move(value));
}

const torch::Tensor& WeightSet::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw_invalid("unknown weight: " + name);
  return it->second;
}

torch::Tensor& WeightSet::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw_invalid("unknown weight: " + name);
  return it->second;
}

std::vector<torch::Tensor> WeightSet::parameters() const {
  std::vector<torch::Tensor> out;
  out.reserve(tensors_.size());
  for (const auto& [_, t] : tensors_) out.push_back(t);
  return out;
}

int64_t WeightSet::numel() const {
  int64_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.numel();
  return n;
}

void WeightSet::set_requires_grad(bool flag) {
  for (auto& [_, t] : tensors_) t.set_requires_grad(flag);
}

WeightSet WeightSet::clone() const {
  WeightSet copy;
  for (const auto& [name, t] : tensors_) copy.add(name, t.detach().clone());
  return copy;
}

std::string WeightSet::hash() const {
  std::string buffer;
  for (const auto& [name, t] : tensors_) {
    buffer += name;
    buffer.push_back('\0');
    for (int64_t d : t.sizes()) buffer += std::to_string(d) + ",";
    buffer.push_back('\0');
    const auto c = t.detach().to(torch::kFloat32).contiguous();
    buffer.append(reinterpret_cast<const char*>(c.data_ptr<float>()),
                  static_cast<std::size_t>(c.numel()) * sizeof(float));
  }
  return sha256_hex(buffer.data(), buffer.size());
}

torch::Generator make_generator(uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(seed);
  return gen;
}

namespace {

torch::Tensor uniform(at::IntArrayRef shape, double bound, torch::Generator& gen) {
  return torch::rand(shape, gen) * (2.0 * bound) - bound;
}

}  // namespace

void add_conv(WeightSet& w, const std::string& name, int64_t in, int64_t out, int64_t kernel,
              torch::Generator& gen, bool bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
  w.add(name + ".weight", uniform({out, in, kernel, kernel}, bound, gen));
  if (bias) w.add(name + ".bias", uniform({out}, bound, gen));
}

void add_linear(WeightSet& w, const std::string& name, int64_t in, int64_t out,
                torch::Generator& gen) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  w.add(name + ".weight", uniform({out, in}, bound, gen));
  w.add(name + ".bias", uniform({out}, bound, gen));
}

void add_zero_conv(WeightSet& w, const std::string& name, int64_t in, int64_t out,
                   int64_t kernel) {
  w.add(name + ".weight", torch::zeros({out, in, kernel, kernel}));
  w.add(name + ".bias", torch::zeros({out}));
}

torch::Tensor conv2d(const torch::Tensor& x, const torch::Tensor& weight,
                     const torch::Tensor& bias, int64_t stride) {
  const int64_t pad = weight.size(2) / 2;
  return torch::conv2d(x, weight, bias, {stride, stride}, {pad, pad});
}

torch::Tensor conv2d(const torch::Tensor& x, const WeightSet& w, const std::string& name,
                     int64_t stride) {
  const std::string bias_name = name + ".bias";
  const torch::Tensor bias = w.contains(bias_name) ? w.at(bias_name) : torch::Tensor();
  return conv2d(x, w.at(name + ".weight"), bias, stride);
}

torch::Tensor linear(const torch::Tensor& x, const WeightSet& w, const std::string& name) {
  return torch::linear(x, w.at(name + ".weight"), w.at(name + ".bias"));
}

torch::Tensor upsample_nearest2x(const torch::Tensor& x) {
  return torch::upsample_nearest2d(x, std::vector<int64_t>{x.size(2) * 2, x.size(3) * 2});
}

}  // namespace infobfr
