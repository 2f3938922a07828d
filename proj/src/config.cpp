#include "infobfr/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "infobfr/error.hpp"
#include "infobfr/rng.hpp"

namespace infobfr {

namespace {

using nlohmann::json;

// The same field list drives both serialization directions.
struct Writer {
  json& out;

  template <class T>
  void field(const char* key, T& value) {
    out[key] = value;
  }
  template <class F>
  void section(const char* key, F&& visit) {
    Writer sub{out[key] = json::object()};
    visit(sub);
  }
};

struct Reader {
  const json& in;
  std::string prefix;
  std::set<std::string> seen{};

  template <class T>
  void field(const char* key, T& value) {
    seen.insert(key);
    if (!in.contains(key)) return;
    try {
      value = in.at(key).get<T>();
    } catch (const json::exception&) {
      throw_invalid("config key " + prefix + key + " has the wrong type");
    }
  }
  template <class F>
  void section(const char* key, F&& visit) {
    seen.insert(key);
    if (!in.contains(key)) return;
    const json& node = in.at(key);
    if (!node.is_object()) throw_invalid("config key " + prefix + key + " must be an object");
    Reader sub{node, prefix + key + "."};
    visit(sub);
    sub.finish();
  }
  void finish() const {
    for (const auto& [key, _] : in.items()) {
      if (!seen.count(key)) throw_invalid("unknown config key: " + prefix + key);
    }
  }
};

template <class IO>
void visit_config(IO& io, RunConfig& c) {
  io.field("version", c.version);
  io.field("seed", c.seed);
  io.field("image_size", c.image_size);
  io.section("paths", [&](auto& s) {
    s.field("hq_dir", c.paths.hq_dir);
    s.field("val_dir", c.paths.val_dir);
    s.field("vae", c.paths.vae);
    s.field("denoiser", c.paths.denoiser);
    s.field("stub", c.paths.stub);
    s.field("stats", c.paths.stats);
  });
  io.field("degradation", c.degradation);
  io.section("vae", [&](auto& s) {
    s.field("base_channels", c.vae.model.base_channels);
    s.field("downsample_factor", c.vae.model.downsample_factor);
    s.field("iterations", c.vae.train.iterations);
    s.field("batch_size", c.vae.train.batch_size);
    s.field("lr", c.vae.train.lr);
    s.field("kl_weight", c.vae.train.kl_weight);
  });
  io.section("denoiser", [&](auto& s) {
    s.field("channels", c.denoiser.model.channels);
    s.field("time_embed_dim", c.denoiser.model.time_embed_dim);
    s.field("steps", c.denoiser.steps);
    s.field("beta_start", c.denoiser.beta_start);
    s.field("beta_end", c.denoiser.beta_end);
    s.field("iterations", c.denoiser.train.iterations);
    s.field("batch_size", c.denoiser.train.batch_size);
    s.field("lr", c.denoiser.train.lr);
  });
  io.section("stub", [&](auto& s) {
    std::string kind = to_string(c.stub.kind);
    s.field("kind", kind);
    c.stub.kind = stub_kind_from_string(kind);
    s.field("channels", c.stub.channels);
    s.field("iterations", c.stub.iterations);
    s.field("batch_size", c.stub.batch_size);
    s.field("lr", c.stub.lr);
    s.field("mean_weight", c.stub.mean_weight);
  });
  io.field("stats_samples", c.stats_samples);
  io.field("loss", c.loss);
  io.section("train", [&](auto& s) {
    s.field("lr", c.train.lr);
    s.field("weight_decay", c.train.weight_decay);
    s.field("iterations", c.train.iterations);
    s.field("batch_size", c.train.batch_size);
    s.field("rank", c.train.rank);
    s.field("lora_alpha", c.train.lora_alpha);
    s.field("t_fix", c.train.t_fix);
    s.field("use_transformer", c.train.use_transformer);
    s.field("use_mib", c.train.use_mib);
    s.field("use_lora", c.train.use_lora);
    s.field("log_every", c.train.log_every);
  });
  io.section("ablate", [&](auto& s) {
    s.field("betas", c.ablate.betas);
    s.field("ranks", c.ablate.ranks);
    s.field("toggles", c.ablate.toggles);
  });
  io.section("metrics", [&](auto& s) {
    s.field("feature_dim", c.metrics.feature_dim);
    s.field("kid_blocks", c.metrics.kid_blocks);
    s.field("niqe_patch", c.metrics.niqe_patch);
  });
}

void require(bool ok, const std::string& message) {
  if (!ok) throw_invalid("invalid config: " + message);
}

}  // namespace

void RunConfig::validate() const {
  require(version == kRunConfigVersion, "unsupported version " + std::to_string(version));
  require(image_size >= 8 && image_size % 8 == 0, "image_size must be a positive multiple of 8");
  degradation.validate();
  vae.model.validate();
  require(image_size % vae.model.downsample_factor == 0, "image_size must be divisible by the VAE factor");
  require(vae.train.iterations >= 1 && vae.train.batch_size >= 1 && vae.train.lr > 0.0 &&
              vae.train.kl_weight >= 0.0,
          "vae training settings");
  denoiser.model.validate();
  require(denoiser.steps >= 2, "denoiser.steps must be >= 2");
  require(denoiser.beta_start > 0.0 && denoiser.beta_start <= denoiser.beta_end && denoiser.beta_end < 1.0,
          "denoiser betas must satisfy 0 < start <= end < 1");
  require(denoiser.train.iterations >= 1 && denoiser.train.batch_size >= 1 && denoiser.train.lr > 0.0,
          "denoiser training settings");
  require(stub.channels >= 2 && stub.iterations >= 1 && stub.batch_size >= 1 && stub.lr > 0.0 &&
              stub.mean_weight >= 0.0,
          "stub settings");
  require(stats_samples >= 1, "stats_samples must be >= 1");
  loss.validate();
  require(train.lr > 0.0 && train.weight_decay >= 0.0, "train.lr must be > 0 and weight_decay >= 0");
  require(train.iterations >= 1 && train.batch_size >= 1, "train.iterations and batch_size must be >= 1");
  require(train.rank >= 1 && train.lora_alpha > 0.0, "train.rank must be >= 1 and lora_alpha > 0");
  require(train.t_fix >= 0 && train.t_fix < denoiser.steps, "train.t_fix must lie in [0, steps)");
  require(train.log_every >= 1, "train.log_every must be >= 1");
  require(!ablate.betas.empty() && !ablate.ranks.empty(), "ablate grid must be non-empty");
  for (double b : ablate.betas) require(b >= 0.0, "ablate.betas must be >= 0");
  for (int r : ablate.ranks) require(r >= 1, "ablate.ranks must be >= 1");
  require(metrics.feature_dim >= 2 && metrics.kid_blocks >= 1, "metrics settings");
  require(metrics.niqe_patch >= 8 && metrics.niqe_patch % 2 == 0, "metrics.niqe_patch must be even and >= 8");
}

nlohmann::json RunConfig::to_json() const {
  json j = json::object();
  RunConfig copy = *this;
  Writer w{j};
  visit_config(w, copy);
  return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw_invalid("run config must be a JSON object");
  RunConfig c;
  Reader r{j, ""};
  visit_config(r, c);
  r.finish();
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw_missing("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw_invalid("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

void RunConfig::save(const std::filesystem::path& path) const {
  std::ofstream f(path);
  if (!f) throw_runtime("cannot write " + path.string());
  f << to_json().dump(2) << "\n";
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw_invalid("override must look like key.path=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);

  json j = to_json();
  json* node = &j;
  std::stringstream parts(key);
  std::string part;
  std::string walked;
  while (std::getline(parts, part, '.')) {
    walked += walked.empty() ? part : "." + part;
    if (!node->is_object() || !node->contains(part)) throw_invalid("unknown config key: " + walked);
    node = &(*node)[part];
  }
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  *node = value;
  *this = from_json(j);
}

uint64_t stream_seed(uint64_t root, SeedStream stream) {
  return derive_seed(root, static_cast<uint64_t>(stream));
}

}  // namespace infobfr
