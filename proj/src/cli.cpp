#include "infobfr/cli.hpp"

#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "infobfr/bfr_stubs.hpp"
#include "infobfr/checkpoint.hpp"
#include "infobfr/config.hpp"
#include "infobfr/error.hpp"
#include "infobfr/metrics.hpp"
#include "infobfr/pipeline.hpp"
#include "infobfr/rng.hpp"
#include "infobfr/toy_faces.hpp"

namespace infobfr {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kManifestName = "manifest.json";

// Everything a subcommand needs besides the resolved config. Stored verbatim
// in the manifest so a replay sees exactly the same request.
struct Options {
  std::string out;
  std::string in;
  std::string model;
  std::string bfr;
  std::string kind;
  std::string set_a;
  std::string set_b;
  std::string pristine;
  int count = 200;
  int size = 0;
};

void to_json(json& j, const Options& o) {
  j = {{"out", o.out},     {"in", o.in},         {"model", o.model}, {"bfr", o.bfr},
       {"kind", o.kind},   {"set_a", o.set_a},   {"set_b", o.set_b}, {"pristine", o.pristine},
       {"count", o.count}, {"size", o.size}};
}

void from_json(const json& j, Options& o) {
  o.out = j.at("out").get<std::string>();
  o.in = j.at("in").get<std::string>();
  o.model = j.at("model").get<std::string>();
  o.bfr = j.at("bfr").get<std::string>();
  o.kind = j.at("kind").get<std::string>();
  o.set_a = j.at("set_a").get<std::string>();
  o.set_b = j.at("set_b").get<std::string>();
  o.pristine = j.at("pristine").get<std::string>();
  o.count = j.at("count").get<int>();
  o.size = j.at("size").get<int>();
}

struct Context {
  RunConfig config;
  Options opts;
  json inputs = json::object();  // artifact -> hash
  json summary = json::object();
  std::ostream& out;
};

std::string absolute_string(const std::string& p) {
  return p.empty() ? p : fs::weakly_canonical(fs::absolute(p)).string();
}

std::string require_set(const std::string& value, const std::string& what) {
  if (value.empty()) throw_missing(what + " is not set");
  return value;
}

fs::path output_dir(const Context& ctx) {
  const fs::path dir = require_set(ctx.opts.out, "--out");
  fs::create_directories(dir);
  return dir;
}

std::string directory_hash(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw_missing("directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::string joined;
  for (const auto& f : files) joined += fs::relative(f, dir).generic_string() + "\t" + file_sha256(f) + "\n";
  return sha256_hex(joined.data(), joined.size());
}

void record_input(Context& ctx, const std::string& key, const fs::path& path) {
  if (!fs::exists(path)) throw_missing(key + " not found: " + path.string());
  ctx.inputs[key] = {{"path", absolute_string(path.string())},
                     {"sha256", fs::is_directory(path) ? directory_hash(path) : file_sha256(path)}};
}

std::vector<Image> load_sized_images(Context& ctx, const std::string& dir, const std::string& key) {
  record_input(ctx, key, require_set(dir, key));
  auto images = load_image_dir(dir);
  if (images.empty()) throw_missing("no PNG images in " + dir);
  for (const auto& img : images) {
    if (img.height() != ctx.config.image_size || img.width() != ctx.config.image_size || img.channels() != 3) {
      throw_invalid("images in " + dir + " must be " + std::to_string(ctx.config.image_size) + "x" +
                    std::to_string(ctx.config.image_size) + " RGB (image_size)");
    }
  }
  return images;
}

std::shared_ptr<const AutoencoderModel> load_vae(Context& ctx) {
  const std::string path = require_set(ctx.config.paths.vae, "paths.vae (--vae)");
  record_input(ctx, "vae", path);
  return std::make_shared<const AutoencoderModel>(AutoencoderModel::load(path));
}

BfrRegistry& registry() {
  static BfrRegistry instance;
  return instance;
}

std::shared_ptr<const BfrModel> load_stub(Context& ctx, const std::string& name_or_path) {
  const std::string name = name_or_path.empty() ? std::string("identity") : name_or_path;
  if (name != "identity") record_input(ctx, "bfr", name);
  return registry().get(name);
}

void write_training_curve(const TrainingCurve& curve, const fs::path& path) {
  std::ofstream f(path);
  if (!f) throw_runtime("cannot write " + path.string());
  f << "iteration,loss\n" << std::setprecision(9);
  for (std::size_t i = 0; i < curve.losses.size(); ++i) f << i << ',' << curve.losses[i] << '\n';
}

TrainInputs load_train_inputs(Context& ctx) {
  TrainInputs inputs;
  inputs.vae = load_vae(ctx);
  const std::string den = require_set(ctx.config.paths.denoiser, "paths.denoiser (--denoiser)");
  record_input(ctx, "denoiser", den);
  inputs.denoiser = std::make_shared<const DenoiserModel>(DenoiserModel::load(den));
  inputs.stub = load_stub(ctx, require_set(ctx.config.paths.stub, "paths.stub (--stub)"));
  const std::string stats = require_set(ctx.config.paths.stats, "paths.stats (--stats)");
  record_input(ctx, "stats", stats);
  inputs.stats = ManifoldStats::load(stats);
  inputs.hq_images = load_sized_images(ctx, ctx.config.paths.hq_dir, "paths.hq_dir");
  return inputs;
}

json provenance(const Context& ctx) {
  json p;
  p["config"] = ctx.config.to_json();
  p["inputs"] = {{"vae", absolute_string(ctx.config.paths.vae)},
                 {"denoiser", absolute_string(ctx.config.paths.denoiser)},
                 {"stub", ctx.config.paths.stub},
                 {"stats", absolute_string(ctx.config.paths.stats)},
                 {"hq_dir", absolute_string(ctx.config.paths.hq_dir)}};
  p["input_hashes"] = ctx.inputs;
  return p;
}

// ---- subcommands --------------------------------------------------------

void cmd_toyset(Context& ctx) {
  const fs::path dir = output_dir(ctx);
  if (ctx.opts.count < 1) throw_invalid("--count must be >= 1");
  const int size = ctx.opts.size > 0 ? ctx.opts.size : ctx.config.image_size;
  write_toy_set(dir, ctx.opts.count, size, stream_seed(ctx.config.seed, SeedStream::kToyset));
  ctx.summary = {{"images", ctx.opts.count}, {"size", size}};
  ctx.out << "wrote " << ctx.opts.count << " toy faces (" << size << "px) to " << dir.string() << "\n";
}

void cmd_degrade(Context& ctx) {
  const fs::path in = require_set(ctx.opts.in, "--in");
  record_input(ctx, "in", in);
  const auto files = list_images(in);
  const fs::path dir = output_dir(ctx);
  if (fs::equivalent(in, dir)) throw_invalid("--out must differ from --in");
  const uint64_t seed = stream_seed(ctx.config.seed, SeedStream::kDegrade);
  json records = json::array();
  for (std::size_t i = 0; i < files.size(); ++i) {
    const uint64_t pair_seed = derive_seed(seed, i);
    const DegradationParams params = sample_params({pair_seed}, ctx.config.degradation);
    save_image(degrade(load_image(files[i]), params, {derive_seed(pair_seed, 1)}), dir / files[i].filename());
    records.push_back({{"file", files[i].filename().string()}, {"params", params}});
  }
  std::ofstream(dir / "params.json") << records.dump(1) << "\n";
  ctx.summary = {{"images", files.size()}};
  ctx.out << "degraded " << files.size() << " images into " << dir.string() << "\n";
}

void cmd_pretrain_vae(Context& ctx) {
  const auto images = load_sized_images(ctx, ctx.config.paths.hq_dir, "paths.hq_dir");
  AutoencoderTrainConfig train = ctx.config.vae.train;
  train.seed = stream_seed(ctx.config.seed, SeedStream::kVae);
  TrainingCurve curve;
  const AutoencoderModel model = pretrain_autoencoder(images, ctx.config.vae.model, train, &curve);
  const fs::path dir = output_dir(ctx);
  model.save(dir / "vae.ibfr");
  write_training_curve(curve, dir / "vae_curve.csv");
  ctx.summary = {{"loss_first", curve.first()}, {"loss_last", curve.last()}, {"hash", model.hash()}};
  ctx.out << "autoencoder: loss " << curve.head_mean(20) << " -> " << curve.tail_mean(20) << ", saved "
          << (dir / "vae.ibfr").string() << "\n";
}

void cmd_pretrain_denoiser(Context& ctx) {
  const auto vae = load_vae(ctx);
  const auto images = load_sized_images(ctx, ctx.config.paths.hq_dir, "paths.hq_dir");
  DenoiserTrainConfig train = ctx.config.denoiser.train;
  train.seed = stream_seed(ctx.config.seed, SeedStream::kDenoiser);
  TrainingCurve curve;
  const DenoiserModel model =
      pretrain_denoiser(*vae, images, ctx.config.denoiser.schedule(), ctx.config.denoiser.model, train, &curve);
  const fs::path dir = output_dir(ctx);
  model.save(dir / "denoiser.ibfr");
  write_training_curve(curve, dir / "denoiser_curve.csv");
  ctx.summary = {{"loss_first", curve.first()}, {"loss_last", curve.last()}, {"hash", model.hash()}};
  ctx.out << "denoiser: loss " << curve.head_mean(20) << " -> " << curve.tail_mean(20) << ", saved "
          << (dir / "denoiser.ibfr").string() << "\n";
}

void cmd_train_stub(Context& ctx) {
  const auto images = load_sized_images(ctx, ctx.config.paths.hq_dir, "paths.hq_dir");
  StubConfig cfg = ctx.config.stub;
  if (!ctx.opts.kind.empty()) cfg.kind = stub_kind_from_string(ctx.opts.kind);
  cfg.seed = stream_seed(ctx.config.seed, SeedStream::kStub);
  cfg.ranges = ctx.config.degradation;
  TrainingCurve curve;
  const auto stub = train_stub(images, cfg, &curve);
  const fs::path dir = output_dir(ctx);
  stub->save(dir / "stub.ibfr");
  write_training_curve(curve, dir / "stub_curve.csv");
  ctx.summary = {{"kind", to_string(cfg.kind)}, {"loss_last", curve.last()}, {"hash", stub->hash()}};
  ctx.out << to_string(cfg.kind) << " stub: loss " << curve.head_mean(20) << " -> " << curve.tail_mean(20)
          << ", saved " << (dir / "stub.ibfr").string() << "\n";
}

void cmd_stats(Context& ctx) {
  const auto vae = load_vae(ctx);
  const auto images = load_sized_images(ctx, ctx.config.paths.hq_dir, "paths.hq_dir");
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(ctx.config.stats_samples), images.size());
  const ManifoldStats stats = compute_manifold_stats(*vae, images, n);
  const fs::path dir = output_dir(ctx);
  stats.save(dir / "stats.json");
  ctx.summary = {{"sample_count", stats.sample_count}};
  ctx.out << "manifold stats over " << n << " images saved to " << (dir / "stats.json").string() << "\n";
}

void cmd_train(Context& ctx) {
  const TrainInputs inputs = load_train_inputs(ctx);
  const TrainResult result = train(ctx.config, inputs);
  const fs::path dir = output_dir(ctx);
  result.model.save(dir / "model.ibfr", provenance(ctx));
  write_curve_csv(result.curve, dir / "curve.csv");
  const auto& first = result.curve.front();
  const auto& last = result.curve.back();
  ctx.summary = {{"frozen_hash", result.model.frozen_hash()},
                 {"trainable_parameters", result.model.trainable_parameter_count()},
                 {"total_parameters", result.model.total_parameter_count()},
                 {"final_mean_lambda", last.mean_lambda}};
  ctx.out << "trained " << ctx.config.train.iterations << " iterations: total " << first.total << " -> "
          << last.total << ", mean lambda " << last.mean_lambda << "\n";
}

LoadedModel load_model_input(Context& ctx) {
  const std::string path = require_set(ctx.opts.model, "--model");
  record_input(ctx, "model", path);
  return load_model(path);
}

template <class F>
void map_images(Context& ctx, F&& fn) {
  const fs::path in = require_set(ctx.opts.in, "--in");
  record_input(ctx, "in", in);
  const auto files = list_images(in);
  const fs::path dir = output_dir(ctx);
  if (fs::equivalent(in, dir)) throw_invalid("--out must differ from --in");
  for (const auto& f : files) save_image(fn(load_image(f)), dir / f.filename());
  ctx.summary = {{"images", files.size()}};
  ctx.out << "wrote " << files.size() << " images to " << dir.string() << "\n";
}

void cmd_restore(Context& ctx) {
  const LoadedModel loaded = load_model_input(ctx);
  const auto stub = load_stub(ctx, ctx.opts.bfr);
  map_images(ctx, [&](const Image& img) { return restore(loaded.model, stub->restore(img)); });
}

void cmd_mask(Context& ctx) {
  const LoadedModel loaded = load_model_input(ctx);
  const auto stub = load_stub(ctx, ctx.opts.bfr);
  map_images(ctx, [&](const Image& img) { return export_manifold_mask(loaded.model, stub->restore(img)); });
}

struct MetricRow {
  std::string metric;
  double value;
  std::size_t size_a;
  std::size_t size_b;
};

void write_metric_rows(const std::vector<MetricRow>& rows, const std::string& extractor_hash,
                       const fs::path& path, std::ostream& out) {
  std::ofstream f(path);
  if (!f) throw_runtime("cannot write " + path.string());
  f << "metric,value,set_a_size,set_b_size,extractor_hash\n" << std::setprecision(9);
  for (const auto& r : rows) {
    f << r.metric << ',' << r.value << ',' << r.size_a << ',' << r.size_b << ',' << extractor_hash << '\n';
    out << std::left << std::setw(18) << r.metric << ' ' << r.value << "\n";
  }
}

void add_set_metrics(std::vector<MetricRow>& rows, const std::string& tag, const std::vector<Image>& a,
                     const std::vector<Image>& anchor, const FeatureExtractor& ex, const RunConfig& config,
                     const std::optional<NiqeModel>& niqe_model) {
  const auto fa = ex.features(a), fb = ex.features(anchor);
  rows.push_back({"fid_" + tag, fid_from_features(fa, fb), a.size(), anchor.size()});
  const int blocks = config.metrics.kid_blocks;
  if (a.size() / blocks >= 2 && anchor.size() / blocks >= 2) {
    const KidResult k = kid_from_features(fa, fb, blocks, config.seed);
    rows.push_back({"kid_x100_" + tag, k.mean_x100, a.size(), anchor.size()});
    rows.push_back({"kid_std_x100_" + tag, k.std_x100, a.size(), anchor.size()});
  }
  if (niqe_model) {
    double sum = 0.0;
    for (const auto& img : a) sum += niqe(img, *niqe_model);
    rows.push_back({"niqe_" + tag, sum / a.size(), a.size(), 0});
  }
}

std::optional<NiqeModel> maybe_niqe(Context& ctx, const std::vector<Image>& probe) {
  const int p = ctx.config.metrics.niqe_patch;
  const std::string dir = ctx.opts.pristine.empty() ? ctx.config.paths.hq_dir : ctx.opts.pristine;
  const bool big_enough = !probe.empty() && probe.front().height() >= p && probe.front().width() >= p;
  if (!big_enough || dir.empty()) {
    ctx.out << "niqe skipped: needs images of at least " << p << "px and a pristine set\n";
    return std::nullopt;
  }
  record_input(ctx, "pristine", dir);
  const auto pristine = load_image_dir(dir);
  if (pristine.size() < kMinNiqeImages || pristine.front().height() < p) {
    ctx.out << "niqe skipped: pristine set too small\n";
    return std::nullopt;
  }
  return fit_niqe_model(pristine, p);
}

void cmd_eval(Context& ctx) {
  const FeatureExtractor ex = FeatureExtractor::create(0xF1D, ctx.config.metrics.feature_dim);
  std::vector<MetricRow> rows;
  if (!ctx.opts.model.empty()) {
    const LoadedModel loaded = load_model_input(ctx);
    const auto hq = load_sized_images(ctx, require_set(ctx.config.paths.val_dir, "paths.val_dir (--val)"),
                                      "paths.val_dir");
    const auto stub = load_stub(ctx, ctx.opts.bfr.empty() ? loaded.config.paths.stub : ctx.opts.bfr);
    const EvalPair pair = make_eval_pair(hq, *stub, ctx.config.degradation,
                                         stream_seed(ctx.config.seed, SeedStream::kDegrade));
    const EvalSummary s = evaluate(loaded.model, pair);
    std::vector<Image> restored;
    for (const auto& img : pair.bfr) restored.push_back(restore(loaded.model, img));
    rows.push_back({"psnr_bfr", s.psnr_bfr, pair.bfr.size(), hq.size()});
    rows.push_back({"psnr_restored", s.psnr_restored, restored.size(), hq.size()});
    rows.push_back({"mean_lambda", s.mean_lambda, restored.size(), 0});
    const auto niqe_model = maybe_niqe(ctx, hq);
    add_set_metrics(rows, "bfr", pair.bfr, hq, ex, ctx.config, niqe_model);
    add_set_metrics(rows, "restored", restored, hq, ex, ctx.config, niqe_model);
  } else {
    const std::string a = require_set(ctx.opts.set_a, "--a"), b = require_set(ctx.opts.set_b, "--b");
    record_input(ctx, "a", a);
    record_input(ctx, "b", b);
    const auto ia = load_image_dir(a), ib = load_image_dir(b);
    if (ia.empty() || ib.empty()) throw_missing("evaluation sets must contain PNG images");
    if (ia.size() == ib.size() && ia.front().same_shape(ib.front())) {
      double sum = 0.0;
      for (std::size_t i = 0; i < ia.size(); ++i) sum += psnr(ia[i], ib[i]);
      rows.push_back({"psnr", sum / ia.size(), ia.size(), ib.size()});
    }
    add_set_metrics(rows, "a", ia, ib, ex, ctx.config, maybe_niqe(ctx, ia));
  }
  const fs::path dir = output_dir(ctx);
  write_metric_rows(rows, ex.hash(), dir / "metrics.csv", ctx.out);
  for (const auto& r : rows) ctx.summary[r.metric] = r.value;
}

void cmd_ablate(Context& ctx) {
  const TrainInputs inputs = load_train_inputs(ctx);
  const auto val = load_sized_images(ctx, require_set(ctx.config.paths.val_dir, "paths.val_dir (--val)"),
                                     "paths.val_dir");
  const EvalPair pair = make_eval_pair(val, *inputs.stub, ctx.config.degradation,
                                       stream_seed(ctx.config.seed, SeedStream::kDegrade));
  const auto cells = ablation_grid(ctx.config);
  const auto rows = ablate(ctx.config, inputs, cells, pair);
  const fs::path dir = output_dir(ctx);
  write_ablation_csv(rows, dir / "ablation.csv");
  ctx.out << std::left << std::setw(26) << "cell" << std::setw(12) << "psnr" << std::setw(12) << "fid"
          << "mean_lambda\n";
  for (const auto& r : rows) {
    ctx.out << std::setw(26) << r.cell.label();
    if (r.ok) {
      ctx.out << std::setw(12) << r.summary.psnr_restored << std::setw(12) << r.summary.fid_restored
              << r.summary.mean_lambda << "\n";
    } else {
      ctx.out << "failed: " << r.error << "\n";
    }
  }
  ctx.summary = {{"cells", rows.size()}};
}

using Handler = void (*)(Context&);

const std::map<std::string, Handler>& handlers() {
  static const std::map<std::string, Handler> table{
      {"toyset", cmd_toyset},       {"degrade", cmd_degrade},
      {"pretrain-vae", cmd_pretrain_vae}, {"pretrain-denoiser", cmd_pretrain_denoiser},
      {"train-stub", cmd_train_stub}, {"stats", cmd_stats},
      {"train", cmd_train},         {"restore", cmd_restore},
      {"ablate", cmd_ablate},       {"eval", cmd_eval},
      {"mask", cmd_mask}};
  return table;
}

json output_hashes(const fs::path& dir) {
  json hashes = json::object();
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() != kManifestName) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) hashes[fs::relative(f, dir).generic_string()] = file_sha256(f);
  return hashes;
}

void execute(const std::string& command, Context& ctx, const json& extra) {
  torch::set_num_threads(1);
  handlers().at(command)(ctx);
  const fs::path dir = output_dir(ctx);
  json manifest = extra;
  manifest["tool"] = "infobfr";
  manifest["manifest_version"] = 1;
  manifest["command"] = command;
  manifest["options"] = ctx.opts;
  manifest["config"] = ctx.config.to_json();
  manifest["inputs"] = ctx.inputs;
  manifest["outputs"] = output_hashes(dir);
  manifest["summary"] = ctx.summary;
  std::ofstream(dir / kManifestName) << manifest.dump(2) << "\n";
}

void replay(const std::string& manifest_path, const std::string& out_dir, std::ostream& out) {
  std::ifstream f(manifest_path);
  if (!f) throw_missing("manifest not found: " + manifest_path);
  json m;
  try {
    m = json::parse(f);
  } catch (const json::exception& e) {
    throw_invalid("manifest is not valid JSON: " + std::string(e.what()));
  }
  const std::string command = m.at("command").get<std::string>();
  if (!handlers().count(command)) throw_invalid("manifest names unknown command '" + command + "'");
  Context ctx{RunConfig::from_json(m.at("config")), m.at("options").get<Options>(), json::object(),
              json::object(), out};
  if (!out_dir.empty()) ctx.opts.out = out_dir;
  for (const auto& [key, rec] : m.at("inputs").items()) {
    const fs::path p = rec.at("path").get<std::string>();
    const std::string now = fs::is_directory(p) ? directory_hash(p)
                            : fs::exists(p)     ? file_sha256(p)
                                                : std::string();
    if (now.empty()) throw_missing("replay input '" + key + "' missing: " + p.string());
    if (now != rec.at("sha256").get<std::string>()) {
      throw_invalid("replay input '" + key + "' changed since the manifest was written: " + p.string());
    }
  }
  execute(command, ctx, {{"replayed_from", absolute_string(manifest_path)}});
  const json produced = output_hashes(ctx.opts.out);
  const bool same = produced == m.at("outputs");
  out << (same ? "replay reproduced all outputs\n" : "replay outputs differ from the manifest\n");
  if (!same) throw_runtime("replay produced different outputs");
}

// Manifests must stay valid when replayed from another working directory.
void absolutize(RunConfig& config, Options& opts) {
  auto fix = [](std::string& p) {
    if (!p.empty() && fs::exists(p)) p = absolute_string(p);
  };
  for (std::string* p : {&config.paths.hq_dir, &config.paths.val_dir, &config.paths.vae, &config.paths.denoiser,
                         &config.paths.stub, &config.paths.stats, &opts.in, &opts.model, &opts.bfr, &opts.set_a,
                         &opts.set_b, &opts.pristine}) {
    fix(*p);
  }
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument:
      return kExitUsage;
    case ErrorKind::kMissingArtifact:
      return kExitMissingArtifact;
    case ErrorKind::kRuntime:
      return kExitRuntime;
  }
  return kExitRuntime;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"InfoBFR: information-bottleneck boosting of face restorers (desk scale)", "infobfr"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<uint64_t> seed;
  Options opts;
  struct PathFlags {
    std::string hq, val, vae, denoiser, stub, stats;
  } paths;
  std::string manifest_path;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run config (JSON)");
    sub->add_option("--set", overrides, "override a config key, e.g. --set train.rank=8");
    sub->add_option("--seed", seed, "root seed for every random stream");
    sub->add_option("--out", opts.out, "output directory")->required();
  };
  auto path_flags = [&](CLI::App* sub) {
    sub->add_option("--hq", paths.hq, "HQ image directory (paths.hq_dir)");
    sub->add_option("--val", paths.val, "held-out HQ directory (paths.val_dir)");
    sub->add_option("--vae", paths.vae, "autoencoder checkpoint (paths.vae)");
    sub->add_option("--denoiser", paths.denoiser, "denoiser checkpoint (paths.denoiser)");
    sub->add_option("--stub", paths.stub, "BFR stub name or checkpoint (paths.stub)");
    sub->add_option("--stats", paths.stats, "manifold stats file (paths.stats)");
  };

  auto* toyset = app.add_subcommand("toyset", "write a procedural toy face set");
  common(toyset);
  toyset->add_option("--count", opts.count, "number of images")->check(CLI::PositiveNumber);
  toyset->add_option("--size", opts.size, "side length in pixels (default: image_size)")->check(CLI::PositiveNumber);

  auto* degrade_cmd = app.add_subcommand("degrade", "apply random blur/down/noise/JPEG degradations");
  common(degrade_cmd);
  degrade_cmd->add_option("--in", opts.in, "input image directory")->required();

  auto* vae_cmd = app.add_subcommand("pretrain-vae", "pretrain the toy autoencoder");
  common(vae_cmd);
  path_flags(vae_cmd);

  auto* den_cmd = app.add_subcommand("pretrain-denoiser", "pretrain the latent noise predictor");
  common(den_cmd);
  path_flags(den_cmd);

  auto* stub_cmd = app.add_subcommand("train-stub", "train a capacity-starved BFR stub");
  common(stub_cmd);
  path_flags(stub_cmd);
  stub_cmd->add_option("--kind", opts.kind, "artifact or prior_bias");

  auto* stats_cmd = app.add_subcommand("stats", "compute manifold mean/std");
  common(stats_cmd);
  path_flags(stats_cmd);

  auto* train_cmd = app.add_subcommand("train", "train attention, filter head and LoRA adapters");
  common(train_cmd);
  path_flags(train_cmd);

  auto* restore_cmd = app.add_subcommand("restore", "restore a directory of images");
  common(restore_cmd);
  restore_cmd->add_option("--model", opts.model, "InfoBFR checkpoint")->required();
  restore_cmd->add_option("--in", opts.in, "input directory")->required();
  restore_cmd->add_option("--bfr", opts.bfr, "apply this BFR stub first (name or checkpoint)");

  auto* mask_cmd = app.add_subcommand("mask", "export lambda masks");
  common(mask_cmd);
  mask_cmd->add_option("--model", opts.model, "InfoBFR checkpoint")->required();
  mask_cmd->add_option("--in", opts.in, "input directory")->required();
  mask_cmd->add_option("--bfr", opts.bfr, "apply this BFR stub first (name or checkpoint)");

  auto* ablate_cmd = app.add_subcommand("ablate", "run the ablation grid");
  common(ablate_cmd);
  path_flags(ablate_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "PSNR / FID / KID / NIQE table");
  common(eval_cmd);
  path_flags(eval_cmd);
  eval_cmd->add_option("--model", opts.model, "InfoBFR checkpoint (model mode)");
  eval_cmd->add_option("--bfr", opts.bfr, "stub producing the BFR inputs (default: the model's)");
  eval_cmd->add_option("--a", opts.set_a, "first image directory (set mode)");
  eval_cmd->add_option("--b", opts.set_b, "reference image directory (set mode)");
  eval_cmd->add_option("--pristine", opts.pristine, "pristine directory for the NIQE fit");

  auto* replay_cmd = app.add_subcommand("replay", "re-run a recorded invocation from its manifest");
  replay_cmd->add_option("--manifest", manifest_path, "manifest.json of an earlier run")->required();
  replay_cmd->add_option("--out", opts.out, "output directory for the replay")->required();

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    const auto subs = app.get_subcommands();
    err << "error: " << e.what() << "\n\n" << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  try {
    if (replay_cmd->parsed()) {
      replay(manifest_path, opts.out, out);
      return kExitOk;
    }
    const std::string command = app.get_subcommands().front()->get_name();
    RunConfig config = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
    auto set_path = [](std::string& dst, const std::string& flag) {
      if (!flag.empty()) dst = flag;
    };
    set_path(config.paths.hq_dir, paths.hq);
    set_path(config.paths.val_dir, paths.val);
    set_path(config.paths.vae, paths.vae);
    set_path(config.paths.denoiser, paths.denoiser);
    set_path(config.paths.stub, paths.stub);
    set_path(config.paths.stats, paths.stats);
    for (const auto& o : overrides) config.apply_override(o);
    if (seed) config.seed = *seed;
    config.validate();
    absolutize(config, opts);
    Context ctx{std::move(config), opts, json::object(), json::object(), out};
    execute(command, ctx, json::object());
    return kExitOk;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace infobfr
