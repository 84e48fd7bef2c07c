#pragma once

// Command-line front end: synth | train | progressive | eval | render.
// Runs are driven by a flat dotted-key JSON config with flag overrides.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hsiseg/trainer.hpp"

namespace hsiseg {

inline constexpr const char* kVersion = "0.1.0";

using OrderedJson = nlohmann::ordered_json;

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Effective settings of one run. Every key is addressable as a flat
/// dotted name in config files and `--set` overrides.
struct RunConfig {
  std::string profile;
  std::string scene;  // HSC1 path; empty = synthesise
  SynthParams synth;
  std::size_t pca = 8;  // 0 keeps the original bands
  SplitSpec split{10, 1};
  std::vector<std::size_t> ladder{12, 10, 8};
  std::size_t d = 16;
  std::size_t heads = 2;
  double tau1 = 0.8;
  double dropout = 0.1;
  bool multibranch = false;
  TrainConfig train{60, 8, 1.5e-3, 1, 0.9, 0.999, 1e-8, 13};
  std::size_t stride = 0;  // 0 = patch/2
  ProgressiveConfig progressive;
  std::size_t workers = 1;
  std::uint64_t seed = 1;
  std::string out;

  std::set<std::string> explicitly_set;

  static const std::vector<std::string>& keys() {
    static const std::vector<std::string> k{
        "profile",        "scene",          "synth.height",     "synth.width",        "synth.bands",
        "synth.classes",  "synth.noise",    "synth.seed",       "pca",                "split.per_class",
        "model.ladder",   "model.d",        "model.heads",      "model.tau1",         "model.dropout",
        "model.multibranch", "train.epochs", "train.batch",     "train.lr",           "train.beta1",
        "train.beta2",    "train.eps",      "train.patch",      "infer.stride",       "progressive.iterations",
        "progressive.tau2", "progressive.zeta", "progressive.preserve", "progressive.finetune_samples", "workers",
        "seed",           "out"};
    return k;
  }

  void apply_profile(const std::string& name) {
    struct Row {
      std::size_t pca, patch, d, layers, heads;
      double tau1, tau2;
      std::size_t epochs, batch;
      double lr, dropout;
      std::size_t iterations;
      bool multi;
    };
    static const std::map<std::string, Row> rows{
        {"ip", {30, 33, 64, 4, 2, 0.8, 0.7, 300, 32, 0.0015, 0.1, 14, false}},
        {"pu", {15, 49, 32, 2, 2, 0.9, 0.9, 200, 64, 0.001, 0.15, 8, false}},
        {"mg", {30, 41, 64, 4, 4, 0.8, 0.7, 300, 32, 0.0015, 0.1, 10, true}},
        {"ag", {15, 33, 64, 4, 4, 0.6, 0.7, 300, 32, 0.0015, 0.1, 10, true}},
        {"hu", {30, 57, 32, 3, 2, 0.9, 0.8, 200, 64, 0.001, 0.15, 8, true}},
    };
    auto it = rows.find(name);
    if (it == rows.end()) throw ValidationError("unknown profile '" + name + "' (valid: ip, pu, mg, ag, hu)");
    const Row& r = it->second;
    static const std::size_t full[] = {144, 100, 64, 36, 16};
    profile = name;
    pca = r.pca;
    train.patch = r.patch;
    d = r.d;
    ladder.assign(full, full + r.layers);
    heads = r.heads;
    tau1 = r.tau1;
    progressive.tau2 = r.tau2;
    train.epochs = r.epochs;
    train.batch = r.batch;
    train.lr = r.lr;
    dropout = r.dropout;
    progressive.iterations = r.iterations;
    multibranch = r.multi;
  }

  void set(const std::string& key, const OrderedJson& v) {
    try {
      if (key == "profile") {
        if (!v.get<std::string>().empty()) apply_profile(v.get<std::string>());
      }
      else if (key == "scene") scene = v.get<std::string>();
      else if (key == "synth.height") synth.height = v.get<std::size_t>();
      else if (key == "synth.width") synth.width = v.get<std::size_t>();
      else if (key == "synth.bands") synth.bands = v.get<std::size_t>();
      else if (key == "synth.classes") synth.classes = v.get<std::size_t>();
      else if (key == "synth.noise") synth.noise_sigma = v.get<double>();
      else if (key == "synth.seed") synth.seed = v.get<std::uint64_t>();
      else if (key == "pca") pca = v.get<std::size_t>();
      else if (key == "split.per_class") split.per_class_train = v.get<std::size_t>();
      else if (key == "model.ladder") ladder = v.get<std::vector<std::size_t>>();
      else if (key == "model.d") d = v.get<std::size_t>();
      else if (key == "model.heads") heads = v.get<std::size_t>();
      else if (key == "model.tau1") tau1 = v.get<double>();
      else if (key == "model.dropout") dropout = v.get<double>();
      else if (key == "model.multibranch") multibranch = v.get<bool>();
      else if (key == "train.epochs") train.epochs = v.get<std::size_t>();
      else if (key == "train.batch") train.batch = v.get<std::size_t>();
      else if (key == "train.lr") train.lr = v.get<double>();
      else if (key == "train.beta1") train.beta1 = v.get<double>();
      else if (key == "train.beta2") train.beta2 = v.get<double>();
      else if (key == "train.eps") train.eps = v.get<double>();
      else if (key == "train.patch") train.patch = v.get<std::size_t>();
      else if (key == "infer.stride") stride = v.get<std::size_t>();
      else if (key == "progressive.iterations") progressive.iterations = v.get<std::size_t>();
      else if (key == "progressive.tau2") progressive.tau2 = v.get<double>();
      else if (key == "progressive.zeta") progressive.zeta = v.get<double>();
      else if (key == "progressive.preserve") progressive.preserve = v.get<bool>();
      else if (key == "progressive.finetune_samples") progressive.finetune_samples = v.get<std::size_t>();
      else if (key == "workers") workers = v.get<std::size_t>();
      else if (key == "seed") seed = v.get<std::uint64_t>();
      else if (key == "out") out = v.get<std::string>();
      else {
        std::string valid;
        for (const auto& k : keys()) valid += (valid.empty() ? "" : ", ") + k;
        throw ValidationError("unknown config key '" + key + "'; valid keys: " + valid);
      }
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("config key '" + key + "' has the wrong type: " + e.what());
    }
    explicitly_set.insert(key);
  }

  /// Flat, fixed-order form; hashed for the manifest and written with runs.
  OrderedJson to_json() const {
    OrderedJson j;
    j["profile"] = profile;
    if (!scene.empty()) {
      j["scene"] = scene;
    } else {
      j["synth.height"] = synth.height;
      j["synth.width"] = synth.width;
      j["synth.bands"] = synth.bands;
      j["synth.classes"] = synth.classes;
      j["synth.noise"] = synth.noise_sigma;
      j["synth.seed"] = synth.seed;
    }
    j["pca"] = pca;
    j["split.per_class"] = split.per_class_train;
    j["model.ladder"] = ladder;
    j["model.d"] = d;
    j["model.heads"] = heads;
    j["model.tau1"] = tau1;
    j["model.dropout"] = dropout;
    j["model.multibranch"] = multibranch;
    j["train.epochs"] = train.epochs;
    j["train.batch"] = train.batch;
    j["train.lr"] = train.lr;
    j["train.beta1"] = train.beta1;
    j["train.beta2"] = train.beta2;
    j["train.eps"] = train.eps;
    j["train.patch"] = train.patch;
    j["infer.stride"] = stride;
    j["progressive.iterations"] = progressive.iterations;
    j["progressive.tau2"] = progressive.tau2;
    j["progressive.zeta"] = progressive.zeta;
    j["progressive.preserve"] = progressive.preserve;
    j["progressive.finetune_samples"] = progressive.finetune_samples;
    j["workers"] = workers;
    j["seed"] = seed;
    j["out"] = out;
    return j;
  }

  /// The config minus where results are written; the manifest hashes this.
  OrderedJson hash_json() const {
    auto j = to_json();
    j.erase("out");
    return j;
  }

  void validate() const {
    bool synth_set = false;
    for (const auto& k : explicitly_set)
      if (k.rfind("synth.", 0) == 0) synth_set = true;
    if (!scene.empty() && synth_set)
      throw ValidationError("config sets both 'scene' and synth.* parameters; choose one");
    if (!scene.empty() && !std::filesystem::exists(scene))
      throw ValidationError("scene file '" + scene + "' does not exist");
    if (!(train.lr > 0)) throw ValidationError("train.lr must be > 0");
    train.validate();
    progressive.validate();
    if (workers == 0) throw ValidationError("workers must be >= 1");
    if (stride > train.patch) throw ValidationError("infer.stride exceeds train.patch");
  }

  std::size_t effective_stride() const { return stride ? stride : std::max<std::size_t>(1, train.patch / 2); }

  TrainConfig train_config() const {
    TrainConfig t = train;
    t.seed = seed;
    return t;
  }
};

/// Builds the effective config: defaults, then a profile, then the file's
/// keys in order, then command-line overrides.
inline RunConfig load_run_config(const std::optional<std::filesystem::path>& file,
                                 const std::vector<std::pair<std::string, OrderedJson>>& overrides) {
  RunConfig cfg;
  auto apply_all = [&](const OrderedJson& obj) {
    if (obj.contains("profile")) cfg.set("profile", obj["profile"]);
    for (auto it = obj.begin(); it != obj.end(); ++it)
      if (it.key() != "profile") cfg.set(it.key(), it.value());
  };
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ValidationError("cannot open config '" + file->string() + "'");
    OrderedJson j;
    try {
      j = OrderedJson::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("config '" + file->string() + "' is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw ValidationError("config '" + file->string() + "' must be a JSON object");
    apply_all(j);
  }
  OrderedJson ov = OrderedJson::object();
  for (const auto& [k, v] : overrides) ov[k] = v;
  apply_all(ov);
  return cfg;
}

/// Scene as the model sees it: loaded or synthesised, PCA-reduced, auxiliary
/// raster scaled to [0,1].
inline HsiScene prepare_scene(const RunConfig& cfg) {
  HsiScene scene = cfg.scene.empty() ? synth_scene(cfg.synth) : load_scene(cfg.scene);
  if (cfg.pca && cfg.pca < scene.bands) scene = pca_reduce(scene, cfg.pca);
  return normalize_aux(std::move(scene));
}

inline ModelConfig model_config(const RunConfig& cfg, const HsiScene& scene) {
  ModelConfig m;
  m.in_bands = scene.bands;
  m.aux_bands = scene.aux ? scene.aux_bands : 0;
  m.classes = scene.class_count;
  m.ladder = cfg.ladder;
  m.d = cfg.d;
  m.heads = cfg.heads;
  m.tau1 = cfg.tau1;
  m.dropout = cfg.dropout;
  m.multibranch = cfg.multibranch;
  m.seed = cfg.seed;
  m.validate();
  return m;
}

inline Split run_split(const RunConfig& cfg, const HsiScene& scene) {
  SplitSpec s = cfg.split;
  s.seed = cfg.seed;
  return make_split(scene, s);
}

namespace detail {

inline std::filesystem::path output_dir(const RunConfig& cfg, const std::string& command) {
  if (!cfg.out.empty()) return cfg.out;
  const char* root = std::getenv("HSISEG_OUT");
  return std::filesystem::path(root && *root ? root : "runs") / command;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::vector<char> bytes(text.begin(), text.end());
  write_file(path, bytes);
}

/// Re-reads a written artifact and checks it parses.
inline void validate_artifact(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const auto ext = path.extension().string();
  if (ext == ".json") {
    auto parsed = OrderedJson::parse(bytes.begin(), bytes.end());
    (void)parsed;
  } else if (ext == ".hsw") {
    auto model = decode_checkpoint<float>(bytes);
    (void)model;
  } else if (ext == ".hsc") {
    auto scene = decode_scene(bytes);
    (void)scene;
  } else if (bytes.empty()) {
    throw FormatError("artifact " + path.string() + " is empty", 0);
  }
}

inline void write_manifest(const std::filesystem::path& dir, const std::string& command, const RunConfig& cfg,
                           const std::vector<std::filesystem::path>& files) {
  OrderedJson m;
  m["tool"] = "hsiseg";
  m["version"] = kVersion;
  m["command"] = command;
  m["config_hash"] = hex64(fnv1a(cfg.hash_json().dump()));
  m["seed"] = cfg.seed;
  m["compiler"] = __VERSION__;
  m["cxx_standard"] = static_cast<long>(__cplusplus);
  m["json_library"] = std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." + std::to_string(NLOHMANN_JSON_VERSION_MINOR) +
                      "." + std::to_string(NLOHMANN_JSON_VERSION_PATCH);
  auto arr = OrderedJson::array();
  for (const auto& f : files) {
    validate_artifact(f);
    const auto bytes = read_file(f);
    arr.push_back({{"name", f.filename().string()},
                   {"bytes", bytes.size()},
                   {"fnv1a", hex64(fnv1a(std::string_view(bytes.data(), bytes.size())))}});
  }
  m["artifacts"] = arr;
  write_text(dir / "manifest.json", m.dump(2) + "\n");
  validate_artifact(dir / "manifest.json");
}

inline std::string metrics_text(const MetricsReport& r) { return to_json(r).dump(2) + "\n"; }

}  // namespace detail

struct CliStreams {
  std::ostream& out;
  std::ostream& err;
};

namespace detail {

inline void train_and_save(const RunConfig& cfg, const std::filesystem::path& dir, CliStreams io,
                           const std::string& command, std::vector<std::filesystem::path>& files,
                           std::optional<HsiSegModel<float>>* keep = nullptr) {
  const auto scene = prepare_scene(cfg);
  const auto split = run_split(cfg, scene);
  HsiSegModel<float> model(model_config(cfg, scene));
  TrainHooks<float> hooks;
  hooks.forbidden = &split.test;
  auto log = train(model, scene, restrict_labels(scene, split.train), split.train, cfg.train_config(), hooks);
  for (const auto& e : log)
    io.out << "epoch " << e.epoch + 1 << "/" << log.size() << " loss " << e.total << "\n";
  std::filesystem::create_directories(dir);
  save_checkpoint(model, dir / "model.hsw");
  write_loss_csv(log, dir / "loss.csv");
  const auto m = evaluate(model, scene, split.test, cfg.train.patch, cfg.effective_stride(), cfg.workers);
  write_text(dir / "metrics.json", metrics_text(m));
  write_text(dir / "config.json", cfg.to_json().dump(2) + "\n");
  io.out << command << ": OA " << m.oa << " AA " << m.aa << " Kappa " << m.kappa << "\n";
  files.insert(files.end(), {dir / "model.hsw", dir / "loss.csv", dir / "metrics.json", dir / "config.json"});
  if (keep) keep->emplace(std::move(model));
}

}  // namespace detail

/// Parses argv and runs one subcommand. Returns the process exit code:
/// 0 on success, 2 for usage or configuration errors, 1 otherwise.
inline int run_cli(int argc, const char* const* argv, CliStreams io = {std::cout, std::cerr}) {
  CLI::App app{"Hyperspectral segmentation with regional transformers and pseudo-labelling", "hsiseg"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  std::optional<std::string> config_path;
  std::vector<std::string> sets;
  std::optional<std::string> out_opt, profile_opt;
  std::optional<std::uint64_t> seed_opt;
  std::optional<std::size_t> workers_opt, epochs_opt, iterations_opt;
  std::optional<double> tau2_opt, zeta_opt;
  auto add_run_options = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "JSON config with flat dotted keys");
    sub->add_option("--set", sets, "override a config key, KEY=VALUE (repeatable)");
    sub->add_option("-o,--out", out_opt, "output directory");
    sub->add_option("--profile", profile_opt, "dataset profile: ip, pu, mg, ag, hu");
    sub->add_option("--seed", seed_opt, "run seed");
    sub->add_option("--workers", workers_opt, "inference worker threads");
    sub->add_option("--epochs", epochs_opt, "training epochs");
  };

  auto* synth = app.add_subcommand("synth", "write a synthetic HSC1 scene");
  SynthParams sp;
  std::string synth_out;
  bool synth_aux = true;
  synth->set_help_flag("--help", "print this help message and exit");  // frees -h for --h
  synth->add_option("--h", sp.height, "height")->capture_default_str();
  synth->add_option("--w", sp.width, "width")->capture_default_str();
  synth->add_option("--bands", sp.bands, "spectral bands")->capture_default_str();
  synth->add_option("--classes", sp.classes, "classes")->capture_default_str();
  synth->add_option("--noise", sp.noise_sigma, "Gaussian noise sigma")->capture_default_str();
  synth->add_option("--seed", sp.seed, "seed")->capture_default_str();
  synth->add_option("-o,--out", synth_out, "output file (default $HSISEG_OUT/scene.hsc)");
  synth->add_flag("!--no-aux", synth_aux, "omit the auxiliary raster");

  auto* train_cmd = app.add_subcommand("train", "train a model and write checkpoint and metrics");
  add_run_options(train_cmd);

  auto* prog = app.add_subcommand("progressive", "train, then run the pseudo-labelling loop");
  add_run_options(prog);
  prog->add_option("--iterations", iterations_opt, "pseudo-labelling iterations");
  prog->add_option("--tau2", tau2_opt, "initial confidence bound");
  prog->add_option("--zeta", zeta_opt, "bound increment per iteration");

  std::string run_dir, checkpoint_path, eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on the held-out split");
  eval_cmd->add_option("--run", run_dir, "run directory holding config.json and model.hsw");
  eval_cmd->add_option("-c,--config", config_path, "config (default <run>/config.json)");
  eval_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint (default <run>/model.hsw)");
  eval_cmd->add_option("--workers", workers_opt, "inference worker threads");
  eval_cmd->add_option("-o,--out", eval_out, "write metrics JSON here instead of stdout");

  std::string render_out;
  bool render_truth = false;
  auto* render = app.add_subcommand("render", "write a PPM class map");
  render->add_option("--run", run_dir, "run directory holding config.json and model.hsw");
  render->add_option("-c,--config", config_path, "config (default <run>/config.json)");
  render->add_option("--checkpoint", checkpoint_path, "checkpoint (default <run>/model.hsw)");
  render->add_option("--workers", workers_opt, "inference worker threads");
  render->add_flag("--truth", render_truth, "render the ground-truth labels instead of predictions");
  render->add_option("-o,--out", render_out, "output PPM")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, io.out, io.err) == 0 ? 0 : 2;
  }

  auto overrides = [&]() {
    std::vector<std::pair<std::string, OrderedJson>> ov;
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) throw ValidationError("--set expects KEY=VALUE, got '" + s + "'");
      const std::string value = s.substr(eq + 1);
      OrderedJson v = OrderedJson::parse(value, nullptr, false);
      if (v.is_discarded()) v = value;
      ov.emplace_back(s.substr(0, eq), v);
    }
    if (profile_opt) ov.insert(ov.begin(), {"profile", *profile_opt});
    if (out_opt) ov.emplace_back("out", *out_opt);
    if (seed_opt) ov.emplace_back("seed", *seed_opt);
    if (workers_opt) ov.emplace_back("workers", *workers_opt);
    if (epochs_opt) ov.emplace_back("train.epochs", *epochs_opt);
    if (iterations_opt) ov.emplace_back("progressive.iterations", *iterations_opt);
    if (tau2_opt) ov.emplace_back("progressive.tau2", *tau2_opt);
    if (zeta_opt) ov.emplace_back("progressive.zeta", *zeta_opt);
    return ov;
  };
  auto stored_config = [&]() {
    std::optional<std::filesystem::path> file;
    if (config_path) file = *config_path;
    else if (!run_dir.empty()) file = std::filesystem::path(run_dir) / "config.json";
    else throw ValidationError("need --run or --config");
    RunConfig cfg = load_run_config(file, {});
    if (workers_opt) cfg.workers = *workers_opt;
    cfg.validate();
    return cfg;
  };
  auto checkpoint_file = [&]() -> std::filesystem::path {
    if (!checkpoint_path.empty()) return checkpoint_path;
    if (run_dir.empty()) throw ValidationError("need --run or --checkpoint");
    return std::filesystem::path(run_dir) / "model.hsw";
  };

  try {
    if (synth->parsed()) {
      std::filesystem::path path = synth_out;
      if (path.empty()) {
        const char* root = std::getenv("HSISEG_OUT");
        path = std::filesystem::path(root && *root ? root : "runs") / "scene.hsc";
      }
      auto scene = synth_scene(sp);
      if (!synth_aux) {
        scene.aux.reset();
        scene.aux_bands = 0;
      }
      if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
      save_scene(scene, path);
      detail::validate_artifact(path);
      io.out << "wrote " << path.string() << "\n";
      return 0;
    }

    if (train_cmd->parsed()) {
      auto cfg = load_run_config(config_path ? std::optional<std::filesystem::path>(*config_path) : std::nullopt,
                                 overrides());
      cfg.validate();
      const auto dir = detail::output_dir(cfg, "train");
      std::vector<std::filesystem::path> files;
      detail::train_and_save(cfg, dir, io, "train", files);
      detail::write_manifest(dir, "train", cfg, files);
      return 0;
    }

    if (prog->parsed()) {
      auto cfg = load_run_config(config_path ? std::optional<std::filesystem::path>(*config_path) : std::nullopt,
                                 overrides());
      cfg.validate();
      const auto dir = detail::output_dir(cfg, "progressive");
      std::vector<std::filesystem::path> files;
      std::optional<HsiSegModel<float>> trained;
      detail::train_and_save(cfg, dir, io, "initial", files, &trained);
      auto& model = *trained;
      const auto scene = prepare_scene(cfg);
      const auto split = run_split(cfg, scene);
      auto pc = cfg.progressive;
      pc.stride = cfg.effective_stride();
      pc.workers = cfg.workers;
      pc.run_dir = dir;
      auto res = progressive_learn(model, scene, split, cfg.train_config(), pc);
      for (const auto& it : res.iterations)
        io.out << "iteration " << it.iteration << " tau2 " << it.tau2 << " T2 " << it.threshold << " coverage "
               << it.coverage << " OA " << it.metrics.oa << "\n";
      char buf[128];
      std::snprintf(buf, sizeof buf, "tau2 used by the last iteration = %.10g\nfinal tau2 = %.10g\n", res.tau2_last,
                    res.tau2_next);
      io.out << buf;
      save_checkpoint(model, dir / "model.hsw");
      OrderedJson summary;
      summary["iterations"] = OrderedJson::array();
      for (const auto& it : res.iterations) summary["iterations"].push_back(to_json(it));
      summary["tau2_last"] = res.tau2_last;
      summary["tau2_final"] = res.tau2_next;
      summary["final"] = to_json(res.final_metrics);
      detail::write_text(dir / "progressive.json", summary.dump(2) + "\n");
      detail::write_text(dir / "metrics.json", detail::metrics_text(res.final_metrics));
      files.push_back(dir / "progressive.json");
      for (std::size_t t = 1; t <= res.iterations.size(); ++t) {
        files.push_back(dir / ("y_temp_iter" + std::to_string(t) + ".hsc"));
        files.push_back(dir / ("metrics_iter" + std::to_string(t) + ".json"));
      }
      detail::write_manifest(dir, "progressive", cfg, files);
      return 0;
    }

    if (eval_cmd->parsed()) {
      const auto cfg = stored_config();
      const auto scene = prepare_scene(cfg);
      const auto split = run_split(cfg, scene);
      const auto model = load_checkpoint<float>(checkpoint_file());
      const auto m = evaluate(model, scene, split.test, cfg.train.patch, cfg.effective_stride(), cfg.workers);
      const auto text = detail::metrics_text(m);
      if (eval_out.empty()) {
        io.out << text;
      } else {
        detail::write_text(eval_out, text);
        detail::validate_artifact(eval_out);
      }
      return 0;
    }

    if (render->parsed()) {
      std::vector<std::uint16_t> map;
      std::size_t h = 0, w = 0;
      if (render_truth && run_dir.empty() && !config_path) {
        throw ValidationError("--truth needs --run or --config to locate the scene");
      }
      const auto cfg = stored_config();
      const auto scene = prepare_scene(cfg);
      h = scene.height;
      w = scene.width;
      if (render_truth) {
        map = scene.labels;
      } else {
        const auto model = load_checkpoint<float>(checkpoint_file());
        map = predict_labels(infer_full_scene(model, scene, cfg.train.patch, cfg.effective_stride(), cfg.workers));
      }
      detail::write_file(render_out, render_map(map, h, w));
      detail::validate_artifact(render_out);
      io.out << "wrote " << render_out << "\n";
      return 0;
    }
  } catch (const ValidationError& e) {
    io.err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    io.err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace hsiseg
