#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <sstream>

#include "hsiseg/cli.hpp"

using namespace hsiseg;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "hsiseg");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), {out, err});
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  auto bytes = detail::read_file(p);
  return {bytes.begin(), bytes.end()};
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

fs::path small_config(const fs::path& dir) {
  const auto p = dir / "small.json";
  std::ofstream(p) << R"({"synth.height": 14, "synth.width": 13, "synth.bands": 6, "synth.classes": 3,
    "pca": 4, "split.per_class": 4, "model.ladder": [6, 4], "model.d": 4, "model.heads": 1,
    "train.epochs": 2, "train.batch": 4, "train.patch": 7, "progressive.finetune_samples": 6})";
  return p;
}

}  // namespace

TEST_CASE("fnv1a reference values", "[cli]") {
  CHECK(fnv1a("") == 0xcbf29ce484222325ull);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cull);
  CHECK(fnv1a("foobar") == 0x85944171f73967e8ull);
  CHECK(hex64(0xabcull) == "0000000000000abc");
}

TEST_CASE("synth is deterministic", "[cli]") {
  TempDir dir("hsiseg_cli_synth");
  const auto a = (dir.path / "a.hsc").string(), b = (dir.path / "b.hsc").string();
  for (const auto& f : {a, b})
    REQUIRE(cli({"synth", "--h", "48", "--w", "48", "--bands", "16", "--classes", "4", "--seed", "1", "-o", f}).code == 0);
  CHECK(slurp(a) == slurp(b));
  auto scene = load_scene(a);
  CHECK(scene.height == 48);
  CHECK(scene.bands == 16);
  CHECK(scene.class_count == 4);
  REQUIRE(cli({"synth", "--h", "48", "--w", "48", "--seed", "2", "-o", b}).code == 0);
  CHECK(slurp(a) != slurp(b));
}

TEST_CASE("config validation", "[cli][config]") {
  TempDir dir("hsiseg_cli_config");
  SECTION("unknown key lists the valid keys") {
    auto r = cli({"train", "--set", "train.epoch=3"});
    CHECK(r.code == 2);
    CHECK_THAT(r.err, Catch::Matchers::ContainsSubstring("unknown config key 'train.epoch'"));
    CHECK_THAT(r.err, Catch::Matchers::ContainsSubstring("train.epochs"));
    CHECK_THAT(r.err, Catch::Matchers::ContainsSubstring("progressive.zeta"));
    const auto f = dir.path / "bad.json";
    std::ofstream(f) << R"({"model.depth": 3})";
    CHECK(cli({"train", "-c", f.string()}).code == 2);
  }
  SECTION("scene and synthesis are mutually exclusive") {
    const auto scene = (dir.path / "s.hsc").string();
    REQUIRE(cli({"synth", "--h", "8", "--w", "8", "--bands", "4", "--classes", "2", "-o", scene}).code == 0);
    auto r = cli({"train", "--set", "scene=" + scene, "--set", "synth.height=9"});
    CHECK(r.code == 2);
    CHECK_THAT(r.err, Catch::Matchers::ContainsSubstring("both"));
  }
  SECTION("referenced paths must exist") {
    auto r = cli({"train", "--set", "scene=" + (dir.path / "missing.hsc").string()});
    CHECK(r.code == 2);
    CHECK_THAT(r.err, Catch::Matchers::ContainsSubstring("does not exist"));
  }
  SECTION("wrong value types and bad flags") {
    CHECK(cli({"train", "--set", "train.epochs=\"many\""}).code == 2);
    CHECK(cli({"train", "--set", "noequals"}).code == 2);
    CHECK(cli({"frobnicate"}).code == 2);
    CHECK(cli({"train", "--set", "train.lr=0"}).code == 2);
  }
  SECTION("file keys apply in order and flags override them") {
    const auto f = small_config(dir.path);
    auto cfg = load_run_config(f, {{"train.epochs", 9}});
    CHECK(cfg.train.epochs == 9);
    CHECK(cfg.train.batch == 4);
    CHECK(cfg.ladder == std::vector<std::size_t>{6, 4});
    auto round = load_run_config(std::nullopt, {});
    const auto flat = cfg.to_json();
    for (auto it = flat.begin(); it != flat.end(); ++it) round.set(it.key(), it.value());
    CHECK(round.to_json() == cfg.to_json());
  }
}

TEST_CASE("dataset profiles carry their preset hyperparameters", "[cli][config]") {
  struct Expect {
    const char* name;
    std::size_t pca, patch, d, layers, heads;
    double tau1, tau2;
    std::size_t epochs, batch;
    double lr, dropout;
    std::size_t iterations;
  };
  const Expect table[] = {
      {"ip", 30, 33, 64, 4, 2, 0.8, 0.7, 300, 32, 0.0015, 0.1, 14},
      {"pu", 15, 49, 32, 2, 2, 0.9, 0.9, 200, 64, 0.001, 0.15, 8},
      {"mg", 30, 41, 64, 4, 4, 0.8, 0.7, 300, 32, 0.0015, 0.1, 10},
      {"ag", 15, 33, 64, 4, 4, 0.6, 0.7, 300, 32, 0.0015, 0.1, 10},
      {"hu", 30, 57, 32, 3, 2, 0.9, 0.8, 200, 64, 0.001, 0.15, 8},
  };
  for (const auto& e : table) {
    auto cfg = load_run_config(std::nullopt, {{"profile", e.name}});
    INFO(e.name);
    CHECK(cfg.pca == e.pca);
    CHECK(cfg.train.patch == e.patch);
    CHECK(cfg.d == e.d);
    CHECK(cfg.ladder.size() == e.layers);
    CHECK(cfg.ladder.front() == 144);
    CHECK(cfg.heads == e.heads);
    CHECK(cfg.tau1 == e.tau1);
    CHECK(cfg.progressive.tau2 == e.tau2);
    CHECK(cfg.train.epochs == e.epochs);
    CHECK(cfg.train.batch == e.batch);
    CHECK(cfg.train.lr == e.lr);
    CHECK(cfg.dropout == e.dropout);
    CHECK(cfg.progressive.iterations == e.iterations);
    CHECK(cfg.progressive.zeta == 0.005);
  }
  CHECK_THROWS_AS(load_run_config(std::nullopt, {{"profile", "xx"}}), ValidationError);
  auto later = load_run_config(std::nullopt, {{"train.epochs", 5}, {"profile", "pu"}});
  CHECK(later.train.epochs == 5);
}

TEST_CASE("train, eval and render round trip", "[cli][run]") {
  TempDir dir("hsiseg_cli_run");
  const auto cfg = small_config(dir.path).string();
  const auto r1 = (dir.path / "r1").string(), r2 = (dir.path / "r2").string();
  REQUIRE(cli({"train", "-c", cfg, "-o", r1}).code == 0);
  REQUIRE(cli({"train", "-c", cfg, "-o", r2}).code == 0);
  for (const char* f : {"model.hsw", "metrics.json", "loss.csv"}) CHECK(slurp(fs::path(r1) / f) == slurp(fs::path(r2) / f));
  // the output directory is not part of the reproducibility hash
  auto m1 = nlohmann::ordered_json::parse(slurp(fs::path(r1) / "manifest.json"));
  auto m2 = nlohmann::ordered_json::parse(slurp(fs::path(r2) / "manifest.json"));
  CHECK(m1["config_hash"] == m2["config_hash"]);

  auto ev = cli({"eval", "--run", r1});
  REQUIRE(ev.code == 0);
  CHECK(ev.out == slurp(fs::path(r1) / "metrics.json"));
  auto ev2 = cli({"eval", "--run", r1, "--workers", "3", "-o", (dir.path / "ev.json").string()});
  REQUIRE(ev2.code == 0);
  CHECK(slurp(dir.path / "ev.json") == ev.out);

  auto manifest = nlohmann::ordered_json::parse(slurp(fs::path(r1) / "manifest.json"));
  auto stored = load_run_config(fs::path(r1) / "config.json", {});
  CHECK(manifest["config_hash"] == hex64(fnv1a(stored.hash_json().dump())));
  CHECK(manifest["artifacts"].size() == 4);
  for (const auto& a : manifest["artifacts"])
    CHECK(a["fnv1a"] == hex64(fnv1a(slurp(fs::path(r1) / a["name"].get<std::string>()))));

  const auto ppm = (dir.path / "map.ppm").string();
  REQUIRE(cli({"render", "--run", r1, "-o", ppm}).code == 0);
  const auto bytes = slurp(ppm);
  CHECK(bytes.rfind("P6\n13 14\n255\n", 0) == 0);
  CHECK(bytes.size() == std::string("P6\n13 14\n255\n").size() + 3 * 13 * 14);
  REQUIRE(cli({"render", "--run", r1, "--truth", "-o", ppm}).code == 0);
  CHECK(cli({"eval", "--run", (dir.path / "nowhere").string()}).code != 0);
}

TEST_CASE("progressive schedule and output root", "[cli][run]") {
  TempDir dir("hsiseg_cli_prog");
  const auto cfg = small_config(dir.path).string();
  ::setenv("HSISEG_OUT", dir.path.c_str(), 1);
  auto r = cli({"progressive", "-c", cfg, "--iterations", "4", "--tau2", "0.7", "--zeta", "0.005"});
  ::unsetenv("HSISEG_OUT");
  REQUIRE(r.code == 0);
  CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("final tau2 = 0.72\n"));
  const auto run = dir.path / "progressive";
  auto summary = nlohmann::ordered_json::parse(slurp(run / "progressive.json"));
  CHECK(summary["tau2_final"].get<double>() == 0.72);
  CHECK(summary["iterations"].size() == 4);
  CHECK(summary["iterations"][2]["tau2"].get<double>() == 0.71);
  for (int t = 1; t <= 4; ++t) CHECK(fs::exists(run / ("y_temp_iter" + std::to_string(t) + ".hsc")));
  CHECK(fs::exists(run / "manifest.json"));
}
