#include <cstdlib>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "support.hpp"
#include "vtrfeat/cli.hpp"
#include "vtrfeat/vtr_harness.hpp"

using namespace vtrfeat;
using vtrfeat::testing::TempDir;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result call(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

json error_line(const std::string& err) {
  const std::string first = err.substr(0, err.find('\n'));
  return json::parse(first);
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

void check_run_dir(const fs::path& dir, const std::string& sub) {
  REQUIRE(fs::exists(dir / "run_manifest.json"));
  REQUIRE(fs::exists(dir / "run_config.toml"));
  const json m = read_json(dir / "run_manifest.json");
  CHECK(m.at("format") == "vtrfeat-run");
  CHECK(m.at("subcommand") == sub);
  CHECK(m.at("config").is_object());
}

struct EnvGuard {
  EnvGuard(const char* name, const std::string& value) : name_(name) { ::setenv(name, value.c_str(), 1); }
  ~EnvGuard() { ::unsetenv(name_); }
  const char* name_;
};

}  // namespace

TEST_CASE("usage errors exit 2 with a JSON error line and usage text") {
  TempDir tmp("cli_usage");
  ::unsetenv(cli::kRunDirEnv);

  Result r = call({"train", "--bogus"});
  CHECK(r.code == cli::kExitUsage);
  json e = error_line(r.err);
  CHECK(e.at("error") == "UsageError");
  CHECK(e.at("exit_code") == 2);
  CHECK(r.err.find("Usage:") != std::string::npos);

  r = call({"train", "--data", (tmp.path() / "missing").string(), "--out", (tmp.path() / "t").string()});
  CHECK(r.code == cli::kExitUsage);
  CHECK(error_line(r.err).at("message").get<std::string>().find("missing") != std::string::npos);

  r = call({});
  CHECK(r.code == cli::kExitUsage);

  // no --out and no run-dir variable
  r = call({"synth", "--count", "1", "--val-count", "1"});
  CHECK(r.code == cli::kExitUsage);
  CHECK(error_line(r.err).at("error") == "UsageError");

  r = call({"synth", "--kind", "sequence", "--condition", "eclipse", "--out", (tmp.path() / "s").string()});
  CHECK(r.code == cli::kExitUsage);
  CHECK(error_line(r.err).at("error") == "ConfigError");

  r = call({"synth", "--kind", "bogus", "--out", (tmp.path() / "s2").string()});
  CHECK(r.code == cli::kExitUsage);

  r = call({"--version"});
  CHECK(r.code == cli::kExitOk);
  CHECK(!r.out.empty());
}

TEST_CASE("synth writes datasets and sequences with run manifests") {
  TempDir tmp("cli_synth");
  const fs::path a = tmp.path() / "a", b = tmp.path() / "b";
  for (const fs::path& d : {a, b}) {
    Result r = call({"synth", "--count", "3", "--val-count", "2", "--width", "32", "--height", "24", "--seed", "4",
                     "--out", d.string()});
    REQUIRE(r.code == cli::kExitOk);
  }
  check_run_dir(a, "synth");
  CHECK(fs::exists(a / "manifest.json"));
  CHECK(read_json(a / "run_manifest.json").at("config").at("count") == "3");
  fs::remove(a / "run_manifest.json");
  fs::remove(b / "run_manifest.json");
  CHECK(vtrfeat::testing::same_tree(a, b));

  const fs::path s = tmp.path() / "seq";
  Result r = call({"synth", "--kind", "sequence", "--frames", "5", "--condition", "dusk", "--out", s.string()});
  REQUIRE(r.code == cli::kExitOk);
  const Sequence seq = read_sequence(s);
  CHECK(seq.frames.size() == 5);
  CHECK(seq.config.condition == "dusk");
}

TEST_CASE("run directory from the environment") {
  TempDir tmp("cli_env");
  EnvGuard env(cli::kRunDirEnv, tmp.path().string());
  Result r = call({"synth", "--count", "1", "--val-count", "1", "--width", "32", "--height", "24"});
  REQUIRE(r.code == cli::kExitOk);
  check_run_dir(tmp.path() / "synth", "synth");

  // explicit --out wins
  r = call({"synth", "--count", "1", "--val-count", "1", "--width", "32", "--height", "24", "--out",
            (tmp.path() / "here").string()});
  REQUIRE(r.code == cli::kExitOk);
  CHECK(fs::exists(tmp.path() / "here" / "run_manifest.json"));
}

TEST_CASE("config file of dotted keys, flags override, run_config.toml replays") {
  TempDir tmp("cli_cfg");
  const fs::path cfg = tmp.path() / "c.toml";
  {
    std::ofstream f(cfg);
    f << "synth.count = 4\nsynth.val-count = 2\nsynth.width = 32\nsynth.height = 24\nsynth.seed = 9\n";
  }
  const fs::path a = tmp.path() / "a";
  Result r = call({"--config", cfg.string(), "synth", "--count", "2", "--out", a.string()});
  REQUIRE(r.code == cli::kExitOk);
  const json c = read_json(a / "run_manifest.json").at("config");
  CHECK(c.at("count") == "2");
  CHECK(c.at("val-count") == "2");
  CHECK(c.at("seed") == "9");

  const fs::path b = tmp.path() / "b";
  r = call({"--config", (a / "run_config.toml").string(), "synth", "--out", b.string()});
  REQUIRE(r.code == cli::kExitOk);
  fs::remove(a / "run_manifest.json");
  fs::remove(b / "run_manifest.json");
  fs::remove(a / "run_config.toml");
  fs::remove(b / "run_config.toml");
  CHECK(vtrfeat::testing::same_tree(a, b));

  r = call({"--config", (tmp.path() / "absent.toml").string(), "synth", "--out", (tmp.path() / "x").string()});
  CHECK(r.code == cli::kExitUsage);
}

TEST_CASE("train, teach, repeat and report compose") {
  TempDir tmp("cli_pipe");
  const fs::path p = tmp.path();
  REQUIRE(call({"synth", "--count", "4", "--val-count", "2", "--width", "32", "--height", "24", "--out",
                (p / "data").string()})
              .code == cli::kExitOk);
  for (const std::string run : {"t1", "t2"}) {
    Result r = call({"train", "--data", (p / "data").string(), "--epochs", "1", "--lr", "1e-3", "--seed", "3",
                     "--out", (p / run).string()});
    REQUIRE(r.code == cli::kExitOk);
  }
  check_run_dir(p / "t1", "train");
  CHECK(fs::exists(p / "t1" / "loss_curve.csv"));
  CHECK(vtrfeat::testing::read_bytes(p / "t1" / "loss_curve.csv") ==
        vtrfeat::testing::read_bytes(p / "t2" / "loss_curve.csv"));
  const json seeds = read_json(p / "t1" / "run_manifest.json").at("seeds");
  CHECK(!seeds.empty());

  REQUIRE(call({"synth", "--kind", "sequence", "--frames", "6", "--condition", "noon", "--out", (p / "noon").string()})
              .code == cli::kExitOk);
  REQUIRE(call({"synth", "--kind", "sequence", "--frames", "6", "--condition", "night", "--seed", "2",
                "--lateral-jitter", "0.1", "--out", (p / "night").string()})
              .code == cli::kExitOk);

  Result r = call({"teach", "--frames", (p / "noon").string(), "--ckpt", (p / "t1").string(), "--out",
                   (p / "map").string()});
  REQUIRE(r.code == cli::kExitOk);
  check_run_dir(p / "map", "teach");

  // a barely trained network fails often at night; repeat still exits 0
  r = call({"repeat", "--map", (p / "map").string(), "--frames", (p / "night").string(), "--ckpt",
            (p / "t1").string(), "--out", (p / "rep_night").string()});
  REQUIRE(r.code == cli::kExitOk);
  check_run_dir(p / "rep_night", "repeat");
  auto reports = read_report(p / "rep_night");
  REQUIRE(reports.size() == 1);
  CHECK(reports[0].frames.size() == 6);
  CHECK(reports[0].repeat_condition == "night");

  r = call({"repeat", "--map", (p / "map").string(), "--frames", (p / "noon").string(), "--ckpt",
            (p / "t1").string(), "--out", (p / "rep_noon").string()});
  REQUIRE(r.code == cli::kExitOk);

  // features that do not match the map
  r = call({"repeat", "--map", (p / "map").string(), "--frames", (p / "noon").string(), "--analytic", "--out",
            (p / "bad").string()});
  CHECK(r.code == cli::kExitData);
  CHECK(error_line(r.err).at("error") == "DataError");

  r = call({"report", "--in", (p / "rep_night").string(), "--in", (p / "rep_noon").string(), "--out",
            (p / "merged").string()});
  REQUIRE(r.code == cli::kExitOk);
  CHECK(read_report(p / "merged").size() == 2);
  std::ifstream m(p / "merged" / "condition_matrix.csv");
  std::string header;
  std::getline(m, header);
  CHECK(header.rfind("teach\\repeat", 0) == 0);

  r = call({"report", "--in", (p / "data").string(), "--out", (p / "bad_report").string()});
  CHECK(r.code == cli::kExitData);
}

TEST_CASE("eval-grad writes its result and exits 4 above the tolerance") {
  TempDir tmp("cli_grad");
  const fs::path p = tmp.path();
  REQUIRE(call({"synth", "--count", "1", "--val-count", "1", "--width", "32", "--height", "24", "--out",
                (p / "data").string()})
              .code == cli::kExitOk);
  Result r = call({"eval-grad", "--data", (p / "data").string(), "--tolerance", "1e-30", "--out",
                   (p / "g").string()});
  CHECK(r.code == cli::kExitNumeric);
  CHECK(error_line(r.err).at("exit_code") == 4);
  const json g = read_json(p / "g" / "grad_check.json");
  CHECK(g.at("rel_error").get<double>() < 1e-4);
  CHECK_FALSE(g.at("pass").get<bool>());
}
