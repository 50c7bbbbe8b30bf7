#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dualcycle/pipeline.hpp"

using namespace dualcycle;
namespace fs = std::filesystem;

namespace {

std::string small_config_json(const std::string& out_dir, int count = 1) {
  std::ostringstream ss;
  ss << R"({
    "output_dir": ")" << out_dir << R"(",
    "phantom": {"count": )" << count << R"(, "dims": [24, 24, 24],
                "line_count_range": [4, 6], "seed": 5},
    "simulation": {"sigma_a": 1.5, "sigma_b": 1.5},
    "rl": {"iterations": 10},
    "methods": ["view_a", "view_b", "fuse_average", "joint_rl"]
  })";
  return ss.str();
}

fs::path fresh_dir(const char* name) {
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir;
}

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  return std::vector<char>(std::istreambuf_iterator<char>(is), {});
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DUALCYCLE_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("config parsing, validation and lossless round-trip") {
  ExperimentConfig cfg = parse_experiment_config(small_config_json("/tmp/x"));
  CHECK(cfg.phantoms.size() == 1);
  CHECK(cfg.simulation.sigma_a == 1.5);
  CHECK(cfg.methods.size() == 4);

  ExperimentConfig back = parse_experiment_config(experiment_config_to_json(cfg));
  CHECK(back.phantoms.size() == cfg.phantoms.size());
  CHECK(back.phantoms[0].seed == cfg.phantoms[0].seed);
  CHECK(back.simulation.sigma_a == cfg.simulation.sigma_a);
  CHECK(back.train.steps == cfg.train.steps);
  CHECK(back.methods == cfg.methods);
  CHECK(back.output_dir == cfg.output_dir);
  CHECK(experiment_config_to_json(back) == experiment_config_to_json(cfg));
}

TEST_CASE("config errors are ConfigError") {
  CHECK_THROWS_AS(parse_experiment_config("{not json"), ConfigError);
  CHECK_THROWS_AS(parse_experiment_config(R"({"methods": ["bogus"]})"), ConfigError);
  CHECK_THROWS_AS(parse_experiment_config(R"({"phantom": {"count": 0}})"), ConfigError);
  CHECK_THROWS_AS(
      parse_experiment_config(R"({"train": {"warm_start_path": "/no/such/file"}})"),
      ConfigError);
  CHECK_THROWS_AS(
      parse_experiment_config(R"({"simulation": {"noise": {"model": "salt"}}})"),
      ConfigError);
}

TEST_CASE("default config follows the six-volume protocol") {
  ExperimentConfig cfg = parse_experiment_config("{}");
  CHECK(cfg.phantoms.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) CHECK(cfg.phantoms[i].seed == i);
}

TEST_CASE("cmd_phantom writes volumes plus a manifest, deterministically") {
  const fs::path dir = fresh_dir("dc_test_phantom");
  ExperimentConfig cfg = parse_experiment_config(small_config_json(dir.string(), 2));
  auto paths = cmd_phantom(cfg);
  REQUIRE(paths.size() == 2);
  for (const auto& p : paths) CHECK(fs::exists(p));
  CHECK(fs::exists(dir / "phantoms" / "manifest.json"));

  auto first = read_bytes(paths[0]);
  fs::remove_all(dir);
  cmd_phantom(cfg);
  CHECK(read_bytes(paths[0]) == first);  // byte-identical rerun
  fs::remove_all(dir);
}

TEST_CASE("cmd_simulate produces views, PSFs and a manifest") {
  const fs::path dir = fresh_dir("dc_test_simulate");
  ExperimentConfig cfg = parse_experiment_config(small_config_json(dir.string()));
  cmd_phantom(cfg);
  auto paths = cmd_simulate(cfg);
  REQUIRE(paths.size() == 2);
  CHECK(fs::exists(dir / "views" / "psf_a.rv1"));
  CHECK(fs::exists(dir / "views" / "manifest.json"));

  auto first = read_bytes(paths[0]);
  cmd_simulate(cfg);
  CHECK(read_bytes(paths[0]) == first);
  fs::remove_all(dir);
}

TEST_CASE("cmd_simulate with missing phantom file raises a data error") {
  const fs::path dir = fresh_dir("dc_test_simulate_missing");
  ExperimentConfig cfg = parse_experiment_config(small_config_json(dir.string()));
  auto paths = cmd_phantom(cfg);
  fs::remove(paths[0]);
  CHECK_THROWS_AS(cmd_simulate(cfg), DataError);
  fs::remove_all(dir);
}

TEST_CASE("preprocess_volume affine rescale oracle") {
  // Ramp 0..255 along x, floor 78 -> min 0, max 1, below-floor mapped to 0.
  Volume3D ramp(1, 1, 256, 0.0f);
  for (int x = 0; x < 256; ++x) ramp.at(0, 0, x) = static_cast<float>(x);
  Volume3D out = preprocess_volume(ramp, 78.0, 1.0);
  CHECK(out.min_value() == 0.0f);
  CHECK(out.max_value() == 1.0f);
  for (int x = 0; x <= 78; ++x) CHECK(out.at(0, 0, x) == 0.0f);
  for (int x = 79; x < 256; ++x)
    CHECK(out.at(0, 0, x) == doctest::Approx((x - 78.0) / (255.0 - 78.0)).epsilon(1e-6));
}

TEST_CASE("preprocess_volume is a no-op for normalized isotropic input") {
  Volume3D v(8, 8, 8, 0.0f);
  for (int z = 0; z < 8; ++z) v.at(z, 4, 4) = z / 7.0f;
  Volume3D out = preprocess_volume(v, 0.0, 1.0);
  REQUIRE(out.size() == v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    CHECK(std::abs(out.data()[i] - v.data()[i]) < 1e-6);
}

TEST_CASE("preprocess_volume rejects constant input") {
  CHECK_THROWS_AS(preprocess_volume(Volume3D(8, 8, 8, 78.0f), 78.0, 1.0), DataError);
}

TEST_CASE("preprocess resampling matches spacing arithmetic") {
  Volume3D v(11, 8, 8, 0.0f, {0.325, 0.1625, 0.1625});
  v.at(5, 4, 4) = 1.0f;
  Volume3D out = preprocess_volume(v, 0.0, 0.1625);
  CHECK(out.nz() == 21);  // extent 10*0.325 = 3.25 -> 20 steps of 0.1625
  CHECK(out.ny() == 8);
  CHECK(out.nx() == 8);
}

TEST_CASE("cmd_run emits exactly the selected method rows and reports") {
  const fs::path dir = fresh_dir("dc_test_run");
  std::string json = small_config_json(dir.string());
  ExperimentConfig cfg = parse_experiment_config(json);
  cfg.methods = {"view_a"};
  auto rows = cmd_run(cfg);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].method == "view_a");
  CHECK_FALSE(rows[0].failed);
  CHECK(fs::exists(dir / "metrics.json"));
  CHECK(fs::exists(dir / "summary.txt"));
  CHECK(fs::exists(dir / "figures"));

  // Config echo in the summary makes reports self-describing.
  std::ifstream is(dir / "summary.txt");
  std::stringstream ss;
  ss << is.rdbuf();
  CHECK(ss.str().find("Config echo") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("cmd_run rerun with the same seeds gives identical metric JSON") {
  const fs::path dir = fresh_dir("dc_test_run_repro");
  ExperimentConfig cfg = parse_experiment_config(small_config_json(dir.string()));
  cmd_run(cfg);
  auto first = read_bytes(dir / "metrics.json");
  fs::remove_all(dir);
  cmd_run(cfg);
  CHECK(read_bytes(dir / "metrics.json") == first);
  fs::remove_all(dir);
}

TEST_CASE("classical methods beat the views in the summary ordering") {
  const fs::path dir = fresh_dir("dc_test_run_order");
  ExperimentConfig cfg = parse_experiment_config(small_config_json(dir.string()));
  auto rows = cmd_run(cfg);
  double view_best = 0.0, rl = 0.0;
  for (const auto& r : rows) {
    if (r.method == "view_a" || r.method == "view_b")
      view_best = std::max(view_best, r.ssim);
    if (r.method == "joint_rl") rl = r.ssim;
  }
  CHECK(rl > view_best);
  fs::remove_all(dir);
}

TEST_CASE("CLI exit codes follow the contract") {
  const fs::path dir = fresh_dir("dc_test_cli");
  const fs::path cfg_path = dir / "cfg.json";
  fs::create_directories(dir);
  std::ofstream(cfg_path) << small_config_json((dir / "out").string());

  CHECK(run_cli("phantom --config " + cfg_path.string()) == 0);
  CHECK(run_cli("simulate --config " + cfg_path.string()) == 0);
  CHECK(run_cli("run --config " + cfg_path.string()) == 0);

  // Config error: malformed JSON.
  std::ofstream(dir / "bad.json") << "{nope";
  CHECK(run_cli("run --config " + (dir / "bad.json").string()) == 2);
  CHECK(run_cli("run --config " + (dir / "missing.json").string()) == 2);
  CHECK(run_cli("bogus-verb") == 2);

  // Data error: simulate without phantoms.
  fs::remove_all(dir / "out");
  CHECK(run_cli("simulate --config " + cfg_path.string()) == 3);

  // Evaluate compares two volumes.
  CHECK(run_cli("phantom --config " + cfg_path.string()) == 0);
  const std::string vol = (dir / "out" / "phantoms" / "phantom_000.rv1").string();
  CHECK(run_cli("evaluate " + vol + " " + vol) == 0);
  CHECK(run_cli("evaluate " + vol + " /no/such.rv1") == 3);

  // Preprocess via CLI.
  CHECK(run_cli("preprocess " + vol + " " + (dir / "pre.rv1").string() +
                " --floor 0.1 --spacing 1.0") == 0);
  CHECK(fs::exists(dir / "pre.rv1"));
  fs::remove_all(dir);
}

TEST_CASE("summary table aggregates per method and marks failures") {
  std::vector<MetricRow> rows;
  MetricRow a{"view_a", 0, 20.0, 0.5, false, ""};
  MetricRow b{"view_a", 1, 22.0, 0.7, false, ""};
  MetricRow c{"joint_rl", 0, 0.0, 0.0, true, "boom"};
  rows = {a, b, c};
  const std::string table = render_summary_table(rows, "{}");
  CHECK(table.find("21.00") != std::string::npos);
  CHECK(table.find("0.600") != std::string::npos);
  CHECK(table.find("FAILED") != std::string::npos);
  CHECK(table.find("denoising omitted") != std::string::npos);
}
