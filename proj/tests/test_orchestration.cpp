#include <redmix/orchestration.hpp>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <doctest.h>
#include <nlohmann/json.hpp>

#ifndef REDMIX_CLI_PATH
#error "REDMIX_CLI_PATH must point at the command line binary"
#endif

using namespace redmix;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const char* tag) {
  const fs::path p =
      fs::temp_directory_path() / (std::string("redmix-orch-") + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(const std::string& args, const std::string& env_prefix = {}) {
  const std::string cmd = env_prefix + std::string(REDMIX_CLI_PATH) + " " +
                          args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  return WEXITSTATUS(status);
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int count_lines(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in.good());
  int lines = 0;
  std::string line;
  while (std::getline(in, line)) ++lines;
  return lines;
}

}  // namespace

TEST_SUITE("orchestration") {

TEST_CASE("parse_grid_spec accepts ranges and single values") {
  const std::vector<double> full = parse_grid_spec("0:1:0.1");
  REQUIRE(full.size() == 11);
  CHECK(full.front() == 0.0);
  CHECK(full.back() == 1.0);  // endpoint snapped exactly
  CHECK(full[5] == doctest::Approx(0.5).epsilon(1e-12));

  const std::vector<double> coarse = parse_grid_spec("0:1:0.5");
  REQUIRE(coarse.size() == 3);
  CHECK(coarse[0] == 0.0);
  CHECK(coarse[1] == 0.5);
  CHECK(coarse[2] == 1.0);

  const std::vector<double> single = parse_grid_spec("0.7");
  REQUIRE(single.size() == 1);
  CHECK(single[0] == 0.7);

  CHECK_THROWS_AS(parse_grid_spec("1:0:0.1"), std::invalid_argument);
  CHECK_THROWS_AS(parse_grid_spec("0:1:0"), std::invalid_argument);
  CHECK_THROWS_AS(parse_grid_spec("0:1:-0.1"), std::invalid_argument);
  CHECK_THROWS_AS(parse_grid_spec("abc"), std::invalid_argument);
  CHECK_THROWS_AS(parse_grid_spec(""), std::invalid_argument);
  CHECK_THROWS_AS(parse_grid_spec("0:2:0.5"), std::invalid_argument);  // alpha > 1
}

TEST_CASE("file_checksum is FNV-1a over the raw bytes") {
  const fs::path dir = fresh_dir("checksum");
  {
    std::ofstream out(dir / "f.bin", std::ios::binary);
    out << "redmix";
  }
  // Independent FNV-1a implementation.
  std::uint64_t expect = 0xcbf29ce484222325ULL;
  for (const char c : std::string("redmix")) {
    expect = (expect ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
  }
  CHECK(file_checksum(dir / "f.bin") == expect);

  {
    std::ofstream out(dir / "f.bin", std::ios::binary);
    out << "redmiy";
  }
  CHECK(file_checksum(dir / "f.bin") != expect);

  CHECK_THROWS_AS(file_checksum(dir / "missing.bin"), std::runtime_error);
}

TEST_CASE("run config round-trips and rejects unknown keys") {
  const fs::path dir = fresh_dir("config");
  RunConfig cfg;
  cfg.embeddings = "/tmp/e.txt";
  cfg.prompt = "/tmp/p.txt";
  cfg.blocklist = "/tmp/b.txt";
  cfg.seed = 99;
  cfg.fit.steps = 123;
  cfg.optimizer.iterations = 7;
  cfg.entropy_weight = 0.125;
  cfg.metrics_n = 4;
  cfg.tau2 = 0.6;
  cfg.grid = "0:1:0.25";
  cfg.grid_prompts = 50;
  save_run_config(cfg, dir / "run.json");
  const RunConfig back = load_run_config(dir / "run.json");
  CHECK(back.embeddings == cfg.embeddings);
  CHECK(back.seed == 99);
  CHECK(back.fit.steps == 123);
  CHECK(back.optimizer.iterations == 7);
  CHECK(back.entropy_weight == 0.125);
  CHECK(back.metrics_n == 4);
  CHECK(back.tau2 == 0.6);
  CHECK(back.grid == "0:1:0.25");
  CHECK(back.grid_prompts == 50);

  {
    std::ofstream out(dir / "unknown.json");
    out << R"({"seed": 1, "mystery_knob": true})";
  }
  CHECK_THROWS_WITH_AS(load_run_config(dir / "unknown.json"),
                       doctest::Contains("mystery_knob"),
                       std::invalid_argument);

  // Per-module seeds are not configurable; they derive from the global seed.
  {
    std::ofstream out(dir / "modseed.json");
    out << R"({"fit": {"seed": 3}})";
  }
  CHECK_THROWS_WITH_AS(load_run_config(dir / "modseed.json"),
                       doctest::Contains("derived"), std::invalid_argument);

  CHECK_THROWS_AS(load_run_config(dir / "absent.json"), std::runtime_error);

  RunConfig bad = cfg;
  bad.tau2 = 1.5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.metrics_n = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.grid_prompts = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("seed override comes from the environment") {
  unsetenv("REDTEAM_SEED");
  CHECK_FALSE(redteam_seed_override().has_value());

  setenv("REDTEAM_SEED", "12345", 1);
  REQUIRE(redteam_seed_override().has_value());
  CHECK(*redteam_seed_override() == 12345);

  setenv("REDTEAM_SEED", "not-a-number", 1);
  CHECK_THROWS_AS(redteam_seed_override(), std::invalid_argument);

  unsetenv("REDTEAM_SEED");
}

TEST_CASE("verify suites run standalone and serialize") {
  const std::vector<VerifySuite> suites = run_verify_suites("discretization", 7);
  REQUIRE(suites.size() == 1);
  CHECK(suites[0].name == "discretization");
  CHECK(suites[0].pass());
  for (const auto& c : suites[0].checks) {
    CHECK(!c.name.empty());
    CHECK(c.pass);
  }

  const fs::path dir = fresh_dir("verify");
  write_verify_json(suites, dir / "verify.json");
  std::ifstream in(dir / "verify.json");
  nlohmann::json j;
  in >> j;
  REQUIRE(j.contains("suites"));
  CHECK(j["suites"][0]["name"] == "discretization");
  CHECK(j["suites"][0]["checks"].size() == suites[0].checks.size());

  CHECK_THROWS_AS(run_verify_suites("astrology", 7), std::invalid_argument);
}

TEST_CASE("cli pipeline produces a deterministic, checksummed run") {
  const fs::path a = fresh_dir("pipe-a");
  const fs::path b = fresh_dir("pipe-b");

  for (const fs::path& dir : {a, b}) {
    const std::string corpus = (dir / "corpus").string();
    REQUIRE(run_cli("calibrate-env --out " + dir.string() + " --seed 5") == 0);
    REQUIRE(run_cli("fit-anchors --embeddings " + corpus +
                    "/embeddings.txt --prompt " + corpus +
                    "/prompt.txt --blocklist " + corpus +
                    "/blocklist.txt --out " + dir.string() +
                    " --seed 5 --steps 200") == 0);
    REQUIRE(run_cli("attack --embeddings " + corpus +
                    "/embeddings.txt --blocklist " + corpus +
                    "/blocklist.txt --env-config " + (dir / "env.json").string() +
                    " --out " + dir.string() + " --seed 5 --iterations 5") == 0);
    REQUIRE(run_cli("report --trace " + (dir / "trace.jsonl").string() +
                    " --out " + dir.string() + " --seed 5") == 0);
  }

  // env.json is excluded: it records the absolute corpus paths, which differ
  // between the two output directories by construction.
  for (const char* name :
       {"calibration.json", "n_t.anchor", "n_c.anchor", "trace.jsonl",
        "report.csv", "report.json"}) {
    CHECK(file_bytes(a / name) == file_bytes(b / name));
  }

  // Manifests exist for every command and label their outputs.
  for (const char* m : {"calibrate-env-manifest.json", "fit-anchors-manifest.json",
                        "attack-manifest.json", "report-manifest.json"}) {
    std::ifstream in(a / m);
    REQUIRE(in.good());
    nlohmann::json j;
    in >> j;
    CHECK(j.contains("command"));
    CHECK(j.contains("seed"));
    CHECK(j.contains("outputs"));
  }

  // policy.json carries the learned weight inside [0.01, 0.99].
  std::ifstream pol(a / "policy.json");
  REQUIRE(pol.good());
  nlohmann::json pj;
  pol >> pj;
  const double alpha = pj.at("alpha").get<double>();
  CHECK(alpha >= 0.01);
  CHECK(alpha <= 0.99);
  CHECK(pj.at("iterations").get<int>() == 5);
}

TEST_CASE("cli grid command writes one row per alpha plus the trained row") {
  const fs::path dir = fresh_dir("grid");
  const std::string corpus = (dir / "corpus").string();
  REQUIRE(run_cli("calibrate-env --out " + dir.string() + " --seed 6") == 0);
  REQUIRE(run_cli("fit-anchors --embeddings " + corpus +
                  "/embeddings.txt --prompt " + corpus +
                  "/prompt.txt --blocklist " + corpus +
                  "/blocklist.txt --out " + dir.string() +
                  " --seed 6 --steps 200") == 0);
  REQUIRE(run_cli("grid-alpha --embeddings " + corpus +
                  "/embeddings.txt --blocklist " + corpus +
                  "/blocklist.txt --env-config " + (dir / "env.json").string() +
                  " --out " + dir.string() +
                  " --seed 6 --grid 0:1:0.5 --grid-prompts 40 --iterations 5") ==
          0);
  // header + three grid rows + trained row
  CHECK(count_lines(dir / "grid.csv") == 5);
}

TEST_CASE("cli maps input errors to exit code 2") {
  const fs::path dir = fresh_dir("errors");
  CHECK(run_cli("fit-anchors --embeddings /nonexistent/e.txt --prompt x "
                "--blocklist y --out " +
                dir.string()) == 2);
  CHECK(run_cli("report --trace " + (dir / "missing.jsonl").string() +
                " --out " + dir.string()) == 2);
  CHECK(run_cli("definitely-not-a-command") == 2);
  CHECK(run_cli("attack --out " + dir.string()) == 2);  // no env config yet
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("verify --suite astrology --out " + dir.string()) == 2);
}

TEST_CASE("environment seed override beats the flag") {
  const fs::path flagged = fresh_dir("seed-flag");
  const fs::path forced = fresh_dir("seed-env");
  const fs::path plain = fresh_dir("seed-plain");

  REQUIRE(run_cli("calibrate-env --out " + flagged.string() + " --seed 99") ==
          0);
  // Same command asking for seed 1, but REDTEAM_SEED pins 99.
  REQUIRE(run_cli("calibrate-env --out " + forced.string() + " --seed 1",
                  "REDTEAM_SEED=99 ") == 0);
  // calibration.json is byte-identical iff the effective seed matched; the
  // plain seed-1 run guards against the comparison passing vacuously.
  REQUIRE(run_cli("calibrate-env --out " + plain.string() + " --seed 1") == 0);
  CHECK(file_bytes(flagged / "calibration.json") ==
        file_bytes(forced / "calibration.json"));
  CHECK(file_bytes(flagged / "calibration.json") !=
        file_bytes(plain / "calibration.json"));

  CHECK(run_cli("calibrate-env --out " + forced.string(),
                "REDTEAM_SEED=banana ") == 2);
}

TEST_CASE("empty trace reports exit with an input error") {
  const fs::path dir = fresh_dir("empty-trace");
  { std::ofstream out(dir / "trace.jsonl"); }
  CHECK(run_cli("report --trace " + (dir / "trace.jsonl").string() + " --out " +
                dir.string()) == 2);
}

}  // TEST_SUITE
