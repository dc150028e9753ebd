// End-to-end pipeline plumbing: the JSON run configuration, sub-seeding,
// run manifests, the verification suites and the command surface behind the
// CLI. Commands return process exit codes (0 = success, 1 = a verification
// or calibration assertion failed); input and configuration problems are
// thrown and mapped to exit code 2 by the binary.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "redmix/anchor.hpp"
#include "redmix/metrics.hpp"
#include "redmix/policy.hpp"

namespace redmix {

struct RunConfig {
  std::filesystem::path embeddings;
  std::filesystem::path prompt;
  std::filesystem::path blocklist;
  std::filesystem::path env_config;
  std::filesystem::path out_dir = "out";
  std::uint64_t seed = 0;
  FitConfig fit;
  OptimizerConfig optimizer;
  // Negative means "derive default_entropy_weight from the fitted anchors".
  double entropy_weight = -1.0;
  int metrics_n = 8;
  double tau2 = 0.5;
  std::string grid = "0:1:0.1";
  int grid_prompts = 200;

  void validate() const;
};

// Single JSON document. Unknown keys are configuration errors, including
// "seed" inside the fit/optimizer blocks: every sub-stream is derived from
// the global seed, so per-module seeds are not configurable.
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& cfg, const std::filesystem::path& path);

// REDTEAM_SEED environment variable, when set, overrides the configured
// seed. Throws std::invalid_argument on an unparseable value.
std::optional<std::uint64_t> redteam_seed_override();

// "a:b:step" (inclusive of both endpoints, step > 0) or a single number.
// Values are mixing weights and must lie in [0, 1].
std::vector<double> parse_grid_spec(const std::string& spec);

// FNV-1a over the raw file bytes.
std::uint64_t file_checksum(const std::filesystem::path& path);

struct ManifestEntry {
  std::string path;
  std::uint64_t checksum = 0;
};

struct RunManifest {
  std::string command;
  std::string version;
  std::uint64_t seed = 0;
  std::string config_json;  // snapshot sufficient to re-run the command
  std::vector<ManifestEntry> inputs;
  std::vector<ManifestEntry> outputs;
  std::string timestamp;  // informational; excluded from determinism claims
  std::string outcome;
};

void write_manifest(const RunManifest& m, const std::filesystem::path& path);

// --- verification suites -----------------------------------------------------

struct VerifyCheck {
  std::string name;
  bool pass = false;
  double measured = 0.0;
  double reference = 0.0;
  double std_error = 0.0;
  std::string detail;
};

struct VerifySuite {
  std::string name;
  std::vector<VerifyCheck> checks;

  bool pass() const;
};

// suite: all | jensen | covariance | bound | discretization. Self-contained
// on the built-in corpus; the anchor pair is fitted once and shared by the
// suites that need it.
std::vector<VerifySuite> run_verify_suites(const std::string& suite,
                                           std::uint64_t seed);

void write_verify_json(const std::vector<VerifySuite>& suites,
                       const std::filesystem::path& path);

// --- commands ------------------------------------------------------------

// Fits the anchor pair from the configured corpus and writes it to out_dir.
int cmd_fit_anchors(const RunConfig& cfg);

// Loads anchors from out_dir, runs the mixing-weight optimization against
// the configured toy environment and writes trace.jsonl plus policy.json.
// Returns 0 on completion regardless of attack success.
int cmd_attack(const RunConfig& cfg);

// Rebuilds a campaign record from a trace (out_dir/trace.jsonl when
// trace_path is empty) and writes report.csv / report.json.
int cmd_report(const RunConfig& cfg, const std::filesystem::path& trace_path);

// Evaluates the fixed-alpha grid plus the trained policy; writes grid.csv.
int cmd_grid_alpha(const RunConfig& cfg);

// Runs the verification suites; writes verify.json; 1 if any check fails.
int cmd_verify(const RunConfig& cfg, const std::string& suite);

// Calibrates the toy environment (on the built-in corpus when no embeddings
// path is configured) and writes env.json plus calibration.json; 1 if the
// calibration report fails.
int cmd_calibrate_env(const RunConfig& cfg);

}  // namespace redmix
