// redmix command line. A JSON config (--config) seeds the run options;
// explicit flags win over the config, and the REDTEAM_SEED environment
// variable wins over both. Exit codes: 0 success, 1 verification or
// calibration failure, 2 input/configuration error.
#include <cstdint>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "redmix/orchestration.hpp"

namespace {

struct Flags {
  std::string config;
  std::string embeddings, prompt, blocklist, env_config, out_dir;
  std::uint64_t seed = 0;
  int steps = 0;
  double learning_rate = 0.0;
  int fit_batch = 0;
  double sigma_init = 0.0;
  double mu_noise = 0.0;
  double eta = 0.0;
  int batch = 0;
  int iterations = 0;
  double eps_clamp = 0.0;
  double alpha_init = 0.0;
  double lambda = 0.0;
  int metrics_n = 0;
  double tau2 = 0.0;
  std::string grid;
  int grid_prompts = 0;
  std::string trace;
  std::string suite = "all";
};

void add_run_options(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "JSON run configuration");
  sub->add_option("--embeddings", f.embeddings, "embedding table file");
  sub->add_option("--prompt", f.prompt, "target prompt file");
  sub->add_option("--blocklist", f.blocklist, "blocklist file");
  sub->add_option("--env-config", f.env_config, "calibrated environment JSON");
  sub->add_option("--out", f.out_dir, "output directory");
  sub->add_option("--seed", f.seed, "global seed (REDTEAM_SEED overrides)");
  sub->add_option("--steps", f.steps, "anchor fit SGD steps");
  sub->add_option("--lr", f.learning_rate, "anchor fit learning rate");
  sub->add_option("--fit-batch", f.fit_batch, "anchor fit batch size");
  sub->add_option("--sigma-init", f.sigma_init, "initial anchor sigma");
  sub->add_option("--mu-noise", f.mu_noise, "anchor mu init noise");
  sub->add_option("--eta", f.eta, "mixing-weight step size");
  sub->add_option("--batch", f.batch, "samples per optimization iteration");
  sub->add_option("--iterations", f.iterations, "optimization iterations");
  sub->add_option("--eps-clamp", f.eps_clamp, "alpha clamp margin");
  sub->add_option("--alpha-init", f.alpha_init, "initial mixing weight");
  sub->add_option("--lambda", f.lambda,
                  "entropy weight (negative = derive from anchors)");
  sub->add_option("--n", f.metrics_n, "N for IASR-N / ASR-N");
  sub->add_option("--tau2", f.tau2, "score threshold for image success");
  sub->add_option("--grid", f.grid, "alpha grid, a:b:step");
  sub->add_option("--grid-prompts", f.grid_prompts, "prompts per grid row");
}

redmix::RunConfig merge_config(const CLI::App* sub, const Flags& f) {
  redmix::RunConfig cfg;
  if (!f.config.empty()) cfg = redmix::load_run_config(f.config);

  const auto given = [sub](const std::string& name) {
    return sub->count(name) > 0;
  };
  if (given("--embeddings")) cfg.embeddings = f.embeddings;
  if (given("--prompt")) cfg.prompt = f.prompt;
  if (given("--blocklist")) cfg.blocklist = f.blocklist;
  if (given("--env-config")) cfg.env_config = f.env_config;
  if (given("--out")) cfg.out_dir = f.out_dir;
  if (given("--seed")) cfg.seed = f.seed;
  if (given("--steps")) cfg.fit.steps = f.steps;
  if (given("--lr")) cfg.fit.learning_rate = f.learning_rate;
  if (given("--fit-batch")) cfg.fit.batch = f.fit_batch;
  if (given("--sigma-init")) cfg.fit.sigma_init = f.sigma_init;
  if (given("--mu-noise")) cfg.fit.mu_noise = f.mu_noise;
  if (given("--eta")) cfg.optimizer.eta = f.eta;
  if (given("--batch")) cfg.optimizer.batch = f.batch;
  if (given("--iterations")) cfg.optimizer.iterations = f.iterations;
  if (given("--eps-clamp")) cfg.optimizer.eps_clamp = f.eps_clamp;
  if (given("--alpha-init")) cfg.optimizer.alpha_init = f.alpha_init;
  if (given("--lambda")) cfg.entropy_weight = f.lambda;
  if (given("--n")) cfg.metrics_n = f.metrics_n;
  if (given("--tau2")) cfg.tau2 = f.tau2;
  if (given("--grid")) cfg.grid = f.grid;
  if (given("--grid-prompts")) cfg.grid_prompts = f.grid_prompts;

  if (const auto s = redmix::redteam_seed_override()) cfg.seed = *s;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"redmix: relaxed prompt-distribution red-teaming toolkit"};
  app.require_subcommand(1);
  app.footer("Environment: REDTEAM_SEED overrides the configured seed.");

  Flags flags;
  CLI::App* fit = app.add_subcommand("fit-anchors",
                                     "fit the anchor pair from a corpus");
  CLI::App* attack = app.add_subcommand(
      "attack", "optimize the mixing weight against the toy environment");
  CLI::App* grid = app.add_subcommand(
      "grid-alpha", "fixed-alpha ablation grid plus the trained policy");
  CLI::App* report = app.add_subcommand("report",
                                        "metrics from an attack trace");
  CLI::App* verify = app.add_subcommand("verify",
                                        "run the verification suites");
  CLI::App* calibrate = app.add_subcommand(
      "calibrate-env", "calibrate the toy environment to a corpus");
  for (CLI::App* sub : {fit, attack, grid, report, verify, calibrate}) {
    add_run_options(sub, flags);
  }
  report->add_option("--trace", flags.trace,
                     "trace file (default: <out>/trace.jsonl)");
  verify->add_option(
      "--suite", flags.suite,
      "all | jensen | covariance | bound | discretization");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // bad usage is a configuration error
  }

  try {
    const CLI::App* sub = app.get_subcommands().front();
    const redmix::RunConfig cfg = merge_config(sub, flags);
    const std::string& name = sub->get_name();
    if (name == "fit-anchors") return redmix::cmd_fit_anchors(cfg);
    if (name == "attack") return redmix::cmd_attack(cfg);
    if (name == "grid-alpha") return redmix::cmd_grid_alpha(cfg);
    if (name == "report") return redmix::cmd_report(cfg, flags.trace);
    if (name == "verify") return redmix::cmd_verify(cfg, flags.suite);
    if (name == "calibrate-env") return redmix::cmd_calibrate_env(cfg);
    std::cerr << "error: unknown command " << name << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
