#include <CLI11.hpp>
#include <iostream>

#include "kbo/runner.hpp"

namespace {

int run_kind(kbo::ExperimentKind kind, const std::string& config_path,
             std::optional<std::uint64_t> seed, const std::string& out_dir,
             int threads) {
  kbo::ExperimentConfig cfg;
  if (!config_path.empty()) {
    cfg = kbo::parse_config(config_path);
    if (cfg.kind != kind) {
      std::cerr << "error: config kind '" << kbo::kind_name(cfg.kind)
                << "' does not match subcommand '" << kbo::kind_name(kind)
                << "'\n";
      return 1;
    }
  } else {
    // Kind-specific defaults come from the same path as file parsing.
    cfg = kbo::parse_config_text("{\"kind\":\"" + kbo::kind_name(kind) + "\"}");
  }
  if (seed) cfg.seed = *seed;
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  if (threads > 0) cfg.threads = threads;

  auto out = kbo::run_experiment(cfg);
  return out.exit_code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bilevel optimization experiments with IFT hypergradients and "
               "Kronecker-factored curvature solvers"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  int threads = 0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON experiment config");
    sub->add_option("--seed", seed, "base RNG seed (overrides config)");
    sub->add_option("--out-dir", out_dir, "output directory (overrides config)");
    sub->add_option("--threads", threads,
                    "worker cap (diagnostic cells only)");
  };

  auto* diag = app.add_subcommand(
      "diagnostic", "relative-operator-error study of inverse-curvature solvers");
  auto* hc = app.add_subcommand(
      "hyperclean", "data hypercleaning on synthetic clusters");
  auto* toy = app.add_subcommand("toy", "1-D quadratic bilevel sanity problem");
  auto* sweep = app.add_subcommand("sweep", "batch-size sweep, KFAC vs CG");
  for (auto* sub : {diag, hc, toy, sweep}) add_common(sub);

  CLI11_PARSE(app, argc, argv);

  try {
    if (diag->parsed())
      return run_kind(kbo::ExperimentKind::Diagnostic, config_path, seed, out_dir,
                      threads);
    if (hc->parsed())
      return run_kind(kbo::ExperimentKind::Hyperclean, config_path, seed, out_dir,
                      threads);
    if (toy->parsed())
      return run_kind(kbo::ExperimentKind::Toy, config_path, seed, out_dir,
                      threads);
    if (sweep->parsed())
      return run_kind(kbo::ExperimentKind::Sweep, config_path, seed, out_dir,
                      threads);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
