#pragma once

#include <string>
#include <vector>

#include "kbo/config.hpp"
#include "kbo/tasks.hpp"

namespace kbo {

struct RunOutput {
  int exit_code = 0;
  std::vector<std::string> files;  // written, relative to out_dir
};

/// Execute one experiment: writes the manifest, per-iteration CSVs and the
/// summary CSV under cfg.out_dir. Progress goes to stderr. Nonzero exit code
/// on any fatal component error.
RunOutput run_experiment(const ExperimentConfig& cfg);

/// The no-reweighting baseline: identical inner training schedule with all
/// weights fixed at 1; returns the clean-test loss after each "outer"
/// iteration.
std::vector<double> hyperclean_baseline_trajectory(const BilevelTask& task,
                                                   const Vec& theta0,
                                                   const OuterConfig& outer);

/// Shared assembly used by the runner and the acceptance suite.
struct HypercleanRun {
  std::vector<OuterRecord> history;
  Vec lambda;
  double final_test_loss = 0.0;
  double min_test_loss = 0.0;
  double auc = 0.0;
  bool failed = false;
};

HypercleanRun run_hyperclean_once(const HypercleanDataset& ds,
                                  const ExperimentConfig& cfg,
                                  const SolverSpec& solver, int batch_size,
                                  double ema_beta, std::uint64_t run_seed);

/// 17-significant-digit formatting used for all CSV numerics.
std::string csv_double(double v);

}  // namespace kbo
