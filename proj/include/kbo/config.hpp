#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kbo/curvature.hpp"
#include "kbo/solvers.hpp"

namespace kbo {

enum class ExperimentKind { Diagnostic, Hyperclean, Toy, Sweep };

std::string kind_name(ExperimentKind k);
ExperimentKind kind_from_name(const std::string& name);

struct TaskConfig {
  // diagnostic
  std::vector<int> dims{10, 100, 500};
  int n = 100;
  double lambda = 1e-5;
  int num_seeds = 5;
  std::vector<std::string> methods{"kfac",  "neu-3", "neu-20", "neu-50",
                                   "cg-3",  "cg-5",  "cg-10",  "identity"};
  int mc_samples = 1;
  std::string pi_mode = "trace-normalized";  // or "dim-scaled-trace"

  // hyperclean / sweep
  int n_train = 300;
  int n_val = 150;
  int n_test = 2000;
  int classes = 3;
  int input_dim = 24;
  double separation = 2.6;
  double noise_ratio = 0.5;
  int scale_groups = 6;
  double scale_decay = 3.0;
  double alpha_reg = 1e-3;
  int batch_size = 0;
  bool curvature_full_batch = false;
  std::vector<int> batch_sizes{16, 64, 0};  // sweep; 0 = full batch

  // toy
  double lambda0 = 2.0;

  bool operator==(const TaskConfig&) const = default;
};

struct SolverConfig {
  std::string kind = "kfac";  // exact | cg | neumann | identity | kfac | ekfac
  int t = 3;
  int k = 3;
  double eta = 0.0;  // 0 = auto scale
  double lambda = 1e-3;
  double tol = 1e-10;

  SolverSpec to_spec() const;

  bool operator==(const SolverConfig&) const = default;
};

struct OuterConfig {
  int iters = 300;
  int inner_steps = 10;
  double inner_lr = 0.25;
  double inner_momentum = 0.9;
  double outer_lr = 1000.0;
  double outer_momentum = 0.9;
  int tau = 1;
  double ema_beta = 0.0;

  bool operator==(const OuterConfig&) const = default;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::Diagnostic;
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  int threads = 1;
  int format_version = 1;
  TaskConfig task;
  SolverConfig solver;
  OuterConfig outer;

  PiMode pi_mode() const;
  /// Serialize the effective config (all defaults filled).
  std::string to_json() const;

  bool operator==(const ExperimentConfig&) const = default;
};

/// Strict parse: unknown keys rejected, every range violation names the key
/// and constraint.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config(const std::string& path);

/// FNV-1a hash of the effective config serialization.
std::uint64_t config_hash(const ExperimentConfig& cfg);

}  // namespace kbo
