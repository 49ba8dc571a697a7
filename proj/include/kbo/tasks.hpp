#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "kbo/bilevel.hpp"

namespace kbo {

/// Linear regression with Gaussian design: X is d x N, H = (1/N) X X^T.
struct LinRegProblem {
  Mat x;           // d x N
  Vec y;           // N
  std::uint64_t seed = 0;

  Mat hessian() const;  // (1/N) X X^T, assembled exactly
};

LinRegProblem gen_linreg(int d, int n, std::uint64_t seed);

/// One diagnostic cell: relative operator error of a method's dense
/// approximate inverse against (H + lambda I)^{-1}.
struct DiagnosticRecord {
  std::string method;
  int d = 0;
  std::uint64_t seed = 0;
  double rel_error = 0.0;
  double alpha_star = 1.0;
  double wall_ms = 0.0;
  int mc_samples = 0;     // M behind the KFAC estimate (0 for others)
  long sample_count = 0;  // N * M pseudo-gradient draws (auditability)
};

struct DiagnosticOptions {
  std::vector<int> dims{10, 100, 500};
  int n = 100;
  double lambda = 1e-5;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  // exact | identity | neu-K | cg-T | kfac | kfac-exact
  std::vector<std::string> methods{"kfac",  "neu-3", "neu-20", "neu-50",
                                   "cg-3",  "cg-5",  "cg-10",  "identity"};
  int mc_samples = 1;
  PiMode pi_mode = PiMode::TraceNormalized;
  int threads = 1;
};

/// Runs every (method, d, seed) cell; rows sorted by (method, d, seed).
std::vector<DiagnosticRecord> diagnostic_study(const DiagnosticOptions& opts);

/// Mean relative error over seeds for one (method, d).
double mean_error(const std::vector<DiagnosticRecord>& records,
                  const std::string& method, int d);

/// Synthetic classification data with an optional label-corrupted train set.
struct HypercleanDataset {
  Mat train_inputs;             // N x D (raw, no constant feature)
  IntVec train_labels;
  std::vector<std::uint8_t> corruption_mask;  // 1 where the label was flipped
  Mat val_inputs;
  IntVec val_labels;
  Mat test_inputs;
  IntVec test_labels;
  int classes = 0;
  double corruption_ratio = 0.0;
  std::uint64_t seed = 0;
};

/// Gaussian class clusters with pairwise mean distance = separation, then
/// floor(noise_ratio * N_train) train labels flipped uniformly to a wrong
/// class. With scale_groups > 1, features split into groups whose noise and
/// class-signal scales decay by scale_decay^-g, spreading the input
/// covariance spectrum over several decades while keeping the per-direction
/// signal-to-noise ratio constant.
HypercleanDataset gen_synthetic_classification(int n_train, int n_val,
                                               int n_test, int classes,
                                               int input_dim, double separation,
                                               double noise_ratio,
                                               std::uint64_t seed,
                                               int scale_groups = 1,
                                               double scale_decay = 1.0);

/// Flip floor(ratio * N) labels to a uniformly random different class.
/// Returns the new labels and the flip mask.
std::pair<IntVec, std::vector<std::uint8_t>> corrupt_labels(const IntVec& labels,
                                                            double ratio,
                                                            int classes,
                                                            Rng& rng);

void save_dataset(const HypercleanDataset& ds, const std::string& path);
HypercleanDataset load_dataset(const std::string& path);

struct HypercleanTaskOptions {
  double alpha_reg = 1e-3;
  int batch_size = 0;           // 0 = full batch
  bool curvature_full_batch = false;  // otherwise: final inner-step batch
  int mc_samples = 1;
  std::uint64_t seed = 0;       // batch stream
  PiMode pi_mode = PiMode::TraceNormalized;
};

/// Bilevel data-hypercleaning instance: inner = weighted cross-entropy over
/// the (corrupted) train set + alpha |theta|^2, outer = clean-validation
/// cross-entropy, lambda = per-example weights clipped to [0,1]. The model is
/// `net` acting on inputs with a constant-1 feature appended (net in_dim must
/// be D + 1). The returned task references `ds` internally (copied).
BilevelTask make_hyperclean_task(const HypercleanDataset& ds, const Network& net,
                                 const HypercleanTaskOptions& opts);

/// Quadratic bilevel family with closed forms, for oracles and the toy
/// experiment:
///   J_in  = 0.5 th' M th - (c + P lam)' th
///   J_out = 0.5 |th - t|^2 + 0.5 q |lam|^2
struct QuadraticBilevel {
  Mat m;  // d x d SPD
  Mat p;  // d x m
  Vec c;  // d
  Vec t;  // d
  double q = 0.0;

  BilevelTask task() const;
  Vec theta_star(const Vec& lambda) const;
  double phi(const Vec& lambda) const;
  Vec hypergrad(const Vec& lambda) const;  // closed-form grad of phi
};

/// The 1-D toy: J_in = 0.5 (th - lam)^2, J_out = 0.5 th^2, so
/// grad Phi(lam) = lam.
QuadraticBilevel make_scalar_toy();

/// ROC-AUC of `score` as a detector of mask = 1 (midrank ties).
double roc_auc(const Vec& score, const std::vector<std::uint8_t>& mask);

/// Clean-test cross-entropy of a network on a dataset split (constant
/// feature appended to inputs).
double test_cross_entropy(const Network& net, const Mat& inputs,
                          const IntVec& labels);

}  // namespace kbo
