#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "kbo/curvature.hpp"
#include "kbo/solvers.hpp"

namespace kbo {

/// One bilevel problem instance: inner/outer objectives with gradient
/// access, the mixed-derivative vector product, and recipes to build a
/// curvature operator at (lambda, theta).
struct BilevelTask {
  Eigen::Index outer_dim = 0;  // m
  Eigen::Index inner_dim = 0;  // d

  std::function<double(const Vec&, const Vec&)> inner_loss;
  std::function<Vec(const Vec&, const Vec&)> inner_grad;
  std::function<double(const Vec&, const Vec&)> outer_loss;
  std::function<Vec(const Vec&, const Vec&)> outer_grad_lambda;  // d1 J_out
  std::function<Vec(const Vec&, const Vec&)> outer_grad_theta;   // d2 J_out
  /// v (R^d) -> d^2_{12} J_in v (R^m); linear in v.
  std::function<Vec(const Vec&, const Vec&, const Vec&)> cross_dvp;
  /// Exact inner Hessian-vector product (used by the unrolled oracle).
  std::function<Vec(const Vec&, const Vec&, const Vec&)> inner_hvp;

  /// Matrix-free curvature (GGN closure etc.) for CG/Neumann/Identity.
  std::function<CurvatureOperator(const Vec&, const Vec&)> make_operator;
  /// Dense curvature for the Exact solver (desk scale).
  std::function<Mat(const Vec&, const Vec&)> make_dense;
  /// KFAC factors at (lambda, theta) for Ikvp/Ekfac solvers.
  std::function<KfacState(const Vec&, const Vec&, Rng&)> make_kfac;
  /// EKFAC correction on top of a factor state.
  std::function<EkfacState(const KfacState&, const Vec&, const Vec&, Rng&)>
      make_ekfac;

  /// Exact identity shift inside the true curvature (e.g. 2*alpha from an L2
  /// term). Matrix-free operators already include it; the factored KFAC route
  /// folds it into the damping.
  double curvature_ridge = 0.0;
  PiMode pi_mode = PiMode::TraceNormalized;
  /// Clamp lambda to [0,1] after each outer step (hypercleaning).
  bool clip_lambda_unit = false;

  std::function<double(const Vec&, const Vec&)> test_metric;  // optional
};

struct HypergradientResult {
  Vec grad;           // = direct_term - implicit_term
  Vec direct_term;    // d1 J_out
  Vec implicit_term;  // d^2_{12} J_in v
  SolveReport solver_report;
};

struct OuterLoopConfig {
  int outer_iters = 100;
  int inner_steps = 10;
  double inner_lr = 0.1;
  double inner_momentum = 0.0;
  double outer_lr = 1.0;
  double outer_momentum = 0.0;
  SolverSpec solver;
  int refresh_interval = 1;   // tau >= 1, KFAC/EKFAC factor refresh cadence
  double ema_beta = 0.0;      // 0 = no EMA
  bool warm_start = true;     // keep theta across outer iterations
  std::uint64_t seed = 0;
};

struct OuterRecord {
  int outer_iter = 0;
  double outer_loss = 0.0;
  double test_metric = std::numeric_limits<double>::quiet_NaN();
  double hypergrad_norm = 0.0;
  double solver_residual = std::numeric_limits<double>::quiet_NaN();
  int solver_iters = 0;
  double elapsed_ms = 0.0;
  std::optional<std::string> error;
};

struct InnerResult {
  Vec theta;
  int steps_done = 0;
  std::optional<std::string> error;  // set when aborted on non-finite loss
};

/// IFT hypergradient at (lambda, theta): solve the curvature system for
/// v = C^-1 d2 J_out, then grad = d1 J_out - d12 J_in v. The rng feeds the
/// KFAC pseudo-gradient sampling when the solver needs factors.
HypergradientResult ift_hypergradient(const BilevelTask& task, const Vec& lambda,
                                      const Vec& theta, const SolverSpec& spec,
                                      Rng& rng);

/// T-step unrolled hypergradient from theta0 (independent of lambda) with
/// plain gradient-descent inner steps of size eta. T = 0 returns d1 J_out.
Vec unrolled_hypergradient(const BilevelTask& task, const Vec& lambda,
                           const Vec& theta0, int steps, double eta,
                           int iterate_cap = 10000);

/// SGD with momentum on the inner objective:
///   velocity = momentum * velocity - lr * grad; theta += velocity.
InnerResult run_inner(const BilevelTask& task, const Vec& lambda,
                      const Vec& theta0, int steps, double lr, double momentum);

struct OuterLoopResult {
  std::vector<OuterRecord> history;  // one record per completed iteration
  Vec lambda;
  Vec theta;
};

/// Alternating double loop: inner SGD, IFT hypergradient, outer SGD with
/// momentum; KFAC factors refreshed every `refresh_interval` outer steps with
/// optional EMA. History truncates at the first fatal error. The callback may
/// return false to abort.
OuterLoopResult outer_loop(
    const BilevelTask& task, Vec lambda, Vec theta, const OuterLoopConfig& cfg,
    const std::function<bool(const OuterRecord&)>& callback = {});

/// Elementwise clamp to [0,1].
Vec clip_weights(const Vec& lambda);
/// Subgradient of the clamp: 1 on the closed interval [0,1], 0 outside.
Vec clip_subgradient(const Vec& lambda);

}  // namespace kbo
