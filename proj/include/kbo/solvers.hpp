#pragma once

#include <optional>
#include <string>

#include "kbo/curvature.hpp"

namespace kbo {

enum class SolverKind { Exact, Cg, Neumann, Identity, Ikvp, Ekfac };

/// Which approximate inverse to use for Cv = b and its budget knobs.
struct SolverSpec {
  SolverKind kind = SolverKind::Identity;
  int cg_iters = 10;                 // T >= 1
  double cg_tol = 1e-10;             // > 0
  int neumann_terms = 0;             // K >= 0
  std::optional<double> eta;         // Neumann scale; nullopt = 1/(1.1 lmax)
  double lambda = 0.0;               // damping >= 0

  static SolverSpec exact(double lambda);
  static SolverSpec cg(int iters, double tol, double lambda);
  static SolverSpec neumann(int terms, std::optional<double> eta, double lambda);
  static SolverSpec identity();
  static SolverSpec ikvp(double lambda);
  static SolverSpec ekfac(double lambda);

  std::string label() const;  // e.g. "cg-10", "neu-3", "kfac"
};

struct SolveReport {
  Vec solution;
  int iterations_used = 0;
  double residual_norm = std::numeric_limits<double>::quiet_NaN();
  double wall_ms = 0.0;
  bool divergence_warning = false;
};

/// Direct solve of (dense + lambda I) v = b with one step of iterative
/// refinement.
Vec exact_solve(const Mat& dense, const Vec& b, double lambda);

/// Plain conjugate gradient on (op + lambda I) v = b from v0 = 0; stops at
/// `iters` iterations or residual <= tol * |b|.
SolveReport cg_solve(const CurvatureOperator& op, const Vec& b, int iters,
                     double tol, double lambda);

/// Truncated scaled Neumann series
/// v = eta sum_{k=0}^{K} (I - eta (op + lambda I))^k b. With eta unset the
/// scale is 1/(1.1 lambda_max), lambda_max from 20 power-iteration steps.
SolveReport neumann_solve(const CurvatureOperator& op, const Vec& b, int terms,
                          std::optional<double> eta, double lambda);

/// Inverse KFAC-vector product: per layer vec(B^-1 V A^-1) on the damped
/// factors (cached Cholesky).
Vec ikvp(const DampedKfacState& state, const Vec& v);

/// EKFAC inverse: elementwise (Lambda* + lambda)^-1 in the joint eigenbasis.
Vec ekfac_inverse_apply(const EkfacState& state, const Vec& v, double lambda);

/// Spectral norm (largest singular value) by block power iteration on M^T M.
/// Deterministic: fixed internal start block.
double spectral_norm(const Mat& m, int max_iters = 600, double tol = 1e-10);

/// Largest eigenvalue estimate of (op + lambda I) from a fixed number of
/// power-iteration steps (deterministic seeded start).
double power_iteration_lambda_max(const CurvatureOperator& op, double lambda,
                                  int steps);

/// min_alpha |alpha P - E|_2 / |E|_2 with alpha golden-sectioned over
/// log-space, bracket [1e-4, 1e4] centered at the norm-ratio scale so the
/// metric is exactly scale invariant. Returns (error, alpha*).
std::pair<double, double> relative_operator_error(const Mat& approx_inv,
                                                  const Mat& exact_inv);

/// Uniform dispatch. The operator kind must match the spec kind
/// (Ikvp needs a KFAC block operator, Ekfac an EKFAC one, Exact a dense or
/// identity one).
SolveReport solve(const SolverSpec& spec, const CurvatureOperator& op,
                  const Vec& b);

}  // namespace kbo
