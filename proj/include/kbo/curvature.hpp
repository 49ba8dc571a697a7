#pragma once

#include <Eigen/Cholesky>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "kbo/nn.hpp"
#include "kbo/rng.hpp"
#include "kbo/tensor_io.hpp"

namespace kbo {

enum class KfacVariant { MonteCarlo, Empirical, Exact };

/// How the damping split parameter pi is computed. DimScaledTrace is
/// pi = sqrt(d2 Tr(A) / (d1 Tr(B))); TraceNormalized uses the average
/// eigenvalue ratio sqrt((Tr(A)/d2) / (Tr(B)/d1)).
enum class PiMode { DimScaledTrace, TraceNormalized };

/// Per-layer Kronecker factor pairs: A is the input second moment
/// (1/N) sum a a^T, B approximates the pre-activation output curvature. The
/// layer's curvature block is approximated by B (x) A under row-major vec.
struct KfacState {
  std::vector<FactorPair> layers;
  KfacVariant variant = KfacVariant::MonteCarlo;
  int mc_samples = 1;       // M (MonteCarlo) or C (Exact)
  long step_counter = 0;
  std::optional<double> ema_beta;

  std::size_t num_layers() const { return layers.size(); }
  /// Dense B (x) A for one layer (row-major vec convention).
  Mat dense_block(std::size_t l) const;
};

/// Factored-Tikhonov damped factors A + pi sqrt(l) I, B + sqrt(l)/pi I with
/// cached Cholesky factorizations.
class DampedKfacState {
 public:
  DampedKfacState() = default;

  static DampedKfacState damped(const KfacState& state, double lambda,
                                PiMode mode = PiMode::DimScaledTrace);
  /// No damping added; factors must already be positive definite.
  static DampedKfacState undamped(const KfacState& state);

  std::size_t num_layers() const { return layers_.size(); }
  const FactorPair& factors(std::size_t l) const { return layers_[l]; }
  double pi(std::size_t l) const { return pis_[l]; }
  double lambda() const { return lambda_; }

  const Eigen::LLT<Mat>& a_chol(std::size_t l) const { return a_chol_[l]; }
  const Eigen::LLT<Mat>& b_chol(std::size_t l) const { return b_chol_[l]; }

  /// Dense damped block B_d (x) A_d for one layer.
  Mat dense_block(std::size_t l) const;

  /// v -> (B_d (x) A_d) v across all layers (the damped operator itself).
  Vec apply(const Vec& v) const;

  Eigen::Index param_dim() const { return param_dim_; }

 private:
  std::vector<FactorPair> layers_;
  std::vector<double> pis_;
  std::vector<Eigen::LLT<Mat>> a_chol_;
  std::vector<Eigen::LLT<Mat>> b_chol_;
  double lambda_ = 0.0;
  Eigen::Index param_dim_ = 0;

  void finalize();
};

/// Eigenvalue-corrected state: eigenbases of the undamped factors plus the
/// per-direction second moments Lambda* (d1 x d2 per layer).
struct EkfacState {
  struct Layer {
    Mat q_a;           // d2 x d2, columns = eigenvectors of A
    Mat q_b;           // d1 x d1, columns = eigenvectors of B
    Mat lambda_corr;   // d1 x d2, >= 0
  };
  std::vector<Layer> layers;
  Eigen::Index param_dim = 0;
};

/// Abstract symmetric linear map v -> Cv consumed by the solvers.
class CurvatureOperator {
 public:
  enum class Kind { Dense, Ggn, KfacBlockDiag, EkfacBasis, Identity };

  static CurvatureOperator dense(Mat m);
  static CurvatureOperator identity(Eigen::Index dim);
  /// Matrix-free GGN of the criterion at the traced batch, plus
  /// ridge * I (exact). net/trace must outlive the operator.
  static CurvatureOperator ggn(std::shared_ptr<const Network> net,
                               std::shared_ptr<const ForwardTrace> trace,
                               Criterion criterion, double ridge = 0.0);
  static CurvatureOperator kfac(DampedKfacState state);
  static CurvatureOperator ekfac(EkfacState state, double lambda);
  static CurvatureOperator from_fn(std::function<Vec(const Vec&)> fn,
                                   Eigen::Index dim);

  Kind kind() const { return kind_; }
  Eigen::Index dim() const { return dim_; }

  Vec apply(const Vec& v) const;

  const Mat& dense_matrix() const;
  const DampedKfacState& kfac_state() const;
  const EkfacState& ekfac_state() const;
  double ekfac_lambda() const { return ekfac_lambda_; }

 private:
  Kind kind_ = Kind::Identity;
  Eigen::Index dim_ = 0;
  Mat dense_;
  std::function<Vec(const Vec&)> fn_;
  std::shared_ptr<const DampedKfacState> kfac_;
  std::shared_ptr<const EkfacState> ekfac_;
  double ekfac_lambda_ = 0.0;
};

// ---- factor estimation ----

/// Monte-Carlo KFAC: pseudo-targets sampled from the criterion's predictive
/// distribution, M samples per example; per-example weights enter as
/// sqrt(sigma_n) on the pseudo-gradient.
KfacState estimate_kfac_mc(const Network& net, const ForwardTrace& trace,
                           const Criterion& criterion, int mc_samples, Rng& rng);

/// Deterministic variant of the MC estimator that enumerates all C
/// pseudo-labels with their probabilities (cross-entropy) or uses the exact
/// Gaussian second moment (square loss). Accumulates identically to
/// estimate_kfac_exact, hence bitwise equal B factors.
KfacState estimate_kfac_mc_enumerated(const Network& net,
                                      const ForwardTrace& trace,
                                      const Criterion& criterion);

/// Empirical variant: B from the per-example pre-activation gradients of the
/// true loss (no extra backward pass).
KfacState estimate_kfac_emp(const Network& net, const ForwardTrace& trace,
                            const GradientBundle& grads);

/// Exact variant via the symmetric factorization of the criterion Hessian
/// (C backpropagations per example; C <= 32 enforced).
KfacState estimate_kfac_exact(const Network& net, const ForwardTrace& trace,
                              const Criterion& criterion);

/// Heuristic factored Tikhonov damping (lambda > 0). pi falls back to 1 when
/// Tr(B) vanishes.
DampedKfacState apply_damping(const KfacState& state, double lambda,
                              PiMode mode = PiMode::DimScaledTrace);

/// Convex combination beta * old + (1 - beta) * fresh, 0 <= beta < 1.
KfacState ema_update(const KfacState& state, const KfacState& fresh, double beta);

/// Eigenvalue correction in the joint eigenbasis of the undamped factors,
/// second moments estimated with the same pseudo-gradient sampling as the MC
/// variant.
EkfacState ekfac_correct(const KfacState& state, const Network& net,
                         const ForwardTrace& trace, const Criterion& criterion,
                         int mc_samples, Rng& rng);

// ---- dense oracles and matrix-vector products ----

/// Exact dense GGN (1/N) sum J^T (d2c) J over the full flat parameter space,
/// including cross-layer blocks. Desk scale only (d <= 5000).
Mat dense_ggn(const Network& net, const ForwardTrace& trace,
              const Criterion& criterion);

/// G v without materializing G: linearized forward, output-Hessian multiply,
/// backward pullback.
Vec ggn_vector_product(const Network& net, const ForwardTrace& trace,
                       const Criterion& criterion, const Vec& v);

/// Central-difference Hessian-vector product of a gradient map.
Vec hvp_finite_difference(const std::function<Vec(const Vec&)>& grad_fn,
                          const Vec& theta, const Vec& v, double h);

// ---- helpers ----

/// Exact symmetric-factor columns s_i for one example's criterion Hessian,
/// scaled so (1/C) sum_i s_i s_i^T = d2c (weight folded in as sqrt(sigma)).
/// Returned matrix is C x C with columns s_i.
Mat exact_pseudo_columns(LossKind kind, const Vec& output_row, double weight);

/// One sampled pseudo-gradient s for one example (sqrt(sigma)-scaled).
Vec sample_pseudo_gradient(LossKind kind, const Vec& output_row, double weight,
                           Rng& rng);

/// Kronecker product (row-major vec convention pairs B (x) A with
/// vec(V) = rows of V stacked).
Mat kronecker(const Mat& x, const Mat& y);

/// Write per-layer factors to the binary "KFAC" container.
void dump_factors(const KfacState& state, const std::string& path);

}  // namespace kbo
