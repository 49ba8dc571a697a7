#include "kbo/solvers.hpp"

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <stdexcept>

namespace kbo {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

}  // namespace

double power_iteration_lambda_max(const CurvatureOperator& op, double lambda,
                                  int steps) {
  Rng rng(0x9e3779b9u);
  Vec v(op.dim());
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.normal();
  v.normalize();
  double est = 0.0;
  for (int s = 0; s < steps; ++s) {
    Vec w = op.apply(v) + lambda * v;
    est = w.norm();
    if (est == 0.0) return 0.0;
    v = w / est;
  }
  return est;
}

SolverSpec SolverSpec::exact(double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("SolverSpec: lambda must be >= 0");
  SolverSpec s;
  s.kind = SolverKind::Exact;
  s.lambda = lambda;
  return s;
}

SolverSpec SolverSpec::cg(int iters, double tol, double lambda) {
  if (iters < 1) throw std::invalid_argument("SolverSpec: CG iters must be >= 1");
  if (tol <= 0.0) throw std::invalid_argument("SolverSpec: CG tol must be > 0");
  if (lambda < 0.0) throw std::invalid_argument("SolverSpec: lambda must be >= 0");
  SolverSpec s;
  s.kind = SolverKind::Cg;
  s.cg_iters = iters;
  s.cg_tol = tol;
  s.lambda = lambda;
  return s;
}

SolverSpec SolverSpec::neumann(int terms, std::optional<double> eta, double lambda) {
  if (terms < 0) throw std::invalid_argument("SolverSpec: Neumann K must be >= 0");
  if (eta && *eta <= 0.0)
    throw std::invalid_argument("SolverSpec: Neumann eta must be > 0");
  if (lambda < 0.0) throw std::invalid_argument("SolverSpec: lambda must be >= 0");
  SolverSpec s;
  s.kind = SolverKind::Neumann;
  s.neumann_terms = terms;
  s.eta = eta;
  s.lambda = lambda;
  return s;
}

SolverSpec SolverSpec::identity() {
  SolverSpec s;
  s.kind = SolverKind::Identity;
  return s;
}

SolverSpec SolverSpec::ikvp(double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("SolverSpec: lambda must be >= 0");
  SolverSpec s;
  s.kind = SolverKind::Ikvp;
  s.lambda = lambda;
  return s;
}

SolverSpec SolverSpec::ekfac(double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("SolverSpec: lambda must be >= 0");
  SolverSpec s;
  s.kind = SolverKind::Ekfac;
  s.lambda = lambda;
  return s;
}

std::string SolverSpec::label() const {
  switch (kind) {
    case SolverKind::Exact:
      return "exact";
    case SolverKind::Cg:
      return "cg-" + std::to_string(cg_iters);
    case SolverKind::Neumann:
      return "neu-" + std::to_string(neumann_terms);
    case SolverKind::Identity:
      return "identity";
    case SolverKind::Ikvp:
      return "kfac";
    case SolverKind::Ekfac:
      return "ekfac";
  }
  return "?";
}

Vec exact_solve(const Mat& dense, const Vec& b, double lambda) {
  if (dense.rows() != dense.cols())
    throw std::invalid_argument("exact_solve: matrix not square");
  if (dense.rows() > 5000)
    throw std::invalid_argument("exact_solve: d exceeds desk-scale cap 5000");
  if (b.size() != dense.rows())
    throw std::invalid_argument("exact_solve: rhs dimension mismatch");
  Mat a = dense + lambda * Mat::Identity(dense.rows(), dense.cols());
  Eigen::LDLT<Mat> ldlt(a);
  Vec v = ldlt.solve(b);
  v += ldlt.solve(b - a * v);  // one refinement step
  if (!v.allFinite())
    throw std::runtime_error("exact_solve: singular system (non-finite solve)");
  return v;
}

SolveReport cg_solve(const CurvatureOperator& op, const Vec& b, int iters,
                     double tol, double lambda) {
  if (iters < 1) throw std::invalid_argument("cg_solve: T must be >= 1");
  if (b.size() != op.dim())
    throw std::invalid_argument("cg_solve: rhs dimension mismatch");
  const auto t0 = Clock::now();
  const double bnorm = b.norm();

  Vec x = Vec::Zero(b.size());
  Vec r = b;
  Vec p = r;
  double rs = r.squaredNorm();
  int used = 0;
  for (int t = 0; t < iters; ++t) {
    if (std::sqrt(rs) <= tol * bnorm) break;
    Vec ap = op.apply(p) + lambda * p;
    const double denom = p.dot(ap);
    const double alpha = rs / denom;
    if (!std::isfinite(alpha))
      throw std::runtime_error("cg_solve: non-finite iterate at iteration " +
                               std::to_string(t) + " (indefinite operator?)");
    x += alpha * p;
    r -= alpha * ap;
    ++used;
    const double rs_new = r.squaredNorm();
    p = r + (rs_new / rs) * p;
    rs = rs_new;
  }
  SolveReport rep;
  rep.iterations_used = used;
  rep.residual_norm = (op.apply(x) + lambda * x - b).norm();
  rep.solution = std::move(x);
  rep.wall_ms = ms_since(t0);
  return rep;
}

SolveReport neumann_solve(const CurvatureOperator& op, const Vec& b, int terms,
                          std::optional<double> eta, double lambda) {
  if (terms < 0) throw std::invalid_argument("neumann_solve: K must be >= 0");
  if (b.size() != op.dim())
    throw std::invalid_argument("neumann_solve: rhs dimension mismatch");
  const auto t0 = Clock::now();

  double scale;
  if (eta) {
    scale = *eta;
    if (scale <= 0.0) throw std::invalid_argument("neumann_solve: eta must be > 0");
  } else {
    const double lmax = power_iteration_lambda_max(op, lambda, 20);
    scale = lmax > 0.0 ? 1.0 / (1.1 * lmax) : 1.0;
  }

  Vec term = b;
  Vec sum = b;
  bool warn = false;
  std::vector<double> norms;
  norms.push_back(sum.norm());
  for (int k = 0; k < terms; ++k) {
    term -= scale * (op.apply(term) + lambda * term);
    sum += term;
    norms.push_back(sum.norm());
    const std::size_t m = norms.size();
    if (m >= 6 && norms[m - 1] > 10.0 * norms[m - 6]) warn = true;
  }
  SolveReport rep;
  rep.iterations_used = terms;
  rep.divergence_warning = warn;
  Vec x = scale * sum;
  rep.residual_norm = (op.apply(x) + lambda * x - b).norm();
  rep.solution = std::move(x);
  rep.wall_ms = ms_since(t0);
  return rep;
}

Vec ikvp(const DampedKfacState& state, const Vec& v) {
  if (v.size() != state.param_dim())
    throw std::invalid_argument("ikvp: vector length does not match param layout");
  Vec out(v.size());
  Eigen::Index off = 0;
  for (std::size_t l = 0; l < state.num_layers(); ++l) {
    const auto& f = state.factors(l);
    const Eigen::Index d1 = f.b.rows();
    const Eigen::Index d2 = f.a.rows();
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                   Eigen::RowMajor>>
        vmat(v.data() + off, d1, d2);
    Mat x = state.b_chol(l).solve(Mat(vmat));       // B^-1 V
    Mat y = state.a_chol(l).solve(x.transpose());   // A^-1 V^T B^-1
    if (!y.allFinite())
      throw std::runtime_error("ikvp: factorization solve failed at layer " +
                               std::to_string(l));
    for (Eigen::Index r = 0; r < d1; ++r)
      for (Eigen::Index c = 0; c < d2; ++c) out[off + r * d2 + c] = y(c, r);
    off += d1 * d2;
  }
  return out;
}

Vec ekfac_inverse_apply(const EkfacState& state, const Vec& v, double lambda) {
  if (v.size() != state.param_dim)
    throw std::invalid_argument("ekfac_inverse_apply: dimension mismatch");
  Vec out(v.size());
  Eigen::Index off = 0;
  for (const auto& l : state.layers) {
    const Eigen::Index d1 = l.q_b.rows();
    const Eigen::Index d2 = l.q_a.rows();
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                   Eigen::RowMajor>>
        vmat(v.data() + off, d1, d2);
    Mat rot = l.q_b.transpose() * vmat * l.q_a;
    rot.array() /= (l.lambda_corr.array() + lambda);
    Mat res = l.q_b * rot * l.q_a.transpose();
    for (Eigen::Index r = 0; r < d1; ++r)
      for (Eigen::Index c = 0; c < d2; ++c) out[off + r * d2 + c] = res(r, c);
    off += d1 * d2;
  }
  return out;
}

namespace {

Mat orthonormalize(const Mat& w) {
  Eigen::HouseholderQR<Mat> qr(w);
  return qr.householderQ() * Mat::Identity(w.rows(), w.cols());
}

// Largest singular value via block power iteration on M^T M. The estimate is
// the max column norm of M V over an orthonormal block V, which lower-bounds
// the true value and converges to it; tracking the whole block (not just the
// lead vector) avoids stalls on invariant non-top directions.
double block_power_norm(const std::function<Mat(const Mat&)>& apply,
                        const std::function<Mat(const Mat&)>& apply_t, Mat& v,
                        int max_iters, double tol, double rel_tol) {
  double est = 0.0;
  for (int it = 0; it < max_iters; ++it) {
    Mat mv = apply(v);
    double val = 0.0;
    for (Eigen::Index j = 0; j < mv.cols(); ++j)
      val = std::max(val, mv.col(j).norm());
    Mat w = apply_t(mv);
    v = orthonormalize(w);
    if (it >= 3 && std::abs(val - est) <= std::max(tol, rel_tol * val))
      return val;
    est = val;
  }
  return est;
}

Mat random_block(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Rng rng(seed);
  Mat v(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) v(i, j) = rng.normal();
  return v;
}

}  // namespace

double spectral_norm(const Mat& m, int max_iters, double tol) {
  if (m.rows() == 0 || m.cols() == 0) return 0.0;
  const Eigen::Index block = std::min<Eigen::Index>(4, m.cols());
  Mat v = orthonormalize(random_block(m.cols(), block, 0x5eed5eedULL));
  return block_power_norm([&](const Mat& x) { return Mat(m * x); },
                          [&](const Mat& x) { return Mat(m.transpose() * x); },
                          v, max_iters, tol, tol);
}

namespace {

// Spectral norm of (alpha * P - E); the block warm-starts across alpha
// evaluations inside the search, with one fresh column injected per call so
// stale invariant subspaces cannot trap it.
class ScaledDiffNorm {
 public:
  ScaledDiffNorm(const Mat& p, const Mat& e)
      : p_(p),
        e_(e),
        block_(std::min<Eigen::Index>(4, p.cols())),
        rng_(0xd1a60516ULL),
        v_(orthonormalize(random_block(p.cols(), block_, 0xd1a60516ULL))) {}

  double operator()(double alpha) {
    for (Eigen::Index i = 0; i < v_.rows(); ++i)
      v_(i, block_ - 1) = rng_.normal();
    v_ = orthonormalize(v_);
    // Near-degenerate top pairs converge slowly; the error bands never need
    // more than ~1e-4 relative precision, with an absolute floor for the
    // near-zero self-comparison cases.
    return block_power_norm(
        [&](const Mat& x) { return Mat(alpha * (p_ * x) - e_ * x); },
        [&](const Mat& x) {
          return Mat(alpha * (p_.transpose() * x) - e_.transpose() * x);
        },
        v_, 600, 1e-11, 1e-4);
  }

 private:
  const Mat& p_;
  const Mat& e_;
  Eigen::Index block_;
  Rng rng_;
  Mat v_;
};

}  // namespace

std::pair<double, double> relative_operator_error(const Mat& approx_inv,
                                                  const Mat& exact_inv) {
  if (approx_inv.rows() != exact_inv.rows() ||
      approx_inv.cols() != exact_inv.cols())
    throw std::invalid_argument("relative_operator_error: shape mismatch");
  if (!approx_inv.allFinite() || !exact_inv.allFinite())
    throw std::invalid_argument("relative_operator_error: non-finite matrices");

  const double norm_e = spectral_norm(exact_inv);
  const double norm_p = spectral_norm(approx_inv);
  if (norm_e == 0.0)
    throw std::invalid_argument("relative_operator_error: exact inverse is zero");
  // Center the 8-decade bracket at the natural scale so the metric is scale
  // invariant in the approximate operator.
  const double center = norm_p > 0.0 ? norm_e / norm_p : 1.0;

  ScaledDiffNorm f(approx_inv, exact_inv);
  const double phi = 0.6180339887498949;
  double lo = std::log(center * 1e-4);
  double hi = std::log(center * 1e4);
  double c = hi - phi * (hi - lo);
  double d = lo + phi * (hi - lo);
  double fc = f(std::exp(c));
  double fd = f(std::exp(d));
  // Base refinement to 1e-6 relative width; pushed to 1e-12 only when the
  // error sits near the alpha-resolution floor (self-comparisons and
  // converged solvers), where the extra digits matter.
  while (hi - lo > 1e-6 || (std::min(fc, fd) < 1e-3 * norm_e && hi - lo > 1e-12)) {
    if (fc < fd) {
      hi = d;
      d = c;
      fd = fc;
      c = hi - phi * (hi - lo);
      fc = f(std::exp(c));
    } else {
      lo = c;
      c = d;
      fc = fd;
      d = lo + phi * (hi - lo);
      fd = f(std::exp(d));
    }
  }
  const double alpha = std::exp(0.5 * (lo + hi));
  return {f(alpha) / norm_e, alpha};
}

SolveReport solve(const SolverSpec& spec, const CurvatureOperator& op,
                  const Vec& b) {
  switch (spec.kind) {
    case SolverKind::Identity: {
      const auto t0 = Clock::now();
      SolveReport rep;
      rep.solution = b;
      rep.iterations_used = 0;
      if (op.kind() != CurvatureOperator::Kind::EkfacBasis)
        rep.residual_norm = (op.apply(b) + spec.lambda * b - b).norm();
      rep.wall_ms = ms_since(t0);
      return rep;
    }
    case SolverKind::Exact: {
      const auto t0 = Clock::now();
      Mat dense;
      if (op.kind() == CurvatureOperator::Kind::Dense)
        dense = op.dense_matrix();
      else if (op.kind() == CurvatureOperator::Kind::Identity)
        dense = Mat::Identity(op.dim(), op.dim());
      else
        throw std::runtime_error("solve: Exact spec needs a dense operator");
      SolveReport rep;
      rep.solution = exact_solve(dense, b, spec.lambda);
      rep.iterations_used = 1;
      rep.residual_norm =
          (dense * rep.solution + spec.lambda * rep.solution - b).norm();
      rep.wall_ms = ms_since(t0);
      return rep;
    }
    case SolverKind::Cg:
      return cg_solve(op, b, spec.cg_iters, spec.cg_tol, spec.lambda);
    case SolverKind::Neumann:
      return neumann_solve(op, b, spec.neumann_terms, spec.eta, spec.lambda);
    case SolverKind::Ikvp: {
      if (op.kind() != CurvatureOperator::Kind::KfacBlockDiag)
        throw std::runtime_error(
            "solve: Ikvp spec requires a KFAC block-diagonal operator");
      const auto t0 = Clock::now();
      SolveReport rep;
      rep.solution = ikvp(op.kfac_state(), b);
      rep.iterations_used = 1;
      // C is implicit for IKVP; residual intentionally left NaN.
      rep.wall_ms = ms_since(t0);
      return rep;
    }
    case SolverKind::Ekfac: {
      if (op.kind() != CurvatureOperator::Kind::EkfacBasis)
        throw std::runtime_error("solve: Ekfac spec requires an EKFAC operator");
      const auto t0 = Clock::now();
      SolveReport rep;
      rep.solution = ekfac_inverse_apply(op.ekfac_state(), b, op.ekfac_lambda());
      rep.iterations_used = 1;
      rep.wall_ms = ms_since(t0);
      return rep;
    }
  }
  throw std::logic_error("solve: unknown solver kind");
}

}  // namespace kbo
