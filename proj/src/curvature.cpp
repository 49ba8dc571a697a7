#include "kbo/curvature.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <stdexcept>
#include <string>

namespace kbo {

namespace {

constexpr double kTraceFloor = 1e-30;

void symmetrize(Mat& m) { m = 0.5 * (m + m.transpose()).eval(); }

std::vector<FactorPair> input_covariances(const Network& net,
                                          const ForwardTrace& trace) {
  if (trace.net_version != net.version())
    throw std::runtime_error("kfac: stale trace (network mutated since forward)");
  const double n = static_cast<double>(trace.batch_size());
  std::vector<FactorPair> layers(net.num_layers());
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const Mat& a = trace.inputs[l];
    layers[l].a = (a.transpose() * a) / n;
    symmetrize(layers[l].a);
    layers[l].b = Mat::Zero(net.layer(l).out_dim(), net.layer(l).out_dim());
  }
  return layers;
}

void accumulate_pseudo_backward(const Network& net, const ForwardTrace& trace,
                                const Mat& s_batch,
                                std::vector<FactorPair>& layers) {
  GradientBundle bundle = backward(net, trace, s_batch);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Mat& g = bundle.preact_grads[l];
    layers[l].b.noalias() += g.transpose() * g;
  }
}

double example_weight(const Criterion& criterion, Eigen::Index i) {
  return criterion.per_example_weights ? (*criterion.per_example_weights)[i]
                                       : 1.0;
}

void check_weights(const Criterion& criterion, Eigen::Index n) {
  if (!criterion.per_example_weights) return;
  if (criterion.per_example_weights->size() != n)
    throw std::invalid_argument("kfac: weight vector length mismatch");
  for (Eigen::Index i = 0; i < n; ++i)
    if (!std::isfinite((*criterion.per_example_weights)[i]) ||
        (*criterion.per_example_weights)[i] < 0.0)
      throw std::invalid_argument("kfac: weights must be finite and >= 0");
}

}  // namespace

Mat kronecker(const Mat& x, const Mat& y) {
  Mat out(x.rows() * y.rows(), x.cols() * y.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    for (Eigen::Index c = 0; c < x.cols(); ++c)
      out.block(r * y.rows(), c * y.cols(), y.rows(), y.cols()) = x(r, c) * y;
  return out;
}

Mat KfacState::dense_block(std::size_t l) const {
  return kronecker(layers[l].b, layers[l].a);
}

Vec sample_pseudo_gradient(LossKind kind, const Vec& output_row, double weight,
                           Rng& rng) {
  const Eigen::Index c = output_row.size();
  Vec s(c);
  if (kind == LossKind::SquareLoss) {
    for (Eigen::Index i = 0; i < c; ++i) s[i] = rng.normal();
  } else {
    Vec p = softmax_rows(output_row.transpose()).row(0).transpose();
    std::vector<double> probs(p.data(), p.data() + c);
    const std::size_t j = rng.categorical(probs);
    s = p;
    s[static_cast<Eigen::Index>(j)] -= 1.0;
  }
  return std::sqrt(weight) * s;
}

Mat exact_pseudo_columns(LossKind kind, const Vec& output_row, double weight) {
  const Eigen::Index c = output_row.size();
  const double root_c = std::sqrt(static_cast<double>(c));
  Mat cols(c, c);
  if (kind == LossKind::SquareLoss) {
    cols = root_c * Mat::Identity(c, c);
  } else {
    Vec p = softmax_rows(output_row.transpose()).row(0).transpose();
    for (Eigen::Index j = 0; j < c; ++j) {
      Vec s = p;
      s[j] -= 1.0;
      cols.col(j) = (root_c * std::sqrt(p[j])) * s;
    }
  }
  return std::sqrt(weight) * cols;
}

KfacState estimate_kfac_mc(const Network& net, const ForwardTrace& trace,
                           const Criterion& criterion, int mc_samples,
                           Rng& rng) {
  if (mc_samples < 1)
    throw std::invalid_argument("estimate_kfac_mc: M must be >= 1");
  const Eigen::Index n = trace.batch_size();
  check_weights(criterion, n);

  auto layers = input_covariances(net, trace);
  const Eigen::Index c = net.out_dim();
  Mat s_batch(n, c);
  for (int m = 0; m < mc_samples; ++m) {
    for (Eigen::Index i = 0; i < n; ++i)
      s_batch.row(i) = sample_pseudo_gradient(criterion.kind,
                                              trace.outputs.row(i).transpose(),
                                              example_weight(criterion, i), rng)
                           .transpose();
    accumulate_pseudo_backward(net, trace, s_batch, layers);
  }
  const double scale = 1.0 / (static_cast<double>(n) * mc_samples);
  for (auto& l : layers) {
    l.b *= scale;
    symmetrize(l.b);
  }
  KfacState state;
  state.layers = std::move(layers);
  state.variant = KfacVariant::MonteCarlo;
  state.mc_samples = mc_samples;
  return state;
}

namespace {

KfacState estimate_exact_impl(const Network& net, const ForwardTrace& trace,
                              const Criterion& criterion, KfacVariant tag) {
  const Eigen::Index n = trace.batch_size();
  const Eigen::Index c = net.out_dim();
  if (c > 32)
    throw std::invalid_argument(
        "estimate_kfac_exact: C = " + std::to_string(c) + " exceeds cap 32");
  check_weights(criterion, n);

  auto layers = input_covariances(net, trace);
  Mat s_batch(n, c);
  for (Eigen::Index j = 0; j < c; ++j) {
    for (Eigen::Index i = 0; i < n; ++i) {
      Mat cols = exact_pseudo_columns(criterion.kind,
                                      trace.outputs.row(i).transpose(),
                                      example_weight(criterion, i));
      s_batch.row(i) = cols.col(j).transpose();
    }
    accumulate_pseudo_backward(net, trace, s_batch, layers);
  }
  const double scale = 1.0 / (static_cast<double>(n) * static_cast<double>(c));
  for (auto& l : layers) {
    l.b *= scale;
    symmetrize(l.b);
  }
  KfacState state;
  state.layers = std::move(layers);
  state.variant = tag;
  state.mc_samples = static_cast<int>(c);
  return state;
}

}  // namespace

KfacState estimate_kfac_exact(const Network& net, const ForwardTrace& trace,
                              const Criterion& criterion) {
  return estimate_exact_impl(net, trace, criterion, KfacVariant::Exact);
}

KfacState estimate_kfac_mc_enumerated(const Network& net,
                                      const ForwardTrace& trace,
                                      const Criterion& criterion) {
  return estimate_exact_impl(net, trace, criterion, KfacVariant::MonteCarlo);
}

KfacState estimate_kfac_emp(const Network& net, const ForwardTrace& trace,
                            const GradientBundle& grads) {
  if (grads.preact_grads.size() != net.num_layers())
    throw std::invalid_argument("estimate_kfac_emp: gradient layer count mismatch");
  const Eigen::Index n = trace.batch_size();
  auto layers = input_covariances(net, trace);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Mat& g = grads.preact_grads[l];
    if (g.rows() != n)
      throw std::invalid_argument("estimate_kfac_emp: batch mismatch at layer " +
                                  std::to_string(l));
    layers[l].b = (g.transpose() * g) / static_cast<double>(n);
    symmetrize(layers[l].b);
  }
  KfacState state;
  state.layers = std::move(layers);
  state.variant = KfacVariant::Empirical;
  state.mc_samples = 0;
  return state;
}

void DampedKfacState::finalize() {
  a_chol_.clear();
  b_chol_.clear();
  param_dim_ = 0;
  for (const auto& l : layers_) {
    a_chol_.emplace_back(l.a);
    b_chol_.emplace_back(l.b);
    if (a_chol_.back().info() != Eigen::Success ||
        b_chol_.back().info() != Eigen::Success)
      throw std::runtime_error(
          "DampedKfacState: factorization failed (insufficient damping)");
    param_dim_ += l.a.rows() * l.b.rows();
  }
}

DampedKfacState DampedKfacState::damped(const KfacState& state, double lambda,
                                        PiMode mode) {
  if (lambda <= 0.0)
    throw std::invalid_argument("apply_damping: lambda must be > 0");
  DampedKfacState out;
  out.lambda_ = lambda;
  const double root = std::sqrt(lambda);
  for (const auto& l : state.layers) {
    const double tr_a = l.a.trace();
    const double tr_b = l.b.trace();
    const double d2 = static_cast<double>(l.a.rows());
    const double d1 = static_cast<double>(l.b.rows());
    double pi = 1.0;
    if (tr_b > kTraceFloor) {
      pi = mode == PiMode::DimScaledTrace
               ? std::sqrt(d2 * tr_a / (d1 * tr_b))
               : std::sqrt((tr_a / d2) / (tr_b / d1));
      if (!std::isfinite(pi) || pi <= 0.0) pi = 1.0;
    }
    FactorPair f;
    f.a = l.a + pi * root * Mat::Identity(l.a.rows(), l.a.cols());
    f.b = l.b + (root / pi) * Mat::Identity(l.b.rows(), l.b.cols());
    out.layers_.push_back(std::move(f));
    out.pis_.push_back(pi);
  }
  out.finalize();
  return out;
}

DampedKfacState DampedKfacState::undamped(const KfacState& state) {
  DampedKfacState out;
  out.lambda_ = 0.0;
  out.layers_ = state.layers;
  out.pis_.assign(state.layers.size(), 1.0);
  out.finalize();
  return out;
}

Mat DampedKfacState::dense_block(std::size_t l) const {
  return kronecker(layers_[l].b, layers_[l].a);
}

Vec DampedKfacState::apply(const Vec& v) const {
  if (v.size() != param_dim_)
    throw std::invalid_argument("DampedKfacState::apply: dimension mismatch");
  Vec out(v.size());
  Eigen::Index off = 0;
  for (const auto& l : layers_) {
    const Eigen::Index d2 = l.a.rows();
    const Eigen::Index d1 = l.b.rows();
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                   Eigen::RowMajor>>
        vmat(v.data() + off, d1, d2);
    Mat res = l.b * vmat * l.a;
    for (Eigen::Index r = 0; r < d1; ++r)
      for (Eigen::Index c = 0; c < d2; ++c) out[off + r * d2 + c] = res(r, c);
    off += d1 * d2;
  }
  return out;
}

DampedKfacState apply_damping(const KfacState& state, double lambda, PiMode mode) {
  return DampedKfacState::damped(state, lambda, mode);
}

KfacState ema_update(const KfacState& state, const KfacState& fresh, double beta) {
  if (beta < 0.0 || beta >= 1.0)
    throw std::invalid_argument("ema_update: beta must be in [0, 1)");
  if (state.layers.size() != fresh.layers.size())
    throw std::invalid_argument("ema_update: layer count mismatch");
  if (beta == 0.0) {
    KfacState out = fresh;
    out.step_counter = state.step_counter + 1;
    out.ema_beta = 0.0;
    return out;
  }
  KfacState out = state;
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    if (out.layers[l].a.rows() != fresh.layers[l].a.rows() ||
        out.layers[l].b.rows() != fresh.layers[l].b.rows())
      throw std::invalid_argument("ema_update: shape mismatch at layer " +
                                  std::to_string(l));
    out.layers[l].a = beta * state.layers[l].a + (1.0 - beta) * fresh.layers[l].a;
    out.layers[l].b = beta * state.layers[l].b + (1.0 - beta) * fresh.layers[l].b;
  }
  out.step_counter = state.step_counter + 1;
  out.ema_beta = beta;
  return out;
}

EkfacState ekfac_correct(const KfacState& state, const Network& net,
                         const ForwardTrace& trace, const Criterion& criterion,
                         int mc_samples, Rng& rng) {
  if (mc_samples < 1)
    throw std::invalid_argument("ekfac_correct: M must be >= 1");
  const Eigen::Index n = trace.batch_size();
  check_weights(criterion, n);

  EkfacState out;
  out.layers.resize(state.num_layers());
  for (std::size_t l = 0; l < state.num_layers(); ++l) {
    Eigen::SelfAdjointEigenSolver<Mat> ea(state.layers[l].a);
    Eigen::SelfAdjointEigenSolver<Mat> eb(state.layers[l].b);
    if (ea.info() != Eigen::Success || eb.info() != Eigen::Success)
      throw std::runtime_error("ekfac_correct: eigendecomposition failed at layer " +
                               std::to_string(l));
    out.layers[l].q_a = ea.eigenvectors();
    out.layers[l].q_b = eb.eigenvectors();
    out.layers[l].lambda_corr =
        Mat::Zero(state.layers[l].b.rows(), state.layers[l].a.rows());
    out.param_dim += state.layers[l].a.rows() * state.layers[l].b.rows();
  }

  const Eigen::Index c = net.out_dim();
  Mat s_batch(n, c);
  for (int m = 0; m < mc_samples; ++m) {
    for (Eigen::Index i = 0; i < n; ++i)
      s_batch.row(i) = sample_pseudo_gradient(criterion.kind,
                                              trace.outputs.row(i).transpose(),
                                              example_weight(criterion, i), rng)
                           .transpose();
    GradientBundle bundle = backward(net, trace, s_batch);
    for (std::size_t l = 0; l < state.num_layers(); ++l) {
      // Per-example gradient matrix is g a^T, so its rotation is
      // (Q_B^T g)(a^T Q_A); accumulate the squared entries.
      Mat gq = bundle.preact_grads[l] * out.layers[l].q_b;  // N x d1
      Mat aq = trace.inputs[l] * out.layers[l].q_a;         // N x d2
      out.layers[l].lambda_corr.noalias() +=
          (gq.array().square().matrix().transpose() *
           aq.array().square().matrix());
    }
  }
  const double scale = 1.0 / (static_cast<double>(n) * mc_samples);
  for (auto& l : out.layers) {
    l.lambda_corr *= scale;
    if (!l.lambda_corr.allFinite())
      throw std::runtime_error("ekfac_correct: non-finite eigenvalues");
  }
  return out;
}

Mat dense_ggn(const Network& net, const ForwardTrace& trace,
              const Criterion& criterion) {
  if (trace.net_version != net.version())
    throw std::runtime_error("dense_ggn: stale trace");
  const Eigen::Index d = net.param_dim();
  if (d > 5000)
    throw std::invalid_argument("dense_ggn: d = " + std::to_string(d) +
                                " exceeds desk-scale cap 5000");
  const Eigen::Index n = trace.batch_size();
  const Eigen::Index c = net.out_dim();
  check_weights(criterion, n);

  Mat g_total = Mat::Zero(d, d);
  Mat jac(c, d);
  const std::size_t nl = net.num_layers();
  for (Eigen::Index i = 0; i < n; ++i) {
    // D_l = J_{z_l} f for this example, built from the output backwards.
    Mat dcur = activation_derivative(net.layer(nl - 1).activation,
                                     trace.preacts[nl - 1].row(i))
                   .row(0)
                   .asDiagonal();
    for (std::size_t l = nl; l-- > 0;) {
      const auto& layer = net.layer(l);
      const Eigen::Index d1 = layer.out_dim();
      const Eigen::Index d2 = layer.in_dim();
      Vec a = trace.inputs[l].row(i).transpose();
      for (Eigen::Index r = 0; r < d1; ++r)
        jac.block(0, net.param_offset(l) + r * d2, c, d2).noalias() =
            dcur.col(r) * a.transpose();
      if (l > 0) {
        Mat next = dcur * layer.weight;
        dcur = next * activation_derivative(net.layer(l - 1).activation,
                                            trace.preacts[l - 1].row(i))
                          .row(0)
                          .asDiagonal();
      }
    }
    // Output Hessian for this example.
    Mat h;
    const double w = example_weight(criterion, i);
    if (criterion.kind == LossKind::SquareLoss) {
      h = w * Mat::Identity(c, c);
    } else {
      Vec p = softmax_rows(trace.outputs.row(i)).row(0).transpose();
      h = p.asDiagonal();
      h.noalias() -= p * p.transpose();
      h *= w;
    }
    g_total.noalias() += jac.transpose() * (h * jac);
  }
  g_total /= static_cast<double>(n);
  symmetrize(g_total);
  return g_total;
}

Vec ggn_vector_product(const Network& net, const ForwardTrace& trace,
                       const Criterion& criterion, const Vec& v) {
  if (trace.net_version != net.version())
    throw std::runtime_error("ggn_vector_product: stale trace");
  if (v.size() != net.param_dim())
    throw std::invalid_argument("ggn_vector_product: dimension mismatch");
  const Eigen::Index n = trace.batch_size();
  check_weights(criterion, n);

  // Linearized forward pass: df = J v at the outputs.
  Mat da = Mat::Zero(n, net.in_dim());
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const auto& layer = net.layer(l);
    const Eigen::Index d1 = layer.out_dim();
    const Eigen::Index d2 = layer.in_dim();
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                   Eigen::RowMajor>>
        dw(v.data() + net.param_offset(l), d1, d2);
    Mat dz = trace.inputs[l] * dw.transpose() + da * layer.weight.transpose();
    da = dz.cwiseProduct(activation_derivative(layer.activation, trace.preacts[l]));
  }

  // Multiply by the per-example output Hessians.
  Mat u(n, net.out_dim());
  if (criterion.kind == LossKind::SquareLoss) {
    u = da;
  } else {
    Mat p = softmax_rows(trace.outputs);
    Vec dot = (p.array() * da.array()).rowwise().sum();
    u = (p.array() * da.array()).matrix() -
        (p.array().colwise() * dot.array()).matrix();
  }
  if (criterion.per_example_weights)
    u.array().colwise() *= criterion.per_example_weights->array();

  // Pull back: (1/N) sum J^T u.
  return backward(net, trace, u).flat;
}

Vec hvp_finite_difference(const std::function<Vec(const Vec&)>& grad_fn,
                          const Vec& theta, const Vec& v, double h) {
  if (h <= 0.0) throw std::invalid_argument("hvp_finite_difference: h must be > 0");
  Vec out = (grad_fn(theta + h * v) - grad_fn(theta - h * v)) / (2.0 * h);
  if (!out.allFinite())
    throw std::runtime_error("hvp_finite_difference: non-finite result");
  return out;
}

// ---- CurvatureOperator ----

CurvatureOperator CurvatureOperator::dense(Mat m) {
  if (m.rows() != m.cols())
    throw std::invalid_argument("CurvatureOperator::dense: matrix not square");
  CurvatureOperator op;
  op.kind_ = Kind::Dense;
  op.dim_ = m.rows();
  op.dense_ = std::move(m);
  return op;
}

CurvatureOperator CurvatureOperator::identity(Eigen::Index dim) {
  CurvatureOperator op;
  op.kind_ = Kind::Identity;
  op.dim_ = dim;
  return op;
}

CurvatureOperator CurvatureOperator::ggn(std::shared_ptr<const Network> net,
                                         std::shared_ptr<const ForwardTrace> trace,
                                         Criterion criterion, double ridge) {
  CurvatureOperator op;
  op.kind_ = Kind::Ggn;
  op.dim_ = net->param_dim();
  op.fn_ = [net, trace, criterion = std::move(criterion), ridge](const Vec& v) {
    Vec out = ggn_vector_product(*net, *trace, criterion, v);
    if (ridge != 0.0) out += ridge * v;
    return out;
  };
  return op;
}

CurvatureOperator CurvatureOperator::kfac(DampedKfacState state) {
  CurvatureOperator op;
  op.kind_ = Kind::KfacBlockDiag;
  op.dim_ = state.param_dim();
  op.kfac_ = std::make_shared<const DampedKfacState>(std::move(state));
  return op;
}

CurvatureOperator CurvatureOperator::ekfac(EkfacState state, double lambda) {
  CurvatureOperator op;
  op.kind_ = Kind::EkfacBasis;
  op.dim_ = state.param_dim;
  op.ekfac_ = std::make_shared<const EkfacState>(std::move(state));
  op.ekfac_lambda_ = lambda;
  return op;
}

CurvatureOperator CurvatureOperator::from_fn(std::function<Vec(const Vec&)> fn,
                                             Eigen::Index dim) {
  CurvatureOperator op;
  op.kind_ = Kind::Ggn;
  op.dim_ = dim;
  op.fn_ = std::move(fn);
  return op;
}

Vec CurvatureOperator::apply(const Vec& v) const {
  if (v.size() != dim_)
    throw std::invalid_argument("CurvatureOperator::apply: dimension mismatch");
  switch (kind_) {
    case Kind::Identity:
      return v;
    case Kind::Dense:
      return dense_ * v;
    case Kind::Ggn:
      return fn_(v);
    case Kind::KfacBlockDiag:
      return kfac_->apply(v);
    case Kind::EkfacBasis:
      throw std::runtime_error(
          "CurvatureOperator::apply: EKFAC operator is inverse-only");
  }
  throw std::logic_error("CurvatureOperator::apply: unknown kind");
}

const Mat& CurvatureOperator::dense_matrix() const {
  if (kind_ != Kind::Dense)
    throw std::runtime_error("CurvatureOperator: not a dense operator");
  return dense_;
}

const DampedKfacState& CurvatureOperator::kfac_state() const {
  if (kind_ != Kind::KfacBlockDiag)
    throw std::runtime_error("CurvatureOperator: not a KFAC operator");
  return *kfac_;
}

const EkfacState& CurvatureOperator::ekfac_state() const {
  if (kind_ != Kind::EkfacBasis)
    throw std::runtime_error("CurvatureOperator: not an EKFAC operator");
  return *ekfac_;
}

void dump_factors(const KfacState& state, const std::string& path) {
  write_factor_dump(path, state.layers);
}

}  // namespace kbo
