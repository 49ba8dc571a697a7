#include <doctest.h>

#include <Eigen/Eigenvalues>
#include <cmath>

#include "kbo/curvature.hpp"
#include "kbo/solvers.hpp"

using namespace kbo;

namespace {

Network random_net(std::vector<std::pair<std::pair<int, int>, Activation>> spec,
                   std::uint64_t seed) {
  Rng rng(seed);
  std::vector<LinearLayer> layers;
  for (auto& [dims, act] : spec) {
    Mat w(dims.first, dims.second);
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = 0.4 * rng.normal();
    layers.push_back({std::move(w), act});
  }
  return Network(std::move(layers));
}

Mat random_batch(Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
  Rng rng(seed);
  Mat x(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = rng.normal();
  return x;
}

}  // namespace

TEST_CASE("MC estimate of B approaches the identity for square loss") {
  // One linear layer, square loss: the output curvature is I, so B -> I.
  const int n = 8;
  Network net = random_net({{{2, 3}, Activation::Identity}}, 2);
  Mat x = random_batch(n, 3, 3);
  ForwardTrace tr = forward(net, x);
  Rng rng(99);
  const int m = 10000;
  KfacState state = estimate_kfac_mc(net, tr, Criterion::square(), m, rng);
  const double se_diag = std::sqrt(2.0 / (n * m));
  const double se_off = std::sqrt(1.0 / (n * m));
  const Mat& b = state.layers[0].b;
  for (Eigen::Index r = 0; r < 2; ++r)
    for (Eigen::Index c = 0; c < 2; ++c) {
      const double expect = r == c ? 1.0 : 0.0;
      const double se = r == c ? se_diag : se_off;
      CHECK(std::abs(b(r, c) - expect) <= 3.0 * se);
    }
}

TEST_CASE("enumerated MC equals the exact variant bitwise") {
  Network net = random_net({{{3, 4}, Activation::Tanh},
                            {{3, 3}, Activation::Identity}},
                           7);
  Mat x = random_batch(6, 4, 8);
  ForwardTrace tr = forward(net, x);
  KfacState enumd = estimate_kfac_mc_enumerated(net, tr, Criterion::cross_entropy());
  KfacState exact = estimate_kfac_exact(net, tr, Criterion::cross_entropy());
  for (std::size_t l = 0; l < 2; ++l) {
    CHECK((enumd.layers[l].b - exact.layers[l].b).norm() == 0.0);
    CHECK((enumd.layers[l].a - exact.layers[l].a).norm() == 0.0);
  }
}

TEST_CASE("weighted pseudo-gradients realize sigma-scaled output curvature") {
  // weights (4, 0): example 0 contributes 4 (diag(p) - p p^T) at the output
  // layer, example 1 contributes nothing.
  Network net({LinearLayer{Mat::Identity(3, 3), Activation::Identity}});
  Mat x(2, 3);
  x << 0.2, -0.7, 1.1, 0.5, 0.3, -0.2;
  ForwardTrace tr = forward(net, x);
  Vec w(2);
  w << 4.0, 0.0;
  KfacState st = estimate_kfac_exact(net, tr,
                                     Criterion::cross_entropy().with_weights(w));
  Vec p = softmax_rows(tr.outputs.row(0)).row(0).transpose();
  Mat h = p.asDiagonal();
  h.noalias() -= p * p.transpose();
  // B = (1/N) * sigma_0 * (diag(p)-pp^T) since the Jacobian to the
  // pre-activations is the identity here and example 1 has zero weight.
  CHECK((st.layers[0].b - 2.0 * h).norm() < 1e-12);
}

TEST_CASE("empirical variant: zero gradients give B = 0") {
  Network net = random_net({{{2, 3}, Activation::Identity}}, 4);
  Mat x = random_batch(5, 3, 5);
  ForwardTrace tr = forward(net, x);
  GradientBundle g = backward(net, tr, Mat::Zero(5, 2));
  KfacState st = estimate_kfac_emp(net, tr, g);
  CHECK(st.layers[0].b.norm() == 0.0);
}

TEST_CASE("empirical variant: single example gives rank-1 B") {
  Network net = random_net({{{3, 2}, Activation::Identity}}, 6);
  Mat x = random_batch(1, 2, 7);
  ForwardTrace tr = forward(net, x);
  Mat y(1, 3);
  y << 0.3, -0.8, 0.5;
  auto [loss, og] = loss_and_output_grad(Criterion::square(), tr.outputs,
                                         Targets::regression(y));
  (void)loss;
  KfacState st = estimate_kfac_emp(net, tr, backward(net, tr, og));
  Eigen::SelfAdjointEigenSolver<Mat> es(st.layers[0].b);
  CHECK(es.eigenvalues()[0] < 1e-12);  // ascending order: two null directions
  CHECK(es.eigenvalues()[1] < 1e-12);
  CHECK(es.eigenvalues()[2] >= 0.0);
}

TEST_CASE("empirical variant: two-example batch matches hand accumulation") {
  Network net = random_net({{{2, 4}, Activation::Tanh},
                            {{2, 2}, Activation::Identity}},
                           9);
  Mat x = random_batch(2, 4, 10);
  ForwardTrace tr = forward(net, x);
  IntVec y(2);
  y << 0, 1;
  auto [loss, og] = loss_and_output_grad(Criterion::cross_entropy(), tr.outputs,
                                         Targets::labels(y));
  (void)loss;
  GradientBundle g = backward(net, tr, og);
  KfacState st = estimate_kfac_emp(net, tr, g);
  for (std::size_t l = 0; l < 2; ++l) {
    Mat expect = (g.preact_grads[l].row(0).transpose() * g.preact_grads[l].row(0) +
                  g.preact_grads[l].row(1).transpose() * g.preact_grads[l].row(1)) /
                 2.0;
    CHECK((st.layers[l].b - expect).norm() < 1e-14);
  }
}

TEST_CASE("exact variant: square loss output layer has B = I") {
  Network net = random_net({{{3, 5}, Activation::Identity}}, 11);
  Mat x = random_batch(6, 5, 12);
  ForwardTrace tr = forward(net, x);
  KfacState st = estimate_kfac_exact(net, tr, Criterion::square());
  CHECK((st.layers[0].b - Mat::Identity(3, 3)).norm() < 1e-14);
}

TEST_CASE("exact variant reconstructs the softmax Hessian at uniform logits") {
  Mat cols = exact_pseudo_columns(LossKind::SoftmaxCrossEntropy,
                                  Vec::Zero(2), 1.0);
  Mat recon = (cols * cols.transpose()) / 2.0;  // (1/C) sum s s^T
  Mat expect(2, 2);
  expect << 0.25, -0.25, -0.25, 0.25;
  CHECK((recon - expect).norm() < 1e-15);
}

TEST_CASE("exact variant rejects too many classes") {
  Network net = random_net({{{33, 2}, Activation::Identity}}, 13);
  Mat x = random_batch(2, 2, 14);
  ForwardTrace tr = forward(net, x);
  CHECK_THROWS_AS(estimate_kfac_exact(net, tr, Criterion::cross_entropy()),
                  std::invalid_argument);
}

TEST_CASE("heuristic damping: dim-scaled pi formula on mismatched traces") {
  KfacState st;
  st.layers.push_back({Mat::Identity(2, 2), Mat::Identity(3, 3)});
  DampedKfacState d = apply_damping(st, 1e-4, PiMode::DimScaledTrace);
  // pi = sqrt(d2 Tr(A) / (d1 Tr(B))) = sqrt(2*2 / (3*3)) = 2/3.
  CHECK(d.pi(0) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("heuristic damping: symmetric case gives pi = 1") {
  KfacState st;
  st.layers.push_back({Mat::Identity(4, 4), Mat::Identity(4, 4)});
  const double lam = 0.25;
  for (PiMode mode : {PiMode::DimScaledTrace, PiMode::TraceNormalized}) {
    DampedKfacState d = apply_damping(st, lam, mode);
    CHECK(d.pi(0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK((d.factors(0).a - 1.5 * Mat::Identity(4, 4)).norm() < 1e-15);
    CHECK((d.factors(0).b - 1.5 * Mat::Identity(4, 4)).norm() < 1e-15);
  }
}

TEST_CASE("heuristic damping: zero B falls back to pi = 1") {
  KfacState st;
  st.layers.push_back({Mat::Identity(3, 3), Mat::Zero(2, 2)});
  const double lam = 1e-2;
  DampedKfacState d = apply_damping(st, lam, PiMode::DimScaledTrace);
  CHECK(d.pi(0) == 1.0);
  CHECK((d.factors(0).b - std::sqrt(lam) * Mat::Identity(2, 2)).norm() < 1e-15);
}

TEST_CASE("damping rejects lambda <= 0") {
  KfacState st;
  st.layers.push_back({Mat::Identity(2, 2), Mat::Identity(2, 2)});
  CHECK_THROWS_AS(apply_damping(st, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(apply_damping(st, -1.0), std::invalid_argument);
}

TEST_CASE("damped factor eigenvalues respect the lower bounds") {
  Network net = random_net({{{3, 4}, Activation::Tanh},
                            {{2, 3}, Activation::Identity}},
                           15);
  Mat x = random_batch(10, 4, 16);
  ForwardTrace tr = forward(net, x);
  Rng rng(17);
  KfacState st = estimate_kfac_mc(net, tr, Criterion::cross_entropy(), 1, rng);
  const double lam = 1e-3;
  DampedKfacState d = apply_damping(st, lam, PiMode::DimScaledTrace);
  for (std::size_t l = 0; l < 2; ++l) {
    Eigen::SelfAdjointEigenSolver<Mat> ea(d.factors(l).a);
    Eigen::SelfAdjointEigenSolver<Mat> eb(d.factors(l).b);
    CHECK(ea.eigenvalues().minCoeff() >= d.pi(l) * std::sqrt(lam) - 1e-12);
    CHECK(eb.eigenvalues().minCoeff() >= std::sqrt(lam) / d.pi(l) - 1e-12);
  }
}

TEST_CASE("estimated factors are symmetric") {
  Network net = random_net({{{3, 4}, Activation::ReLU},
                            {{2, 3}, Activation::Identity}},
                           18);
  Mat x = random_batch(12, 4, 19);
  ForwardTrace tr = forward(net, x);
  Rng rng(20);
  for (const KfacState& st :
       {estimate_kfac_mc(net, tr, Criterion::cross_entropy(), 2, rng),
        estimate_kfac_exact(net, tr, Criterion::cross_entropy())}) {
    for (const auto& l : st.layers) {
      CHECK((l.a - l.a.transpose()).norm() < 1e-12);
      CHECK((l.b - l.b.transpose()).norm() < 1e-12);
    }
  }
}

TEST_CASE("EMA: beta = 0 returns the fresh state exactly") {
  Network net = random_net({{{2, 3}, Activation::Identity}}, 21);
  Mat x = random_batch(4, 3, 22);
  ForwardTrace tr = forward(net, x);
  Rng rng(23);
  KfacState a = estimate_kfac_mc(net, tr, Criterion::square(), 1, rng);
  KfacState b = estimate_kfac_mc(net, tr, Criterion::square(), 1, rng);
  KfacState out = ema_update(a, b, 0.0);
  CHECK((out.layers[0].a - b.layers[0].a).norm() == 0.0);
  CHECK((out.layers[0].b - b.layers[0].b).norm() == 0.0);
  CHECK(out.step_counter == a.step_counter + 1);
}

TEST_CASE("EMA: halfway combination") {
  KfacState old_state, fresh;
  old_state.layers.push_back(
      {2.0 * Mat::Identity(2, 2), 2.0 * Mat::Identity(2, 2)});
  fresh.layers.push_back({Mat::Zero(2, 2), Mat::Zero(2, 2)});
  KfacState out = ema_update(old_state, fresh, 0.5);
  CHECK((out.layers[0].a - Mat::Identity(2, 2)).norm() == 0.0);
}

TEST_CASE("EMA: geometric approach to a constant input") {
  KfacState state;
  state.layers.push_back({Mat::Zero(2, 2), Mat::Zero(2, 2)});
  KfacState fresh;
  Mat f(2, 2);
  f << 3.0, 1.0, 1.0, 2.0;
  fresh.layers.push_back({f, f});
  const double beta = 0.9;
  for (int t = 1; t <= 10; ++t) {
    state = ema_update(state, fresh, beta);
    const double expect = 1.0 - std::pow(beta, t);
    CHECK((state.layers[0].a - expect * f).norm() < 1e-12);
  }
}

TEST_CASE("EMA rejects beta outside [0, 1)") {
  KfacState st;
  st.layers.push_back({Mat::Identity(2, 2), Mat::Identity(2, 2)});
  CHECK_THROWS_AS(ema_update(st, st, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(ema_update(st, st, -0.1), std::invalid_argument);
}

TEST_CASE("EKFAC with identity factors recovers raw second moments") {
  Network net({LinearLayer{Mat::Zero(2, 3), Activation::Identity}});
  Mat x = random_batch(5, 3, 30);
  ForwardTrace tr = forward(net, x);
  KfacState st;
  st.layers.push_back({Mat::Identity(3, 3), Mat::Identity(2, 2)});

  Rng rng_a(31), rng_b(31);
  EkfacState ek = ekfac_correct(st, net, tr, Criterion::square(), 1, rng_a);

  // Replay the same draws to accumulate the raw second moment by hand.
  Mat expect = Mat::Zero(2, 3);
  Mat s_batch(5, 2);
  for (Eigen::Index i = 0; i < 5; ++i)
    s_batch.row(i) = sample_pseudo_gradient(LossKind::SquareLoss,
                                            tr.outputs.row(i).transpose(), 1.0,
                                            rng_b)
                         .transpose();
  GradientBundle g = backward(net, tr, s_batch);
  for (Eigen::Index i = 0; i < 5; ++i)
    expect += (g.preact_grads[0].row(i).transpose().array().square().matrix() *
               tr.inputs[0].row(i).array().square().matrix());
  expect /= 5.0;
  // Identity factors eigendecompose to +/- the canonical basis; squared
  // projections make the sign irrelevant.
  CHECK((ek.layers[0].lambda_corr - expect).norm() < 1e-12);
}

TEST_CASE("EKFAC on rank-1 data concentrates on one entry") {
  // Single example, single output: A = a a^T is rank one, so only the
  // a-direction eigenvector carries any squared projection.
  Network net({LinearLayer{Mat::Zero(1, 3), Activation::Identity}});
  Mat x(1, 3);
  x << 0.4, -1.2, 0.9;
  ForwardTrace tr = forward(net, x);
  Rng rng(32);
  KfacState st = estimate_kfac_mc(net, tr, Criterion::square(), 1, rng);
  Rng rng2(33);
  EkfacState ek = ekfac_correct(st, net, tr, Criterion::square(), 1, rng2);
  int nonzero = 0;
  for (Eigen::Index c = 0; c < 3; ++c)
    if (ek.layers[0].lambda_corr(0, c) > 1e-14) ++nonzero;
  CHECK(nonzero == 1);
}

TEST_CASE("EKFAC inverse equals the dense joint-eigenbasis inverse") {
  Network net = random_net({{{2, 2}, Activation::Identity}}, 34);
  Mat x = random_batch(6, 2, 35);
  ForwardTrace tr = forward(net, x);
  Rng rng(36);
  KfacState st = estimate_kfac_mc(net, tr, Criterion::cross_entropy(), 4, rng);
  Rng rng2(37);
  EkfacState ek = ekfac_correct(st, net, tr, Criterion::cross_entropy(), 4, rng2);

  const double lam = 1e-2;
  // Dense counterpart: (Q_B (x) Q_A) (diag(vec Lambda*) + lam I)^{-1}
  // (Q_B (x) Q_A)^T with row-major vec.
  Mat q = kronecker(ek.layers[0].q_b, ek.layers[0].q_a);
  Vec diag(4);
  for (Eigen::Index r = 0; r < 2; ++r)
    for (Eigen::Index c = 0; c < 2; ++c)
      diag[r * 2 + c] = ek.layers[0].lambda_corr(r, c) + lam;
  Mat dense_inv = q * diag.cwiseInverse().asDiagonal() * q.transpose();

  Rng vr(38);
  Vec b(4);
  for (int i = 0; i < 4; ++i) b[i] = vr.normal();
  Vec via_state = ekfac_inverse_apply(ek, b, lam);
  CHECK((via_state - dense_inv * b).norm() < 1e-10);
}

TEST_CASE("dense GGN of linear regression is the data Gram matrix") {
  const int d = 6, n = 15;
  Network net({LinearLayer{Mat::Zero(1, d), Activation::Identity}});
  Mat x = random_batch(n, d, 40);
  ForwardTrace tr = forward(net, x);
  Mat g = dense_ggn(net, tr, Criterion::square());
  Mat expect = (x.transpose() * x) / static_cast<double>(n);
  CHECK((g - expect).norm() < 1e-12);
}

TEST_CASE("dense GGN of zero inputs is zero") {
  Network net = random_net({{{2, 3}, Activation::Tanh},
                            {{2, 2}, Activation::Identity}},
                           41);
  ForwardTrace tr = forward(net, Mat::Zero(4, 3));
  Mat g = dense_ggn(net, tr, Criterion::cross_entropy());
  // Zero inputs kill the first-layer Jacobian blocks and tanh(0) = 0 kills
  // the second-layer ones.
  CHECK(g.norm() < 1e-14);
}

TEST_CASE("GGN-vector product matches the dense oracle column by column") {
  Network net = random_net({{{3, 4}, Activation::Tanh},
                            {{2, 3}, Activation::Identity}},
                           42);
  Mat x = random_batch(7, 4, 43);
  ForwardTrace tr = forward(net, x);
  Criterion crit = Criterion::cross_entropy();
  Mat g = dense_ggn(net, tr, crit);
  for (Eigen::Index j = 0; j < net.param_dim(); ++j) {
    Vec e = Vec::Zero(net.param_dim());
    e[j] = 1.0;
    Vec col = ggn_vector_product(net, tr, crit, e);
    CHECK((col - g.col(j)).norm() <= 1e-10 * std::max(1.0, g.col(j).norm()));
  }
}

TEST_CASE("GGN-vp: zero vector maps to zero, linear regression exact") {
  const int d = 5, n = 9;
  Network net({LinearLayer{Mat::Zero(1, d), Activation::Identity}});
  Mat x = random_batch(n, d, 44);
  ForwardTrace tr = forward(net, x);
  CHECK(ggn_vector_product(net, tr, Criterion::square(), Vec::Zero(d)).norm() ==
        0.0);
  Rng rng(45);
  Vec v(d);
  for (int i = 0; i < d; ++i) v[i] = rng.normal();
  Vec expect = (x.transpose() * (x * v)) / static_cast<double>(n);
  CHECK((ggn_vector_product(net, tr, Criterion::square(), v) - expect).norm() <
        1e-12);
}

TEST_CASE("weighted GGN-vp matches weighted dense GGN") {
  Network net = random_net({{{2, 3}, Activation::Tanh},
                            {{2, 2}, Activation::Identity}},
                           46);
  Mat x = random_batch(5, 3, 47);
  ForwardTrace tr = forward(net, x);
  Vec w(5);
  w << 0.5, 2.0, 0.0, 1.0, 3.0;
  Criterion crit = Criterion::cross_entropy().with_weights(w);
  Mat g = dense_ggn(net, tr, crit);
  Rng rng(48);
  Vec v(net.param_dim());
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.normal();
  CHECK((ggn_vector_product(net, tr, crit, v) - g * v).norm() < 1e-12);
}

TEST_CASE("finite-difference HVP recovers a quadratic's matrix") {
  const int d = 4;
  Mat m = random_batch(d, d, 49);
  m = (m + m.transpose()).eval();
  auto grad_fn = [&](const Vec& th) { return Vec(m * th); };
  Rng rng(50);
  Vec theta(d), v(d);
  for (int i = 0; i < d; ++i) {
    theta[i] = rng.normal();
    v[i] = rng.normal();
  }
  Vec hv = hvp_finite_difference(grad_fn, theta, v, 1e-4);
  CHECK((hv - m * v).norm() < 1e-9);
  CHECK(hvp_finite_difference(grad_fn, theta, Vec::Zero(d), 1e-4).norm() == 0.0);
}

TEST_CASE("HVP equals GGN-vp at an interpolating minimum") {
  // Square loss with targets equal to the current outputs: the residual term
  // of the Hessian decomposition vanishes, so the true Hessian equals the
  // GGN there.
  Network net = random_net({{{3, 2}, Activation::Tanh},
                            {{2, 3}, Activation::Identity}},
                           51);
  Mat x = random_batch(6, 2, 52);
  ForwardTrace tr0 = forward(net, x);
  const Mat targets = tr0.outputs;

  auto grad_at = [&](const Mat& tgt) {
    return [&, tgt](const Vec& th) {
      Network copy = net;
      unflatten_params(copy, th);
      ForwardTrace tr = forward(copy, x);
      auto [loss, og] = loss_and_output_grad(Criterion::square(), tr.outputs,
                                             Targets::regression(tgt));
      (void)loss;
      return backward(copy, tr, og).flat;
    };
  };

  Rng rng(53);
  Vec v(net.param_dim());
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.normal();
  Vec theta = flatten_params(net);

  Vec hv = hvp_finite_difference(grad_at(targets), theta, v, 1e-5);
  Vec gv = ggn_vector_product(net, tr0, Criterion::square(), v);
  CHECK((hv - gv).norm() <= 1e-6 * std::max(1.0, gv.norm()));

  // Shifting the targets reintroduces the residual term.
  const Mat shifted = targets.array() + 0.5;
  Vec hv2 = hvp_finite_difference(grad_at(shifted), theta, v, 1e-5);
  CHECK((hv2 - gv).norm() > 1e-3);
}

TEST_CASE("Kronecker exactness: single linear layer with square loss") {
  const int d1 = 3, d2 = 5, n = 12;
  Network net = random_net({{{d1, d2}, Activation::Identity}}, 54);
  Mat x = random_batch(n, d2, 55);
  ForwardTrace tr = forward(net, x);
  KfacState st = estimate_kfac_exact(net, tr, Criterion::square());
  Mat kfac_block = st.dense_block(0);
  Mat g = dense_ggn(net, tr, Criterion::square());
  CHECK((kfac_block - g).norm() <= 1e-10 * g.norm());
}

TEST_CASE("batch of one: KFAC equals the per-example Kronecker product") {
  Network net = random_net({{{3, 4}, Activation::Identity}}, 56);
  Mat x = random_batch(1, 4, 57);
  ForwardTrace tr = forward(net, x);
  KfacState st = estimate_kfac_exact(net, tr, Criterion::cross_entropy());
  Mat g = dense_ggn(net, tr, Criterion::cross_entropy());
  CHECK((st.dense_block(0) - g).norm() < 1e-12);
}

TEST_CASE("factor dump round-trips through the KFAC container") {
  Network net = random_net({{{2, 3}, Activation::Tanh},
                            {{4, 2}, Activation::Identity}},
                           58);
  Mat x = random_batch(5, 3, 59);
  ForwardTrace tr = forward(net, x);
  Rng rng(60);
  KfacState st = estimate_kfac_mc(net, tr, Criterion::square(), 1, rng);
  const std::string path = "kfac_dump_test.bin";
  dump_factors(st, path);
  auto layers = read_factor_dump(path);
  REQUIRE(layers.size() == 2);
  for (std::size_t l = 0; l < 2; ++l) {
    CHECK((layers[l].a - st.layers[l].a).norm() == 0.0);
    CHECK((layers[l].b - st.layers[l].b).norm() == 0.0);
  }
  std::remove(path.c_str());
}
