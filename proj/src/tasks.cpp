#include "kbo/tasks.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <stdexcept>
#include <thread>

namespace kbo {

namespace {

using Clock = std::chrono::steady_clock;

Mat with_const_feature(const Mat& x) {
  Mat out(x.rows(), x.cols() + 1);
  out.leftCols(x.cols()) = x;
  out.col(x.cols()).setOnes();
  return out;
}

Mat dense_symmetric_inverse(const Mat& a) {
  Eigen::LDLT<Mat> ldlt(a);
  Mat inv = ldlt.solve(Mat::Identity(a.rows(), a.cols()));
  inv += ldlt.solve(Mat::Identity(a.rows(), a.cols()) - a * inv);
  if (!inv.allFinite())
    throw std::runtime_error("dense inverse: singular matrix");
  return inv;
}

}  // namespace

Mat LinRegProblem::hessian() const {
  return (x * x.transpose()) / static_cast<double>(x.cols());
}

LinRegProblem gen_linreg(int d, int n, std::uint64_t seed) {
  if (d < 1 || n < 1) throw std::invalid_argument("gen_linreg: d, N must be >= 1");
  Rng rng = seed_stream(seed, "linreg");
  LinRegProblem p;
  p.seed = seed;
  p.x.resize(d, n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < d; ++i) p.x(i, j) = rng.normal();
  p.y.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) p.y[j] = rng.normal();
  return p;
}

namespace {

struct MethodSpec {
  enum class Kind { Exact, Identity, Neumann, Cg, Kfac, KfacExact };
  Kind kind;
  int budget = 0;
};

MethodSpec parse_method(const std::string& label) {
  if (label == "exact") return {MethodSpec::Kind::Exact, 0};
  if (label == "identity") return {MethodSpec::Kind::Identity, 0};
  if (label == "kfac") return {MethodSpec::Kind::Kfac, 0};
  if (label == "kfac-exact") return {MethodSpec::Kind::KfacExact, 0};
  if (label.rfind("neu-", 0) == 0)
    return {MethodSpec::Kind::Neumann, std::stoi(label.substr(4))};
  if (label.rfind("cg-", 0) == 0)
    return {MethodSpec::Kind::Cg, std::stoi(label.substr(3))};
  throw std::invalid_argument("diagnostic: unknown method '" + label + "'");
}

// Single-layer linear model over the regression design: A = (1/N) X X^T is
// the input covariance and B is a scalar.
Network linreg_network(int d) {
  return Network({LinearLayer{Mat::Zero(1, d), Activation::Identity}});
}

DiagnosticRecord run_cell(const DiagnosticOptions& opts, const std::string& label,
                          int d, std::uint64_t seed) {
  const auto t0 = Clock::now();
  const MethodSpec ms = parse_method(label);

  LinRegProblem prob = gen_linreg(d, opts.n, seed);
  const Mat h = prob.hessian();
  const Mat exact_inv =
      dense_symmetric_inverse(h + opts.lambda * Mat::Identity(d, d));

  DiagnosticRecord rec;
  rec.method = label;
  rec.d = d;
  rec.seed = seed;

  Mat approx(d, d);
  switch (ms.kind) {
    case MethodSpec::Kind::Exact:
      approx = exact_inv;
      break;
    case MethodSpec::Kind::Identity:
      approx = Mat::Identity(d, d);
      break;
    case MethodSpec::Kind::Neumann: {
      // Matrix form of the truncated series applied to every basis vector at
      // once: S <- I + (I - eta (H + lambda I)) S, K times, P = eta S.
      CurvatureOperator op = CurvatureOperator::dense(h);
      const double lmax = power_iteration_lambda_max(op, opts.lambda, 20);
      const double eta = lmax > 0.0 ? 1.0 / (1.1 * lmax) : 1.0;
      Mat contraction = -eta * h;
      contraction.diagonal().array() += 1.0 - eta * opts.lambda;
      Mat series = Mat::Identity(d, d);
      for (int k = 0; k < ms.budget; ++k)
        series = Mat::Identity(d, d) + contraction * series;
      approx = eta * series;
      break;
    }
    case MethodSpec::Kind::Cg: {
      CurvatureOperator op = CurvatureOperator::dense(h);
      for (int j = 0; j < d; ++j) {
        Vec e = Vec::Zero(d);
        e[j] = 1.0;
        approx.col(j) =
            cg_solve(op, e, ms.budget, 1e-30, opts.lambda).solution;
      }
      break;
    }
    case MethodSpec::Kind::Kfac: {
      Network net = linreg_network(d);
      ForwardTrace trace = forward(net, prob.x.transpose());
      Rng rng = seed_stream(seed, "kfac-mc/d=" + std::to_string(d));
      KfacState state = estimate_kfac_mc(net, trace, Criterion::square(),
                                         opts.mc_samples, rng);
      DampedKfacState damped = apply_damping(state, opts.lambda, opts.pi_mode);
      for (int j = 0; j < d; ++j) {
        Vec e = Vec::Zero(d);
        e[j] = 1.0;
        approx.col(j) = ikvp(damped, e);
      }
      rec.mc_samples = opts.mc_samples;
      rec.sample_count = static_cast<long>(opts.n) * opts.mc_samples;
      break;
    }
    case MethodSpec::Kind::KfacExact: {
      // Exact B with full-block damping: (B (x) A + lambda I)^{-1}.
      Network net = linreg_network(d);
      ForwardTrace trace = forward(net, prob.x.transpose());
      KfacState state = estimate_kfac_exact(net, trace, Criterion::square());
      const Mat block = state.dense_block(0);
      for (int j = 0; j < d; ++j) {
        Vec e = Vec::Zero(d);
        e[j] = 1.0;
        approx.col(j) = exact_solve(block, e, opts.lambda);
      }
      rec.mc_samples = 0;
      rec.sample_count = static_cast<long>(opts.n) * net.out_dim();
      break;
    }
  }

  auto [err, alpha] = relative_operator_error(approx, exact_inv);
  rec.rel_error = err;
  rec.alpha_star = alpha;
  rec.wall_ms =
      std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
  return rec;
}

}  // namespace

std::vector<DiagnosticRecord> diagnostic_study(const DiagnosticOptions& opts) {
  if (opts.lambda <= 0.0)
    throw std::invalid_argument("diagnostic_study: lambda must be > 0");
  for (int d : opts.dims)
    if (d > 2000)
      throw std::invalid_argument("diagnostic_study: d exceeds cap 2000");

  struct Cell {
    std::string method;
    int d;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (const auto& m : opts.methods)
    for (int d : opts.dims)
      for (auto s : opts.seeds) cells.push_back({m, d, s});

  std::vector<DiagnosticRecord> records(cells.size());
  const int threads = std::max(1, opts.threads);
  if (threads == 1) {
    for (std::size_t i = 0; i < cells.size(); ++i)
      records[i] = run_cell(opts, cells[i].method, cells[i].d, cells[i].seed);
  } else {
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= cells.size()) return;
        records[i] = run_cell(opts, cells[i].method, cells[i].d, cells[i].seed);
      }
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::sort(records.begin(), records.end(),
            [](const DiagnosticRecord& a, const DiagnosticRecord& b) {
              if (a.method != b.method) return a.method < b.method;
              if (a.d != b.d) return a.d < b.d;
              return a.seed < b.seed;
            });
  return records;
}

double mean_error(const std::vector<DiagnosticRecord>& records,
                  const std::string& method, int d) {
  double sum = 0.0;
  int count = 0;
  for (const auto& r : records)
    if (r.method == method && r.d == d) {
      sum += r.rel_error;
      ++count;
    }
  if (count == 0)
    throw std::invalid_argument("mean_error: no records for " + method);
  return sum / count;
}

std::pair<IntVec, std::vector<std::uint8_t>> corrupt_labels(const IntVec& labels,
                                                            double ratio,
                                                            int classes,
                                                            Rng& rng) {
  if (ratio < 0.0 || ratio > 1.0)
    throw std::invalid_argument("corrupt_labels: ratio must be in [0,1]");
  const Eigen::Index n = labels.size();
  const auto k = static_cast<Eigen::Index>(ratio * static_cast<double>(n));
  if (k > 0 && classes < 2)
    throw std::invalid_argument("corrupt_labels: need >= 2 classes to corrupt");

  IntVec out = labels;
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(n), 0);
  auto perm = rng.permutation(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < k; ++i) {
    const auto idx = static_cast<Eigen::Index>(perm[static_cast<std::size_t>(i)]);
    int fresh = out[idx];
    while (fresh == labels[idx])
      fresh = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
    out[idx] = fresh;
    mask[static_cast<std::size_t>(idx)] = 1;
  }
  return {std::move(out), std::move(mask)};
}

HypercleanDataset gen_synthetic_classification(int n_train, int n_val,
                                               int n_test, int classes,
                                               int input_dim, double separation,
                                               double noise_ratio,
                                               std::uint64_t seed,
                                               int scale_groups,
                                               double scale_decay) {
  if (classes < 2) throw std::invalid_argument("gen_synthetic: classes >= 2");
  if (n_train < classes || n_val < classes || n_test < classes)
    throw std::invalid_argument("gen_synthetic: counts must be >= classes");
  if (scale_groups < 1 || input_dim % scale_groups != 0)
    throw std::invalid_argument(
        "gen_synthetic: input_dim must be divisible by scale_groups");
  const int group_dim = input_dim / scale_groups;
  if (group_dim < classes)
    throw std::invalid_argument(
        "gen_synthetic: group dim must be >= classes for distinct class axes");

  Vec scales(input_dim);
  for (int i = 0; i < input_dim; ++i)
    scales[i] = std::pow(scale_decay, -(i / group_dim));

  // Class means sit on distinct axes inside every scale group, proportional
  // to the group scale; kappa normalizes the pairwise distance to
  // `separation` exactly.
  double sum_sq = 0.0;
  for (int g = 0; g < scale_groups; ++g)
    sum_sq += std::pow(scale_decay, -2.0 * g);
  const double kappa = separation / std::sqrt(2.0 * sum_sq);
  Mat means = Mat::Zero(classes, input_dim);
  for (int c = 0; c < classes; ++c)
    for (int g = 0; g < scale_groups; ++g)
      means(c, g * group_dim + c) = kappa * std::pow(scale_decay, -g);

  Rng data_rng = seed_stream(seed, "data");
  auto sample = [&](int n, Mat& x, IntVec& y) {
    x.resize(n, input_dim);
    y.resize(n);
    for (int i = 0; i < n; ++i) {
      y[i] = static_cast<int>(data_rng.below(static_cast<std::uint64_t>(classes)));
      for (int j = 0; j < input_dim; ++j)
        x(i, j) = means(y[i], j) + scales[j] * data_rng.normal();
    }
  };

  HypercleanDataset ds;
  ds.classes = classes;
  ds.corruption_ratio = noise_ratio;
  ds.seed = seed;
  sample(n_train, ds.train_inputs, ds.train_labels);
  sample(n_val, ds.val_inputs, ds.val_labels);
  sample(n_test, ds.test_inputs, ds.test_labels);

  Rng corrupt_rng = seed_stream(seed, "corrupt");
  auto [labels, mask] =
      corrupt_labels(ds.train_labels, noise_ratio, classes, corrupt_rng);
  ds.train_labels = std::move(labels);
  ds.corruption_mask = std::move(mask);
  return ds;
}

void save_dataset(const HypercleanDataset& ds, const std::string& path) {
  auto labels_mat = [](const IntVec& v) {
    Mat m(v.size(), 1);
    for (Eigen::Index i = 0; i < v.size(); ++i) m(i, 0) = v[i];
    return m;
  };
  Mat mask(ds.corruption_mask.size(), 1);
  for (std::size_t i = 0; i < ds.corruption_mask.size(); ++i)
    mask(static_cast<Eigen::Index>(i), 0) = ds.corruption_mask[i];
  Mat meta(3, 1);
  meta << ds.classes, ds.corruption_ratio,
      static_cast<double>(ds.seed);
  write_tensors(path, {meta, ds.train_inputs, labels_mat(ds.train_labels), mask,
                       ds.val_inputs, labels_mat(ds.val_labels), ds.test_inputs,
                       labels_mat(ds.test_labels)});
}

HypercleanDataset load_dataset(const std::string& path) {
  auto tensors = read_tensors(path);
  if (tensors.size() != 8)
    throw std::runtime_error("load_dataset: unexpected tensor count in " + path);
  auto to_labels = [](const Mat& m) {
    IntVec v(m.rows());
    for (Eigen::Index i = 0; i < m.rows(); ++i) v[i] = static_cast<int>(m(i, 0));
    return v;
  };
  HypercleanDataset ds;
  ds.classes = static_cast<int>(tensors[0](0, 0));
  ds.corruption_ratio = tensors[0](1, 0);
  ds.seed = static_cast<std::uint64_t>(tensors[0](2, 0));
  ds.train_inputs = tensors[1];
  ds.train_labels = to_labels(tensors[2]);
  ds.corruption_mask.resize(static_cast<std::size_t>(tensors[3].rows()));
  for (Eigen::Index i = 0; i < tensors[3].rows(); ++i)
    ds.corruption_mask[static_cast<std::size_t>(i)] =
        tensors[3](i, 0) != 0.0 ? 1 : 0;
  ds.val_inputs = tensors[4];
  ds.val_labels = to_labels(tensors[5]);
  ds.test_inputs = tensors[6];
  ds.test_labels = to_labels(tensors[7]);
  return ds;
}

namespace {

/// Shared mutable state behind the hypercleaning closures: a scratch network,
/// the prepared splits, and the mini-batch stream.
struct HypercleanRuntime {
  Network net;
  Mat x_train, x_val, x_test;
  IntVec y_train, y_val, y_test;
  double alpha = 0.0;
  int batch_size = 0;
  bool curvature_full_batch = false;
  int mc_samples = 1;
  Rng batch_rng{0};
  std::vector<Eigen::Index> last_batch;

  Eigen::Index n_train() const { return x_train.rows(); }

  void load_theta(const Vec& theta) { unflatten_params(net, theta); }

  std::vector<Eigen::Index> draw_batch() {
    std::vector<Eigen::Index> idx;
    if (batch_size <= 0 || batch_size >= n_train()) {
      idx.resize(static_cast<std::size_t>(n_train()));
      for (Eigen::Index i = 0; i < n_train(); ++i)
        idx[static_cast<std::size_t>(i)] = i;
    } else {
      idx.resize(static_cast<std::size_t>(batch_size));
      for (auto& v : idx)
        v = static_cast<Eigen::Index>(
            batch_rng.below(static_cast<std::uint64_t>(n_train())));
    }
    last_batch = idx;
    return idx;
  }

  std::vector<Eigen::Index> curvature_batch() {
    if (curvature_full_batch || batch_size <= 0 || last_batch.empty()) {
      std::vector<Eigen::Index> idx(static_cast<std::size_t>(n_train()));
      for (Eigen::Index i = 0; i < n_train(); ++i)
        idx[static_cast<std::size_t>(i)] = i;
      return idx;
    }
    return last_batch;
  }

  Mat gather_x(const std::vector<Eigen::Index>& idx) const {
    Mat out(static_cast<Eigen::Index>(idx.size()), x_train.cols());
    for (std::size_t i = 0; i < idx.size(); ++i)
      out.row(static_cast<Eigen::Index>(i)) = x_train.row(idx[i]);
    return out;
  }

  IntVec gather_y(const std::vector<Eigen::Index>& idx) const {
    IntVec out(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i)
      out[static_cast<Eigen::Index>(i)] = y_train[idx[i]];
    return out;
  }

  Vec gather_sigma(const Vec& lambda, const std::vector<Eigen::Index>& idx) const {
    Vec out(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i)
      out[static_cast<Eigen::Index>(i)] =
          std::min(1.0, std::max(0.0, lambda[idx[i]]));
    return out;
  }
};

}  // namespace

BilevelTask make_hyperclean_task(const HypercleanDataset& ds, const Network& net,
                                 const HypercleanTaskOptions& opts) {
  if (opts.alpha_reg < 0.0)
    throw std::invalid_argument("make_hyperclean_task: alpha_reg must be >= 0");
  if (net.in_dim() != ds.train_inputs.cols() + 1)
    throw std::invalid_argument(
        "make_hyperclean_task: net in_dim must be input_dim + 1 (constant "
        "feature)");
  if (net.out_dim() != ds.classes)
    throw std::invalid_argument(
        "make_hyperclean_task: net out_dim must equal class count");

  auto rt = std::make_shared<HypercleanRuntime>();
  rt->net = net;
  rt->x_train = with_const_feature(ds.train_inputs);
  rt->x_val = with_const_feature(ds.val_inputs);
  rt->x_test = with_const_feature(ds.test_inputs);
  rt->y_train = ds.train_labels;
  rt->y_val = ds.val_labels;
  rt->y_test = ds.test_labels;
  rt->alpha = opts.alpha_reg;
  rt->batch_size = opts.batch_size;
  rt->curvature_full_batch = opts.curvature_full_batch;
  rt->mc_samples = opts.mc_samples;
  rt->batch_rng = seed_stream(opts.seed, "inner-batches");

  const double alpha = opts.alpha_reg;

  BilevelTask task;
  task.outer_dim = ds.train_labels.size();
  task.inner_dim = net.param_dim();
  task.clip_lambda_unit = true;
  task.curvature_ridge = 2.0 * alpha;
  task.pi_mode = opts.pi_mode;

  task.inner_loss = [rt, alpha](const Vec& lambda, const Vec& theta) {
    rt->load_theta(theta);
    ForwardTrace tr = forward(rt->net, rt->x_train);
    Criterion crit =
        Criterion::cross_entropy().with_weights(clip_weights(lambda));
    auto [loss, grad] =
        loss_and_output_grad(crit, tr.outputs, Targets::labels(rt->y_train));
    (void)grad;
    return loss + alpha * theta.squaredNorm();
  };

  task.inner_grad = [rt, alpha](const Vec& lambda, const Vec& theta) {
    auto idx = rt->draw_batch();
    rt->load_theta(theta);
    Mat xb = rt->gather_x(idx);
    ForwardTrace tr = forward(rt->net, xb);
    Criterion crit =
        Criterion::cross_entropy().with_weights(rt->gather_sigma(lambda, idx));
    auto [loss, ograd] =
        loss_and_output_grad(crit, tr.outputs, Targets::labels(rt->gather_y(idx)));
    (void)loss;
    GradientBundle bundle = backward(rt->net, tr, ograd);
    return Vec(bundle.flat + 2.0 * alpha * theta);
  };

  task.inner_hvp = [rt, alpha](const Vec& lambda, const Vec& theta,
                               const Vec& v) {
    // Exact for a configuration that is linear in theta; GGN + 2 alpha I.
    rt->load_theta(theta);
    ForwardTrace tr = forward(rt->net, rt->x_train);
    Criterion crit =
        Criterion::cross_entropy().with_weights(clip_weights(lambda));
    return Vec(ggn_vector_product(rt->net, tr, crit, v) + 2.0 * alpha * v);
  };

  task.outer_loss = [rt](const Vec&, const Vec& theta) {
    rt->load_theta(theta);
    ForwardTrace tr = forward(rt->net, rt->x_val);
    auto [loss, grad] = loss_and_output_grad(Criterion::cross_entropy(),
                                             tr.outputs, Targets::labels(rt->y_val));
    (void)grad;
    return loss;
  };

  task.outer_grad_lambda = [](const Vec& lambda, const Vec&) {
    return Vec(Vec::Zero(lambda.size()));  // J_out does not depend on lambda
  };

  task.outer_grad_theta = [rt](const Vec&, const Vec& theta) {
    rt->load_theta(theta);
    ForwardTrace tr = forward(rt->net, rt->x_val);
    auto [loss, ograd] = loss_and_output_grad(Criterion::cross_entropy(),
                                              tr.outputs, Targets::labels(rt->y_val));
    (void)loss;
    return backward(rt->net, tr, ograd).flat;
  };

  task.cross_dvp = [rt](const Vec& lambda, const Vec& theta, const Vec& v) {
    // d/dlambda_n of grad J_in . v = subgrad(lambda_n)/N * <grad l_n, v>.
    rt->load_theta(theta);
    ForwardTrace tr = forward(rt->net, rt->x_train);
    auto [loss, ograd] = loss_and_output_grad(
        Criterion::cross_entropy(), tr.outputs, Targets::labels(rt->y_train));
    (void)loss;
    GradientBundle bundle = backward(rt->net, tr, ograd);
    const Eigen::Index n = rt->n_train();
    Vec dots = Vec::Zero(n);
    for (std::size_t l = 0; l < rt->net.num_layers(); ++l) {
      const Eigen::Index d1 = rt->net.layer(l).out_dim();
      const Eigen::Index d2 = rt->net.layer(l).in_dim();
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                     Eigen::RowMajor>>
          vmat(v.data() + rt->net.param_offset(l), d1, d2);
      Mat proj = tr.inputs[l] * vmat.transpose();  // N x d1
      dots += (bundle.preact_grads[l].array() * proj.array())
                  .rowwise()
                  .sum()
                  .matrix();
    }
    return Vec(clip_subgradient(lambda).cwiseProduct(dots) /
               static_cast<double>(n));
  };

  task.make_operator = [rt](const Vec& lambda, const Vec& theta) {
    auto idx = rt->curvature_batch();
    auto net_copy = std::make_shared<Network>(rt->net);
    unflatten_params(*net_copy, theta);
    auto tr = std::make_shared<ForwardTrace>(forward(*net_copy, rt->gather_x(idx)));
    Criterion crit =
        Criterion::cross_entropy().with_weights(rt->gather_sigma(lambda, idx));
    return CurvatureOperator::ggn(net_copy, tr, crit, 2.0 * rt->alpha);
  };

  task.make_dense = [rt](const Vec& lambda, const Vec& theta) {
    auto idx = rt->curvature_batch();
    rt->load_theta(theta);
    ForwardTrace tr = forward(rt->net, rt->gather_x(idx));
    Criterion crit =
        Criterion::cross_entropy().with_weights(rt->gather_sigma(lambda, idx));
    Mat g = dense_ggn(rt->net, tr, crit);
    g += 2.0 * rt->alpha * Mat::Identity(g.rows(), g.cols());
    return g;
  };

  task.make_kfac = [rt](const Vec& lambda, const Vec& theta, Rng& rng) {
    auto idx = rt->curvature_batch();
    rt->load_theta(theta);
    ForwardTrace tr = forward(rt->net, rt->gather_x(idx));
    Criterion crit =
        Criterion::cross_entropy().with_weights(rt->gather_sigma(lambda, idx));
    return estimate_kfac_mc(rt->net, tr, crit, rt->mc_samples, rng);
  };

  task.make_ekfac = [rt](const KfacState& state, const Vec& lambda,
                         const Vec& theta, Rng& rng) {
    auto idx = rt->curvature_batch();
    rt->load_theta(theta);
    ForwardTrace tr = forward(rt->net, rt->gather_x(idx));
    Criterion crit =
        Criterion::cross_entropy().with_weights(rt->gather_sigma(lambda, idx));
    return ekfac_correct(state, rt->net, tr, crit, rt->mc_samples, rng);
  };

  task.test_metric = [rt](const Vec&, const Vec& theta) {
    rt->load_theta(theta);
    ForwardTrace tr = forward(rt->net, rt->x_test);
    auto [loss, grad] = loss_and_output_grad(Criterion::cross_entropy(),
                                             tr.outputs, Targets::labels(rt->y_test));
    (void)grad;
    return loss;
  };

  return task;
}

BilevelTask QuadraticBilevel::task() const {
  const Mat m_ = m;
  const Mat p_ = p;
  const Vec c_ = c;
  const Vec t_ = t;
  const double q_ = q;

  BilevelTask task;
  task.inner_dim = m.rows();
  task.outer_dim = p.cols();
  task.inner_loss = [m_, p_, c_](const Vec& lam, const Vec& th) {
    return 0.5 * th.dot(m_ * th) - (c_ + p_ * lam).dot(th);
  };
  task.inner_grad = [m_, p_, c_](const Vec& lam, const Vec& th) {
    return Vec(m_ * th - c_ - p_ * lam);
  };
  task.inner_hvp = [m_](const Vec&, const Vec&, const Vec& v) {
    return Vec(m_ * v);
  };
  task.cross_dvp = [p_](const Vec&, const Vec&, const Vec& v) {
    return Vec(-p_.transpose() * v);
  };
  task.outer_loss = [t_, q_](const Vec& lam, const Vec& th) {
    return 0.5 * (th - t_).squaredNorm() + 0.5 * q_ * lam.squaredNorm();
  };
  task.outer_grad_lambda = [q_](const Vec& lam, const Vec&) {
    return Vec(q_ * lam);
  };
  task.outer_grad_theta = [t_](const Vec&, const Vec& th) {
    return Vec(th - t_);
  };
  task.make_dense = [m_](const Vec&, const Vec&) { return m_; };
  task.make_operator = [m_](const Vec&, const Vec&) {
    return CurvatureOperator::dense(m_);
  };
  return task;
}

Vec QuadraticBilevel::theta_star(const Vec& lambda) const {
  return m.ldlt().solve(c + p * lambda);
}

double QuadraticBilevel::phi(const Vec& lambda) const {
  Vec th = theta_star(lambda);
  return 0.5 * (th - t).squaredNorm() + 0.5 * q * lambda.squaredNorm();
}

Vec QuadraticBilevel::hypergrad(const Vec& lambda) const {
  Vec th = theta_star(lambda);
  return q * lambda + p.transpose() * m.ldlt().solve(th - t);
}

QuadraticBilevel make_scalar_toy() {
  QuadraticBilevel qb;
  qb.m = Mat::Ones(1, 1);
  qb.p = Mat::Ones(1, 1);
  qb.c = Vec::Zero(1);
  qb.t = Vec::Zero(1);
  qb.q = 0.0;
  return qb;
}

double roc_auc(const Vec& score, const std::vector<std::uint8_t>& mask) {
  const Eigen::Index n = score.size();
  if (static_cast<std::size_t>(n) != mask.size())
    throw std::invalid_argument("roc_auc: size mismatch");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::sort(order.begin(), order.end(),
            [&](Eigen::Index a, Eigen::Index b) { return score[a] < score[b]; });
  // midranks for ties
  Vec rank(n);
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && score[order[j + 1]] == score[order[i]]) ++j;
    const double mid = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double pos = 0.0, rank_sum = 0.0;
  for (Eigen::Index k = 0; k < n; ++k)
    if (mask[static_cast<std::size_t>(k)]) {
      pos += 1.0;
      rank_sum += rank[k];
    }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0.0 || neg == 0.0)
    throw std::invalid_argument("roc_auc: need both classes present");
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

double test_cross_entropy(const Network& net, const Mat& inputs,
                          const IntVec& labels) {
  Network scratch = net;
  ForwardTrace tr = forward(scratch, with_const_feature(inputs));
  auto [loss, grad] = loss_and_output_grad(Criterion::cross_entropy(),
                                           tr.outputs, Targets::labels(labels));
  (void)grad;
  return loss;
}

}  // namespace kbo
