#include "kbo/bilevel.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

namespace kbo {

namespace {

using Clock = std::chrono::steady_clock;

CurvatureOperator build_operator(const BilevelTask& task, const Vec& lambda,
                                 const Vec& theta, const SolverSpec& spec,
                                 Rng& rng) {
  switch (spec.kind) {
    case SolverKind::Exact: {
      if (!task.make_dense)
        throw std::runtime_error("ift: task has no dense curvature recipe");
      return CurvatureOperator::dense(task.make_dense(lambda, theta));
    }
    case SolverKind::Ikvp: {
      if (!task.make_kfac)
        throw std::runtime_error("ift: task has no KFAC recipe");
      KfacState state = task.make_kfac(lambda, theta, rng);
      const double damp = spec.lambda + task.curvature_ridge;
      DampedKfacState damped =
          damp > 0.0 ? apply_damping(state, damp, task.pi_mode)
                     : DampedKfacState::undamped(state);
      return CurvatureOperator::kfac(std::move(damped));
    }
    case SolverKind::Ekfac: {
      if (!task.make_kfac || !task.make_ekfac)
        throw std::runtime_error("ift: task has no EKFAC recipe");
      KfacState state = task.make_kfac(lambda, theta, rng);
      EkfacState ek = task.make_ekfac(state, lambda, theta, rng);
      return CurvatureOperator::ekfac(std::move(ek),
                                      spec.lambda + task.curvature_ridge);
    }
    default: {
      if (!task.make_operator)
        throw std::runtime_error("ift: task has no curvature operator recipe");
      return task.make_operator(lambda, theta);
    }
  }
}

HypergradientResult assemble_hypergradient(const BilevelTask& task,
                                           const Vec& lambda, const Vec& theta,
                                           const SolverSpec& spec,
                                           const CurvatureOperator& op) {
  Vec b = task.outer_grad_theta(lambda, theta);
  SolveReport rep = solve(spec, op, b);
  HypergradientResult out;
  out.direct_term = task.outer_grad_lambda(lambda, theta);
  out.implicit_term = task.cross_dvp(lambda, theta, rep.solution);
  out.grad = out.direct_term - out.implicit_term;
  out.solver_report = std::move(rep);
  return out;
}

}  // namespace

HypergradientResult ift_hypergradient(const BilevelTask& task, const Vec& lambda,
                                      const Vec& theta, const SolverSpec& spec,
                                      Rng& rng) {
  CurvatureOperator op = build_operator(task, lambda, theta, spec, rng);
  return assemble_hypergradient(task, lambda, theta, spec, op);
}

Vec unrolled_hypergradient(const BilevelTask& task, const Vec& lambda,
                           const Vec& theta0, int steps, double eta,
                           int iterate_cap) {
  if (steps < 0) throw std::invalid_argument("unrolled: T must be >= 0");
  if (steps > iterate_cap)
    throw std::invalid_argument("unrolled: T exceeds iterate storage cap " +
                                std::to_string(iterate_cap));
  if (steps == 0) return task.outer_grad_lambda(lambda, theta0);
  if (!task.inner_hvp)
    throw std::runtime_error("unrolled: task has no inner HVP");

  std::vector<Vec> iterates;
  iterates.reserve(static_cast<std::size_t>(steps));
  Vec theta = theta0;
  for (int t = 0; t < steps; ++t) {
    iterates.push_back(theta);  // theta^t, t = 0..T-1
    theta -= eta * task.inner_grad(lambda, theta);
  }

  // Reverse sweep over the sensitivity recursion.
  Vec u = task.outer_grad_theta(lambda, theta);  // at theta^T
  Vec acc = Vec::Zero(task.outer_dim);
  for (int t = steps - 1; t >= 0; --t) {
    acc += eta * task.cross_dvp(lambda, iterates[t], u);
    if (t > 0) u -= eta * task.inner_hvp(lambda, iterates[t], u);
  }
  return task.outer_grad_lambda(lambda, theta) - acc;
}

InnerResult run_inner(const BilevelTask& task, const Vec& lambda,
                      const Vec& theta0, int steps, double lr, double momentum) {
  if (steps < 0) throw std::invalid_argument("run_inner: steps must be >= 0");
  InnerResult res;
  res.theta = theta0;
  Vec velocity = Vec::Zero(theta0.size());
  for (int s = 0; s < steps; ++s) {
    Vec g = task.inner_grad(lambda, res.theta);
    if (!g.allFinite()) {
      res.error = "non-finite inner gradient at step " + std::to_string(s);
      return res;
    }
    velocity = momentum * velocity - lr * g;
    Vec next = res.theta + velocity;
    if (!next.allFinite()) {
      res.error = "non-finite inner iterate at step " + std::to_string(s);
      return res;
    }
    res.theta = std::move(next);
    ++res.steps_done;
  }
  return res;
}

OuterLoopResult outer_loop(
    const BilevelTask& task, Vec lambda, Vec theta, const OuterLoopConfig& cfg,
    const std::function<bool(const OuterRecord&)>& callback) {
  if (cfg.outer_iters < 0 || cfg.inner_steps < 0 || cfg.refresh_interval < 1)
    throw std::invalid_argument("outer_loop: invalid config");
  if (cfg.inner_lr <= 0.0 || cfg.outer_lr <= 0.0)
    throw std::invalid_argument("outer_loop: learning rates must be > 0");

  Rng curve_rng = seed_stream(cfg.seed, "curvature");
  const bool kfac_like = cfg.solver.kind == SolverKind::Ikvp ||
                         cfg.solver.kind == SolverKind::Ekfac;

  OuterLoopResult result;
  auto& history = result.history;
  history.reserve(static_cast<std::size_t>(cfg.outer_iters));
  Vec outer_velocity = Vec::Zero(lambda.size());
  const Vec theta0 = theta;

  std::optional<KfacState> factor_cache;
  std::optional<CurvatureOperator> op_cache;

  for (int it = 0; it < cfg.outer_iters; ++it) {
    const auto t0 = Clock::now();
    OuterRecord rec;
    rec.outer_iter = it;

    InnerResult inner = run_inner(task, lambda, cfg.warm_start ? theta : theta0,
                                  cfg.inner_steps, cfg.inner_lr,
                                  cfg.inner_momentum);
    theta = inner.theta;
    if (inner.error) {
      rec.error = *inner.error;
      rec.outer_loss = task.outer_loss(lambda, theta);
      history.push_back(std::move(rec));
      break;
    }

    try {
      if (kfac_like) {
        // Curvature frozen within the refresh interval; gradients stay fresh.
        if (it % cfg.refresh_interval == 0 || !factor_cache) {
          KfacState fresh = task.make_kfac(lambda, theta, curve_rng);
          if (cfg.ema_beta > 0.0 && factor_cache)
            factor_cache = ema_update(*factor_cache, fresh, cfg.ema_beta);
          else
            factor_cache = std::move(fresh);
          const double damp = cfg.solver.lambda + task.curvature_ridge;
          if (cfg.solver.kind == SolverKind::Ikvp) {
            op_cache = CurvatureOperator::kfac(
                damp > 0.0 ? apply_damping(*factor_cache, damp, task.pi_mode)
                           : DampedKfacState::undamped(*factor_cache));
          } else {
            EkfacState ek =
                task.make_ekfac(*factor_cache, lambda, theta, curve_rng);
            op_cache = CurvatureOperator::ekfac(std::move(ek), damp);
          }
        }
      } else {
        op_cache = build_operator(task, lambda, theta, cfg.solver, curve_rng);
      }
      HypergradientResult hg =
          assemble_hypergradient(task, lambda, theta, cfg.solver, *op_cache);

      outer_velocity = cfg.outer_momentum * outer_velocity - cfg.outer_lr * hg.grad;
      lambda += outer_velocity;
      if (task.clip_lambda_unit) lambda = clip_weights(lambda);

      rec.outer_loss = task.outer_loss(lambda, theta);
      rec.hypergrad_norm = hg.grad.norm();
      rec.solver_residual = hg.solver_report.residual_norm;
      rec.solver_iters = hg.solver_report.iterations_used;
      if (task.test_metric) rec.test_metric = task.test_metric(lambda, theta);
    } catch (const std::exception& e) {
      rec.error = e.what();
      history.push_back(std::move(rec));
      break;
    }

    rec.elapsed_ms =
        std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    history.push_back(rec);
    if (callback && !callback(history.back())) break;
  }
  result.lambda = std::move(lambda);
  result.theta = std::move(theta);
  return result;
}

Vec clip_weights(const Vec& lambda) {
  return lambda.cwiseMax(0.0).cwiseMin(1.0);
}

Vec clip_subgradient(const Vec& lambda) {
  Vec out(lambda.size());
  for (Eigen::Index i = 0; i < lambda.size(); ++i)
    out[i] = (lambda[i] >= 0.0 && lambda[i] <= 1.0) ? 1.0 : 0.0;
  return out;
}

}  // namespace kbo
