#include "kbo/runner.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

namespace kbo {

namespace fs = std::filesystem;
using nlohmann::json;

std::string csv_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

namespace {

std::uint64_t unix_ms() {
  return static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::milliseconds>(
          std::chrono::system_clock::now().time_since_epoch())
          .count());
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("runner: cannot write " + path.string());
  f << text;
}

std::string history_csv(const std::vector<OuterRecord>& history) {
  std::string out =
      "outer_iter,outer_loss,test_metric,hypergrad_norm,solver_residual,"
      "solver_iters,elapsed_ms\n";
  for (const auto& r : history) {
    out += std::to_string(r.outer_iter) + "," + csv_double(r.outer_loss) + "," +
           csv_double(r.test_metric) + "," + csv_double(r.hypergrad_norm) + "," +
           csv_double(r.solver_residual) + "," + std::to_string(r.solver_iters) +
           "," + csv_double(r.elapsed_ms) + "\n";
  }
  return out;
}

Network make_linear_net(const ExperimentConfig& cfg, std::uint64_t run_seed) {
  Rng rng = seed_stream(run_seed, "init");
  Mat w(cfg.task.classes, cfg.task.input_dim + 1);
  for (Eigen::Index r = 0; r < w.rows(); ++r)
    for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = 0.01 * rng.normal();
  return Network({LinearLayer{std::move(w), Activation::Identity}});
}

}  // namespace

std::vector<double> hyperclean_baseline_trajectory(const BilevelTask& task,
                                                   const Vec& theta0,
                                                   const OuterConfig& outer) {
  Vec lambda = Vec::Ones(task.outer_dim);
  Vec theta = theta0;
  std::vector<double> traj;
  traj.reserve(static_cast<std::size_t>(outer.iters));
  for (int it = 0; it < outer.iters; ++it) {
    InnerResult res = run_inner(task, lambda, theta, outer.inner_steps,
                                outer.inner_lr, outer.inner_momentum);
    theta = res.theta;
    if (res.error) break;
    traj.push_back(task.test_metric(lambda, theta));
  }
  return traj;
}

HypercleanRun run_hyperclean_once(const HypercleanDataset& ds,
                                  const ExperimentConfig& cfg,
                                  const SolverSpec& solver, int batch_size,
                                  double ema_beta, std::uint64_t run_seed) {
  HypercleanTaskOptions topts;
  topts.alpha_reg = cfg.task.alpha_reg;
  topts.batch_size = batch_size;
  topts.curvature_full_batch = cfg.task.curvature_full_batch;
  topts.mc_samples = cfg.task.mc_samples;
  topts.seed = run_seed;
  topts.pi_mode = cfg.pi_mode();

  Network net = make_linear_net(cfg, run_seed);
  BilevelTask task = make_hyperclean_task(ds, net, topts);

  OuterLoopConfig ocfg;
  ocfg.outer_iters = cfg.outer.iters;
  ocfg.inner_steps = cfg.outer.inner_steps;
  ocfg.inner_lr = cfg.outer.inner_lr;
  ocfg.inner_momentum = cfg.outer.inner_momentum;
  ocfg.outer_lr = cfg.outer.outer_lr;
  ocfg.outer_momentum = cfg.outer.outer_momentum;
  ocfg.solver = solver;
  ocfg.refresh_interval = cfg.outer.tau;
  ocfg.ema_beta = ema_beta;
  ocfg.seed = run_seed;

  Vec lambda0 = Vec::Ones(task.outer_dim);
  Vec theta0 = flatten_params(net);
  OuterLoopResult res = outer_loop(task, lambda0, theta0, ocfg);

  HypercleanRun out;
  out.history = std::move(res.history);
  out.lambda = res.lambda;
  out.failed = !out.history.empty() && out.history.back().error.has_value();
  if (!out.history.empty()) {
    out.final_test_loss = out.history.back().test_metric;
    out.min_test_loss = out.history.front().test_metric;
    for (const auto& r : out.history)
      if (r.test_metric < out.min_test_loss) out.min_test_loss = r.test_metric;
  }
  if (!out.failed && out.lambda.size() == static_cast<Eigen::Index>(
                                              ds.corruption_mask.size())) {
    Vec score = Vec::Ones(out.lambda.size()) - out.lambda;
    out.auc = roc_auc(score, ds.corruption_mask);
  }
  return out;
}

namespace {

int run_diagnostic(const ExperimentConfig& cfg, const fs::path& dir,
                   std::vector<std::string>& files) {
  DiagnosticOptions opts;
  opts.dims = cfg.task.dims;
  opts.n = cfg.task.n;
  opts.lambda = cfg.task.lambda;
  opts.seeds.clear();
  for (int i = 0; i < cfg.task.num_seeds; ++i)
    opts.seeds.push_back(cfg.seed + static_cast<std::uint64_t>(i));
  opts.methods = cfg.task.methods;
  opts.mc_samples = cfg.task.mc_samples;
  opts.pi_mode = cfg.pi_mode();
  opts.threads = cfg.threads;

  std::cerr << "[diagnostic] running " << opts.methods.size() << " methods x "
            << opts.dims.size() << " dims x " << opts.seeds.size() << " seeds\n";
  auto records = diagnostic_study(opts);

  std::string csv = "method,d,seed,rel_error,alpha_star,wall_ms\n";
  for (const auto& r : records)
    csv += r.method + "," + std::to_string(r.d) + "," + std::to_string(r.seed) +
           "," + csv_double(r.rel_error) + "," + csv_double(r.alpha_star) + "," +
           csv_double(r.wall_ms) + "\n";
  write_file(dir / "diagnostic_summary.csv", csv);
  files.push_back("diagnostic_summary.csv");
  return 0;
}

int run_hyperclean(const ExperimentConfig& cfg, const fs::path& dir,
                   std::vector<std::string>& files) {
  HypercleanDataset ds = gen_synthetic_classification(
      cfg.task.n_train, cfg.task.n_val, cfg.task.n_test, cfg.task.classes,
      cfg.task.input_dim, cfg.task.separation, cfg.task.noise_ratio, cfg.seed,
      cfg.task.scale_groups, cfg.task.scale_decay);

  std::cerr << "[hyperclean] solver=" << cfg.solver.kind
            << " batch=" << cfg.task.batch_size << " iters=" << cfg.outer.iters
            << "\n";
  HypercleanRun run = run_hyperclean_once(ds, cfg, cfg.solver.to_spec(),
                                          cfg.task.batch_size,
                                          cfg.outer.ema_beta, cfg.seed);

  write_file(dir / "history.csv", history_csv(run.history));
  files.push_back("history.csv");

  // Baseline trained identically with all weights frozen at 1.
  HypercleanTaskOptions topts;
  topts.alpha_reg = cfg.task.alpha_reg;
  topts.batch_size = cfg.task.batch_size;
  topts.mc_samples = cfg.task.mc_samples;
  topts.seed = cfg.seed;
  topts.pi_mode = cfg.pi_mode();
  Network net = make_linear_net(cfg, cfg.seed);
  BilevelTask btask = make_hyperclean_task(ds, net, topts);
  auto base_traj =
      hyperclean_baseline_trajectory(btask, flatten_params(net), cfg.outer);
  const double base_final = base_traj.empty() ? -1.0 : base_traj.back();

  std::string csv =
      "solver,seed,final_test_loss,min_test_loss,auc,baseline_final_test_loss\n";
  csv += cfg.solver.kind + "," + std::to_string(cfg.seed) + "," +
         csv_double(run.final_test_loss) + "," + csv_double(run.min_test_loss) +
         "," + csv_double(run.auc) + "," + csv_double(base_final) + "\n";
  write_file(dir / "hyperclean_summary.csv", csv);
  files.push_back("hyperclean_summary.csv");

  std::cerr << "[hyperclean] final test loss " << run.final_test_loss
            << " (baseline " << base_final << "), AUC " << run.auc << "\n";
  return run.failed ? 2 : 0;
}

int run_toy(const ExperimentConfig& cfg, const fs::path& dir,
            std::vector<std::string>& files) {
  QuadraticBilevel toy = make_scalar_toy();
  BilevelTask task = toy.task();

  OuterLoopConfig ocfg;
  ocfg.outer_iters = cfg.outer.iters;
  ocfg.inner_steps = cfg.outer.inner_steps;
  ocfg.inner_lr = cfg.outer.inner_lr;
  ocfg.inner_momentum = cfg.outer.inner_momentum;
  ocfg.outer_lr = cfg.outer.outer_lr;
  ocfg.outer_momentum = cfg.outer.outer_momentum;
  ocfg.solver = cfg.solver.to_spec();
  ocfg.seed = cfg.seed;

  Vec lambda0 = Vec::Constant(1, cfg.task.lambda0);
  Vec theta0 = Vec::Zero(1);
  OuterLoopResult res = outer_loop(task, lambda0, theta0, ocfg);

  write_file(dir / "history.csv", history_csv(res.history));
  files.push_back("history.csv");
  std::string csv = "final_lambda,final_theta,outer_iters\n";
  csv += csv_double(res.lambda[0]) + "," + csv_double(res.theta[0]) + "," +
         std::to_string(res.history.size()) + "\n";
  write_file(dir / "toy_summary.csv", csv);
  files.push_back("toy_summary.csv");
  std::cerr << "[toy] final lambda " << res.lambda[0] << "\n";
  const bool failed =
      !res.history.empty() && res.history.back().error.has_value();
  return failed ? 2 : 0;
}

int run_sweep(const ExperimentConfig& cfg, const fs::path& dir,
              std::vector<std::string>& files) {
  std::string csv = "batch_size,solver,seed,min_test_loss,final_test_loss,auc\n";
  int status = 0;
  for (int b : cfg.task.batch_sizes) {
    for (const std::string& solver_kind : {std::string("kfac"), std::string("cg")}) {
      for (int i = 0; i < cfg.task.num_seeds; ++i) {
        const std::uint64_t run_seed = cfg.seed + static_cast<std::uint64_t>(i);
        HypercleanDataset ds = gen_synthetic_classification(
            cfg.task.n_train, cfg.task.n_val, cfg.task.n_test, cfg.task.classes,
            cfg.task.input_dim, cfg.task.separation, cfg.task.noise_ratio,
            run_seed, cfg.task.scale_groups, cfg.task.scale_decay);
        SolverSpec spec = solver_kind == "kfac"
                              ? SolverSpec::ikvp(cfg.solver.lambda)
                              : SolverSpec::cg(cfg.solver.t, cfg.solver.tol,
                                               cfg.solver.lambda);
        // Factor EMA only applies to the KFAC runs and only with minibatches.
        const double beta =
            (solver_kind == "kfac" && b > 0) ? cfg.outer.ema_beta : 0.0;
        std::cerr << "[sweep] batch=" << b << " solver=" << solver_kind
                  << " seed=" << run_seed << "\n";
        HypercleanRun run =
            run_hyperclean_once(ds, cfg, spec, b, beta, run_seed);
        if (run.failed) status = 2;
        const std::string label =
            solver_kind == "kfac" ? "kfac" : "cg-" + std::to_string(cfg.solver.t);
        const std::string hist_name = "history_b" + std::to_string(b) + "_" +
                                      label + "_s" + std::to_string(run_seed) +
                                      ".csv";
        write_file(dir / hist_name, history_csv(run.history));
        files.push_back(hist_name);
        csv += std::to_string(b) + "," + label + "," + std::to_string(run_seed) +
               "," + csv_double(run.min_test_loss) + "," +
               csv_double(run.final_test_loss) + "," + csv_double(run.auc) + "\n";
      }
    }
  }
  write_file(dir / "sweep_summary.csv", csv);
  files.push_back("sweep_summary.csv");
  return status;
}

}  // namespace

RunOutput run_experiment(const ExperimentConfig& cfg) {
  const fs::path dir(cfg.out_dir);
  fs::create_directories(dir);

  const std::uint64_t started = unix_ms();
  RunOutput out;
  switch (cfg.kind) {
    case ExperimentKind::Diagnostic:
      out.exit_code = run_diagnostic(cfg, dir, out.files);
      break;
    case ExperimentKind::Hyperclean:
      out.exit_code = run_hyperclean(cfg, dir, out.files);
      break;
    case ExperimentKind::Toy:
      out.exit_code = run_toy(cfg, dir, out.files);
      break;
    case ExperimentKind::Sweep:
      out.exit_code = run_sweep(cfg, dir, out.files);
      break;
  }

  json manifest;
  manifest["artifact_version"] = "kbo 0.1.0";
  manifest["format_version"] = cfg.format_version;
  manifest["config_hash"] = config_hash(cfg);
  manifest["base_seed"] = cfg.seed;
  std::vector<std::uint64_t> run_seeds{cfg.seed};
  if (cfg.kind == ExperimentKind::Diagnostic ||
      cfg.kind == ExperimentKind::Sweep) {
    run_seeds.clear();
    for (int i = 0; i < cfg.task.num_seeds; ++i)
      run_seeds.push_back(cfg.seed + static_cast<std::uint64_t>(i));
  }
  manifest["run_seeds"] = run_seeds;
  manifest["started_unix_ms"] = started;
  manifest["finished_unix_ms"] = unix_ms();
  manifest["files"] = out.files;
  manifest["effective_config"] = json::parse(cfg.to_json());
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
  out.files.push_back("manifest.json");
  return out;
}

}  // namespace kbo
