#include "kbo/config.hpp"

#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>
#include <stdexcept>

namespace kbo {

using nlohmann::json;

namespace {

void reject_unknown(const json& obj, const std::set<std::string>& allowed,
                    const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key()))
      throw std::invalid_argument("config: unknown key '" + it.key() + "' in " +
                                  where);
}

template <typename T>
void get_if(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument("config: " + message);
}

}  // namespace

std::string kind_name(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::Diagnostic: return "diagnostic";
    case ExperimentKind::Hyperclean: return "hyperclean";
    case ExperimentKind::Toy: return "toy";
    case ExperimentKind::Sweep: return "sweep";
  }
  return "?";
}

ExperimentKind kind_from_name(const std::string& name) {
  if (name == "diagnostic") return ExperimentKind::Diagnostic;
  if (name == "hyperclean") return ExperimentKind::Hyperclean;
  if (name == "toy") return ExperimentKind::Toy;
  if (name == "sweep") return ExperimentKind::Sweep;
  throw std::invalid_argument("config: unknown kind '" + name +
                              "' (expected diagnostic|hyperclean|toy|sweep)");
}

SolverSpec SolverConfig::to_spec() const {
  if (kind == "exact") return SolverSpec::exact(lambda);
  if (kind == "cg") return SolverSpec::cg(t, tol, lambda);
  if (kind == "neumann")
    return SolverSpec::neumann(
        k, eta > 0.0 ? std::optional<double>(eta) : std::nullopt, lambda);
  if (kind == "identity") return SolverSpec::identity();
  if (kind == "kfac") return SolverSpec::ikvp(lambda);
  if (kind == "ekfac") return SolverSpec::ekfac(lambda);
  throw std::invalid_argument("config: unknown solver kind '" + kind + "'");
}

PiMode ExperimentConfig::pi_mode() const {
  if (task.pi_mode == "dim-scaled-trace") return PiMode::DimScaledTrace;
  if (task.pi_mode == "trace-normalized") return PiMode::TraceNormalized;
  throw std::invalid_argument("config: pi_mode must be dim-scaled-trace or "
                              "trace-normalized");
}

std::string ExperimentConfig::to_json() const {
  json j;
  j["kind"] = kind_name(kind);
  j["seed"] = seed;
  j["out_dir"] = out_dir;
  j["threads"] = threads;
  j["format_version"] = format_version;

  json t;
  switch (kind) {
    case ExperimentKind::Diagnostic:
      t["ds"] = task.dims;
      t["N"] = task.n;
      t["lambda"] = task.lambda;
      t["num_seeds"] = task.num_seeds;
      t["methods"] = task.methods;
      t["mc_samples"] = task.mc_samples;
      t["pi_mode"] = task.pi_mode;
      break;
    case ExperimentKind::Hyperclean:
    case ExperimentKind::Sweep:
      t["n_train"] = task.n_train;
      t["n_val"] = task.n_val;
      t["n_test"] = task.n_test;
      t["classes"] = task.classes;
      t["input_dim"] = task.input_dim;
      t["separation"] = task.separation;
      t["noise_ratio"] = task.noise_ratio;
      t["scale_groups"] = task.scale_groups;
      t["scale_decay"] = task.scale_decay;
      t["alpha_reg"] = task.alpha_reg;
      t["batch_size"] = task.batch_size;
      t["curvature_full_batch"] = task.curvature_full_batch;
      t["mc_samples"] = task.mc_samples;
      t["pi_mode"] = task.pi_mode;
      if (kind == ExperimentKind::Sweep) {
        t["batch_sizes"] = task.batch_sizes;
        t["num_seeds"] = task.num_seeds;
      }
      break;
    case ExperimentKind::Toy:
      t["lambda0"] = task.lambda0;
      break;
  }
  j["task"] = t;

  if (kind != ExperimentKind::Diagnostic) {
    j["solver"] = {{"kind", solver.kind}, {"T", solver.t},     {"K", solver.k},
                   {"eta", solver.eta},   {"lambda", solver.lambda},
                   {"tol", solver.tol}};
    j["outer"] = {{"iters", outer.iters},
                  {"inner_steps", outer.inner_steps},
                  {"inner_lr", outer.inner_lr},
                  {"inner_momentum", outer.inner_momentum},
                  {"outer_lr", outer.outer_lr},
                  {"outer_momentum", outer.outer_momentum},
                  {"tau", outer.tau},
                  {"ema_beta", outer.ema_beta}};
  }
  return j.dump(2);
}

ExperimentConfig parse_config_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");

  reject_unknown(j, {"kind", "seed", "out_dir", "threads", "format_version",
                     "task", "solver", "outer"},
                 "top level");
  require(j.contains("kind"), "missing required key 'kind'");

  ExperimentConfig cfg;
  cfg.kind = kind_from_name(j.at("kind").get<std::string>());
  if (cfg.kind == ExperimentKind::Toy) {
    // The scalar toy wants gentle steps, not the hypercleaning schedule.
    cfg.solver.kind = "identity";
    cfg.solver.lambda = 0.0;
    cfg.outer.iters = 50;
    cfg.outer.inner_steps = 20;
    cfg.outer.inner_lr = 0.5;
    cfg.outer.inner_momentum = 0.0;
    cfg.outer.outer_lr = 0.2;
    cfg.outer.outer_momentum = 0.0;
  }
  if (cfg.kind == ExperimentKind::Sweep) {
    cfg.task.num_seeds = 3;
    cfg.solver.kind = "cg";  // the CG side of the comparison
    cfg.solver.t = 3;
    cfg.outer.ema_beta = 0.9;  // factor EMA for the minibatch KFAC runs
  }
  get_if(j, "seed", cfg.seed);
  get_if(j, "out_dir", cfg.out_dir);
  get_if(j, "threads", cfg.threads);
  get_if(j, "format_version", cfg.format_version);
  require(cfg.threads >= 1, "threads must satisfy threads >= 1");
  require(cfg.format_version == 1, "format_version must be 1");

  if (j.contains("task")) {
    const json& t = j.at("task");
    switch (cfg.kind) {
      case ExperimentKind::Diagnostic: {
        reject_unknown(t, {"ds", "N", "lambda", "num_seeds", "methods",
                           "mc_samples", "pi_mode"},
                       "task (diagnostic)");
        get_if(t, "ds", cfg.task.dims);
        get_if(t, "N", cfg.task.n);
        get_if(t, "lambda", cfg.task.lambda);
        get_if(t, "num_seeds", cfg.task.num_seeds);
        get_if(t, "methods", cfg.task.methods);
        get_if(t, "mc_samples", cfg.task.mc_samples);
        get_if(t, "pi_mode", cfg.task.pi_mode);
        require(!cfg.task.dims.empty(), "ds must be non-empty");
        for (int d : cfg.task.dims) require(d >= 1, "every d must satisfy d >= 1");
        require(cfg.task.n >= 1, "N must satisfy N >= 1");
        require(cfg.task.lambda > 0.0, "lambda must satisfy lambda > 0");
        require(cfg.task.num_seeds >= 1, "num_seeds must satisfy num_seeds >= 1");
        require(cfg.task.mc_samples >= 1, "mc_samples must satisfy mc_samples >= 1");
        break;
      }
      case ExperimentKind::Hyperclean:
      case ExperimentKind::Sweep: {
        std::set<std::string> keys{"n_train",      "n_val",
                                   "n_test",       "classes",
                                   "input_dim",    "separation",
                                   "noise_ratio",  "scale_groups",
                                   "scale_decay",  "alpha_reg",
                                   "batch_size",   "curvature_full_batch",
                                   "mc_samples",   "pi_mode"};
        if (cfg.kind == ExperimentKind::Sweep) {
          keys.insert("batch_sizes");
          keys.insert("num_seeds");
        }
        reject_unknown(t, keys, "task (" + kind_name(cfg.kind) + ")");
        get_if(t, "n_train", cfg.task.n_train);
        get_if(t, "n_val", cfg.task.n_val);
        get_if(t, "n_test", cfg.task.n_test);
        get_if(t, "classes", cfg.task.classes);
        get_if(t, "input_dim", cfg.task.input_dim);
        get_if(t, "separation", cfg.task.separation);
        get_if(t, "noise_ratio", cfg.task.noise_ratio);
        get_if(t, "scale_groups", cfg.task.scale_groups);
        get_if(t, "scale_decay", cfg.task.scale_decay);
        get_if(t, "alpha_reg", cfg.task.alpha_reg);
        get_if(t, "batch_size", cfg.task.batch_size);
        get_if(t, "curvature_full_batch", cfg.task.curvature_full_batch);
        get_if(t, "mc_samples", cfg.task.mc_samples);
        get_if(t, "pi_mode", cfg.task.pi_mode);
        get_if(t, "batch_sizes", cfg.task.batch_sizes);
        get_if(t, "num_seeds", cfg.task.num_seeds);
        require(cfg.task.classes >= 2, "classes must satisfy classes >= 2");
        require(cfg.task.n_train >= cfg.task.classes &&
                    cfg.task.n_val >= cfg.task.classes &&
                    cfg.task.n_test >= cfg.task.classes,
                "split sizes must be >= classes");
        require(cfg.task.noise_ratio >= 0.0 && cfg.task.noise_ratio <= 1.0,
                "noise_ratio must lie in [0, 1]");
        require(cfg.task.alpha_reg >= 0.0, "alpha_reg must satisfy alpha_reg >= 0");
        require(cfg.task.batch_size >= 0, "batch_size must satisfy batch_size >= 0");
        require(cfg.task.scale_groups >= 1 &&
                    cfg.task.input_dim % cfg.task.scale_groups == 0,
                "input_dim must be divisible by scale_groups");
        require(cfg.task.scale_decay > 0.0, "scale_decay must satisfy scale_decay > 0");
        require(cfg.task.mc_samples >= 1, "mc_samples must satisfy mc_samples >= 1");
        for (int b : cfg.task.batch_sizes)
          require(b >= 0, "batch_sizes entries must be >= 0 (0 = full)");
        require(cfg.task.num_seeds >= 1, "num_seeds must satisfy num_seeds >= 1");
        break;
      }
      case ExperimentKind::Toy: {
        reject_unknown(t, {"lambda0"}, "task (toy)");
        get_if(t, "lambda0", cfg.task.lambda0);
        break;
      }
    }
    cfg.pi_mode();  // validates the string
  }

  if (j.contains("solver")) {
    const json& s = j.at("solver");
    reject_unknown(s, {"kind", "T", "K", "eta", "lambda", "tol"}, "solver");
    get_if(s, "kind", cfg.solver.kind);
    get_if(s, "T", cfg.solver.t);
    get_if(s, "K", cfg.solver.k);
    get_if(s, "eta", cfg.solver.eta);
    get_if(s, "lambda", cfg.solver.lambda);
    get_if(s, "tol", cfg.solver.tol);
    require(cfg.solver.t >= 1, "solver.T must satisfy T >= 1");
    require(cfg.solver.k >= 0, "solver.K must satisfy K >= 0");
    require(cfg.solver.eta >= 0.0, "solver.eta must satisfy eta >= 0 (0 = auto)");
    require(cfg.solver.lambda >= 0.0, "solver.lambda must satisfy lambda >= 0");
    require(cfg.solver.tol > 0.0, "solver.tol must satisfy tol > 0");
    cfg.solver.to_spec();  // validates kind
  }

  if (j.contains("outer")) {
    const json& o = j.at("outer");
    reject_unknown(o,
                   {"iters", "inner_steps", "inner_lr", "inner_momentum",
                    "outer_lr", "outer_momentum", "tau", "ema_beta"},
                   "outer");
    get_if(o, "iters", cfg.outer.iters);
    get_if(o, "inner_steps", cfg.outer.inner_steps);
    get_if(o, "inner_lr", cfg.outer.inner_lr);
    get_if(o, "inner_momentum", cfg.outer.inner_momentum);
    get_if(o, "outer_lr", cfg.outer.outer_lr);
    get_if(o, "outer_momentum", cfg.outer.outer_momentum);
    get_if(o, "tau", cfg.outer.tau);
    get_if(o, "ema_beta", cfg.outer.ema_beta);
    require(cfg.outer.iters >= 0, "outer.iters must satisfy iters >= 0");
    require(cfg.outer.inner_steps >= 0,
            "outer.inner_steps must satisfy inner_steps >= 0");
    require(cfg.outer.inner_lr > 0.0, "outer.inner_lr must satisfy inner_lr > 0");
    require(cfg.outer.outer_lr > 0.0, "outer.outer_lr must satisfy outer_lr > 0");
    require(cfg.outer.inner_momentum >= 0.0 && cfg.outer.inner_momentum < 1.0,
            "outer.inner_momentum must lie in [0, 1)");
    require(cfg.outer.outer_momentum >= 0.0 && cfg.outer.outer_momentum < 1.0,
            "outer.outer_momentum must lie in [0, 1)");
    require(cfg.outer.tau >= 1, "outer.tau must satisfy tau >= 1");
    require(cfg.outer.ema_beta >= 0.0 && cfg.outer.ema_beta < 1.0,
            "outer.ema_beta must lie in [0, 1)");
  }

  return cfg;
}

ExperimentConfig parse_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("config: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  const std::string s = cfg.to_json();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace kbo
