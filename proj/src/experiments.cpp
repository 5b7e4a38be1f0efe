#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <ostream>

#include "bridgekit/cli.hpp"
#include "bridgekit/parallel.hpp"

namespace bridgekit::cli {

using nlohmann::json;

std::string format_real(double value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

void write_csv(const Table& table, std::ostream& out) {
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out << ',';
      out << cells[i];
    }
    out << '\n';
  };
  line(table.header);
  for (const auto& row : table.rows) line(row);
}

unsigned resolve_thread_flag(std::optional<unsigned> flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("BRIDGEKIT_THREADS")) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (end != env && *end == '\0' && v <= 4096) return static_cast<unsigned>(v);
  }
  return 0;
}

namespace {

struct Context {
  const RunConfig& config;
  NoiseSchedule<double> schedule;
  GaussianBridgeProblem<double> problem;
  GaussianOracle<double> oracle;
  unsigned threads;

  Context(const RunConfig& cfg, unsigned k)
      : config(cfg),
        schedule(cfg.schedule.build()),
        problem(cfg.problem.build()),
        oracle(problem, schedule),
        threads(k) {}

  Eigen::Index dim() const { return problem.dim(); }

  VectorXd condition(std::uint64_t id) const {
    if (config.condition) return *config.condition;
    return NormalStream(config.seed, StreamTag::Condition).draw<double>(id, 0, dim());
  }

  TimeGrid<double> grid(int n_steps) const {
    GridSpec<double> spec = config.grid;
    spec.n_steps = n_steps;
    return make_grid(spec, schedule);
  }

  SamplerConfig<double> sampler(Method method, double eta, TimeGrid<double> grid, bool keep_path) const {
    SamplerConfig<double> out;
    out.method = method;
    out.eta = method == Method::DBIM1 ? eta : 0.0;
    out.grid = std::move(grid);
    out.seed = config.seed;
    out.keep_path = keep_path;
    return out;
  }

  /// Posterior draws x0 ~ N(m(x_T), S) for trajectory `stream`.
  VectorXd data_draw(VecRef<double> xT, std::uint64_t stream) const {
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(problem.S());
    const MatrixXd root = eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
    return problem.posterior_mean(xT) + root * NormalStream(config.seed, StreamTag::Data).draw<double>(stream, 0, dim());
  }
};

std::vector<std::string> coord_header(const char* first, Eigen::Index d) {
  std::vector<std::string> h{first};
  for (Eigen::Index i = 0; i < d; ++i) h.push_back("coord_" + std::to_string(i));
  return h;
}

std::vector<std::string> coord_row(std::string first, const VectorXd& x) {
  std::vector<std::string> row{std::move(first)};
  for (Eigen::Index i = 0; i < x.size(); ++i) row.push_back(format_real(x(i)));
  return row;
}

std::pair<VectorXd, MatrixXd> sample_moments(const std::vector<VectorXd>& xs) {
  const Eigen::Index d = xs.front().size();
  VectorXd mean = VectorXd::Zero(d);
  for (const auto& x : xs) mean += x;
  mean /= double(xs.size());
  MatrixXd cov = MatrixXd::Zero(d, d);
  for (const auto& x : xs) cov.noalias() += (x - mean) * (x - mean).transpose();
  cov /= double(xs.size() > 1 ? xs.size() - 1 : 1);
  return {mean, cov};
}

RunResult run_sample(const Context& ctx) {
  const auto& cfg = ctx.config;
  const VectorXd xT = ctx.condition(0);
  const auto sampler = ctx.sampler(cfg.sampler.method, cfg.sampler.eta, ctx.grid(cfg.grid.n_steps), false);
  validate(sampler, ctx.schedule);
  std::vector<VectorXd> finals(cfg.trajectories);
  std::vector<int> calls(cfg.trajectories);
  parallel_for(cfg.trajectories, ctx.threads, [&](std::size_t i) {
    const auto traj = run_sampler(sampler, ctx.schedule, ctx.oracle, xT, std::uint64_t{i});
    finals[i] = traj.terminal();
    calls[i] = traj.predictor_calls;
  });

  RunResult out;
  out.table.header = coord_header("traj_id", ctx.dim());
  for (std::size_t i = 0; i < finals.size(); ++i) out.table.rows.push_back(coord_row(std::to_string(i), finals[i]));
  for (int c : calls) out.report.predictor_calls += c;
  out.report.steps_per_sample = sampler.grid.n_steps();
  if (finals.size() >= 2) {
    const auto [mean, cov] = sample_moments(finals);
    out.report.metrics["w2_to_posterior"] =
        wasserstein2_gaussian<double>(mean, cov, ctx.problem.posterior_mean(xT), ctx.problem.S());
    out.report.metrics["sqrt_trace_S"] = std::sqrt(ctx.problem.S().trace());
  }
  return out;
}

RunResult run_marginals(const Context& ctx) {
  const auto& cfg = ctx.config;
  const VectorXd xT = ctx.condition(0);
  const auto sampler = ctx.sampler(cfg.sampler.method, cfg.sampler.eta, ctx.grid(cfg.grid.n_steps), true);
  validate(sampler, ctx.schedule);
  const int n_steps = sampler.grid.n_steps();
  std::vector<Trajectory<double>> paths(cfg.trajectories);
  parallel_for(cfg.trajectories, ctx.threads, [&](std::size_t i) {
    paths[i] = run_sampler(sampler, ctx.schedule, ctx.oracle, xT, std::uint64_t{i});
  });

  RunResult out;
  out.table.header = {"t", "coord", "emp_mean", "tgt_mean", "emp_var", "tgt_var", "z"};
  double max_z = 0.0;
  double max_var_err = 0.0;
  // states[k] sits at t_{N-k}; t_N = T has a point-mass target and is skipped.
  for (int k = 1; k <= n_steps; ++k) {
    std::vector<VectorXd> batch;
    batch.reserve(paths.size());
    for (const auto& p : paths) batch.push_back(p.states[k].x);
    const double t = paths.front().states[k].t;
    const auto target = marginal_at(ctx.problem, ctx.schedule, t, xT);
    const auto rep = moment_check(batch, t, target.mean, target.cov);
    for (Eigen::Index j = 0; j < ctx.dim(); ++j) {
      out.table.rows.push_back({format_real(t), std::to_string(j), format_real(rep.empirical_mean(j)),
                                format_real(rep.target_mean(j)), format_real(rep.empirical_cov(j, j)),
                                format_real(rep.target_cov(j, j)), format_real(rep.z_scores(j))});
    }
    max_z = std::max(max_z, rep.max_abs_z());
    max_var_err = std::max(max_var_err, rep.max_var_rel_err());
  }
  for (const auto& p : paths) out.report.predictor_calls += p.predictor_calls;
  out.report.steps_per_sample = n_steps;
  out.report.metrics["max_abs_z"] = max_z;
  out.report.metrics["max_var_rel_err"] = max_var_err;
  return out;
}

RunResult run_drift_check(const Context& ctx) {
  const auto& cfg = ctx.config;
  const double T = ctx.schedule.horizon();
  const NormalStream normals(cfg.seed, StreamTag::Data);
  std::vector<double> times(cfg.drift_points);
  std::vector<double> devs(cfg.drift_points);
  parallel_for(cfg.drift_points, ctx.threads, [&](std::size_t i) {
    const double t = T * (0.01 + 0.98 * normals.uniform(i, 0));
    const VectorXd x = normals.draw<double>(i, 1, ctx.dim());
    const VectorXd xT = normals.draw<double>(i, 2, ctx.dim());
    const VectorXd d1 = drift_dbim<double>(ctx.schedule, ctx.oracle, x, t, xT);
    const VectorXd d2 = drift_pfode<double>(ctx.schedule, ctx.oracle, x, t, xT);
    times[i] = t;
    devs[i] = (d1 - d2).norm() / std::max(d2.norm(), 1e-300);
  });

  RunResult out;
  out.table.header = {"schedule", "sample_id", "t", "rel_dev"};
  const std::string kind(to_string(ctx.schedule.kind()));
  double worst = 0.0;
  for (std::size_t i = 0; i < devs.size(); ++i) {
    out.table.rows.push_back({kind, std::to_string(i), format_real(times[i]), format_real(devs[i])});
    worst = std::max(worst, devs[i]);
  }
  out.report.predictor_calls = static_cast<long>(2 * devs.size());
  out.report.metrics["max_rel_dev"] = worst;
  return out;
}

RunResult run_convergence(const Context& ctx) {
  const auto& cfg = ctx.config;
  const VectorXd xT = ctx.condition(0);
  const std::size_t n_traj = cfg.trajectories;
  const bool exact_reference = cfg.convergence_reference == "exact";

  RunResult out;
  out.table.header = {"method", "eta", "n_steps", "terminal_err"};
  for (Method method : cfg.sampler.methods) {
    std::vector<double> errors;
    for (int n : cfg.sampler.n_sweep) {
      const auto grid = ctx.grid(n);
      const auto sampler = ctx.sampler(method, 0.0, grid, false);
      const auto reference = ctx.sampler(Method::DBIM1, 0.0, grid, false);
      validate(sampler, ctx.schedule);
      std::vector<double> err(n_traj);
      std::vector<int> calls(n_traj);
      parallel_for(n_traj, ctx.threads, [&](std::size_t i) {
        const VectorXd eps = draw_boot_noise<double>(cfg.seed, i, ctx.dim());
        const auto traj = run_sampler(sampler, ctx.schedule, ctx.oracle, xT, eps, i);
        VectorXd ref;
        if (exact_reference) {
          const VectorXd boot = boot_step<double>(ctx.schedule, ctx.oracle, xT, grid[n - 1], eps);
          ref = exact_flow<double>(ctx.problem, ctx.schedule, boot, grid[n - 1], grid[0], xT);
        } else {
          ref = run_sampler(reference, ctx.schedule, ctx.oracle, xT, eps, i).terminal();
        }
        err[i] = (traj.terminal() - ref).norm();
        calls[i] = traj.predictor_calls;
      });
      double mean_err = 0.0;
      for (double e : err) mean_err += e;
      mean_err /= double(n_traj);
      errors.push_back(mean_err);
      for (int c : calls) out.report.predictor_calls += c;
      out.table.rows.push_back({std::string(to_string(method)), format_real(0.0), std::to_string(n), format_real(mean_err)});
    }
    bool positive = true;
    for (double e : errors) positive = positive && e > 0.0;
    if (positive) out.report.metrics["slope_" + std::string(to_string(method))] = fit_order(cfg.sampler.n_sweep, errors);
  }
  return out;
}

RunResult run_roundtrip(const Context& ctx) {
  const auto& cfg = ctx.config;
  const VectorXd xT = ctx.condition(0);
  const auto grid = ctx.grid(cfg.grid.n_steps);
  std::vector<double> errs(cfg.trajectories);
  parallel_for(cfg.trajectories, ctx.threads, [&](std::size_t i) {
    const VectorXd x0 = ctx.data_draw(xT, i);
    const VectorXd eps = encode<double>(ctx.schedule, ctx.oracle, x0, xT, grid);
    const VectorXd back = decode<double>(ctx.schedule, ctx.oracle, eps, xT, grid);
    errs[i] = (back - x0).norm() / std::max(x0.norm(), 1e-300);
  });

  RunResult out;
  out.table.header = {"traj_id", "recon_rel_err"};
  double worst = 0.0;
  for (std::size_t i = 0; i < errs.size(); ++i) {
    out.table.rows.push_back({std::to_string(i), format_real(errs[i])});
    worst = std::max(worst, errs[i]);
  }
  out.report.steps_per_sample = grid.n_steps();
  out.report.metrics["max_recon_rel_err"] = worst;
  return out;
}

RunResult run_interpolate(const Context& ctx) {
  const auto& cfg = ctx.config;
  const VectorXd xT = ctx.condition(0);
  const auto grid = ctx.grid(cfg.grid.n_steps);
  const VectorXd eps_a = draw_boot_noise<double>(cfg.seed, 0, ctx.dim());
  const VectorXd eps_b = draw_boot_noise<double>(cfg.seed, 1, ctx.dim());
  const std::size_t points = cfg.interpolation_points;
  std::vector<double> weights(points);
  std::vector<VectorXd> decoded(points);
  parallel_for(points, ctx.threads, [&](std::size_t k) {
    weights[k] = double(k) / double(points - 1);
    const VectorXd eps = slerp_interpolate(eps_a, eps_b, weights[k]);
    decoded[k] = decode<double>(ctx.schedule, ctx.oracle, eps, xT, grid);
  });

  RunResult out;
  out.table.header = coord_header("w", ctx.dim());
  for (std::size_t k = 0; k < points; ++k) out.table.rows.push_back(coord_row(format_real(weights[k]), decoded[k]));
  const VectorXd end_a = decode<double>(ctx.schedule, ctx.oracle, eps_a, xT, grid);
  const VectorXd end_b = decode<double>(ctx.schedule, ctx.oracle, eps_b, xT, grid);
  out.report.metrics["endpoint_max_abs_dev"] =
      std::max((decoded.front() - end_a).cwiseAbs().maxCoeff(), (decoded.back() - end_b).cwiseAbs().maxCoeff());
  out.report.steps_per_sample = grid.n_steps();
  return out;
}

RunResult run_diversity(const Context& ctx) {
  const auto& cfg = ctx.config;
  const std::size_t n_cond = cfg.conditions;
  const std::size_t k_samples = cfg.samples_per_condition;
  const auto& sweep = cfg.sampler.n_sweep;
  // scores[c][j] for condition c and sweep entry j.
  std::vector<std::vector<double>> scores(n_cond, std::vector<double>(sweep.size()));
  std::vector<TimeGrid<double>> grids;
  for (int n : sweep) grids.push_back(ctx.grid(n));

  parallel_for(n_cond, ctx.threads, [&](std::size_t c) {
    const VectorXd xT = ctx.condition(c);
    for (std::size_t j = 0; j < sweep.size(); ++j) {
      const auto sampler = ctx.sampler(cfg.sampler.method, cfg.sampler.eta, grids[j], false);
      std::vector<VectorXd> samples(k_samples);
      for (std::size_t k = 0; k < k_samples; ++k) {
        const std::uint64_t stream = c * k_samples + k;
        samples[k] = run_sampler(sampler, ctx.schedule, ctx.oracle, xT, stream).terminal();
      }
      scores[c][j] = diversity_score(samples);
    }
  });

  RunResult out;
  out.table.header = {"condition_id", "n_steps", "eta", "score"};
  std::vector<double> mean_scores(sweep.size(), 0.0);
  for (std::size_t c = 0; c < n_cond; ++c) {
    for (std::size_t j = 0; j < sweep.size(); ++j) {
      out.table.rows.push_back(
          {std::to_string(c), std::to_string(sweep[j]), format_real(cfg.sampler.eta), format_real(scores[c][j])});
      mean_scores[j] += scores[c][j] / double(n_cond);
    }
  }
  for (std::size_t j = 0; j < sweep.size(); ++j) {
    out.report.metrics["mean_score_n" + std::to_string(sweep[j])] = mean_scores[j];
  }
  out.report.metrics["posterior_spread"] = ctx.problem.S().diagonal().cwiseMax(0.0).cwiseSqrt().mean();
  return out;
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Nearest existing ancestor of `dir` must be a writable directory.
bool output_location_usable(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::path probe = fs::absolute(dir, ec);
  if (ec) return false;
  while (!fs::exists(probe, ec)) {
    if (!probe.has_parent_path() || probe.parent_path() == probe) return false;
    probe = probe.parent_path();
  }
  return fs::is_directory(probe, ec) && ::access(probe.c_str(), W_OK) == 0;
}

}  // namespace

RunResult execute(const RunConfig& config, unsigned threads) {
  const auto start = std::chrono::steady_clock::now();
  const Context ctx(config, resolve_threads(threads));
  RunResult result;
  switch (config.experiment) {
    case Experiment::Sample: result = run_sample(ctx); break;
    case Experiment::Marginals: result = run_marginals(ctx); break;
    case Experiment::DriftCheck: result = run_drift_check(ctx); break;
    case Experiment::Convergence: result = run_convergence(ctx); break;
    case Experiment::Roundtrip: result = run_roundtrip(ctx); break;
    case Experiment::Interpolate: result = run_interpolate(ctx); break;
    case Experiment::Diversity: result = run_diversity(ctx); break;
  }
  result.report.experiment = to_string(config.experiment);
  result.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!result.report.all_finite()) throw Error(ErrorKind::DegenerateCoefficient, "a reported metric is not finite");
  return result;
}

int run_command(const std::filesystem::path& config_path, const std::optional<std::filesystem::path>& out_dir,
                std::optional<std::uint64_t> seed, unsigned threads, std::ostream& log) {
  RunConfig config;
  std::filesystem::path dir;
  try {
    config = load_config(config_path);
    if (seed) config.seed = *seed;
    if (out_dir) {
      dir = *out_dir;
    } else if (!config.output.empty()) {
      dir = config.output;
    } else {
      throw ConfigError("no output directory: pass --out or set 'output' in the config");
    }
    if (!output_location_usable(dir)) throw ConfigError("output directory is not writable: " + dir.string());
  } catch (const ConfigError& e) {
    log << "config invalid: " << e.what() << '\n';
    return kExitConfigInvalid;
  }

  RunResult result;
  try {
    result = execute(config, threads);
  } catch (const Error& e) {
    log << "numerical failure in " << to_string(config.experiment) << ": " << e.what() << '\n';
    return kExitNumericalFailure;
  }

  json metrics = json::object();
  for (const auto& [name, value] : result.report.metrics) metrics[name] = value;
  const json report{
      {"version", std::string(kVersion)},
      {"seed", config.seed},
      {"experiment", result.report.experiment},
      {"config", to_json(config)},
      {"metrics", metrics},
      {"wall_seconds", result.report.wall_seconds},
      {"predictor_calls", result.report.predictor_calls},
      {"nfe", result.report.steps_per_sample},
      {"threads", resolve_threads(threads)},
      {"finished_at", utc_timestamp()},
  };

  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  const auto csv_path = dir / (to_string(config.experiment) + ".csv");
  std::ofstream csv(csv_path, std::ios::binary);
  write_csv(result.table, csv);
  std::ofstream rep(dir / "report.json");
  rep << report.dump(2) << '\n';
  if (!csv || !rep) {
    log << "failed to write results under " << dir.string() << '\n';
    return kExitNumericalFailure;
  }
  log << "wrote " << csv_path.string() << " (" << result.table.rows.size() << " rows)\n";
  return kExitOk;
}

}  // namespace bridgekit::cli
