#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bridgekit/bridge.hpp"
#include "bridgekit/core.hpp"
#include "bridgekit/oracle.hpp"
#include "bridgekit/random.hpp"
#include "bridgekit/schedule.hpp"

namespace bridgekit {

enum class Method { DBIM1, DBIM2, DBIM3, PfOdeEuler, PfOdeHeun, SdeEulerMaruyama };

constexpr std::string_view to_string(Method method) {
  switch (method) {
    case Method::DBIM1: return "dbim1";
    case Method::DBIM2: return "dbim2";
    case Method::DBIM3: return "dbim3";
    case Method::PfOdeEuler: return "pfode_euler";
    case Method::PfOdeHeun: return "pfode_heun";
    case Method::SdeEulerMaruyama: return "sde_em";
  }
  return "unknown";
}

inline std::optional<Method> method_from_string(std::string_view name) {
  for (Method m : {Method::DBIM1, Method::DBIM2, Method::DBIM3, Method::PfOdeEuler, Method::PfOdeHeun,
                   Method::SdeEulerMaruyama}) {
    if (to_string(m) == name) return m;
  }
  return std::nullopt;
}

template <typename Scalar = double>
struct SamplerConfig {
  Method method = Method::DBIM1;
  Scalar eta = Scalar(0);
  TimeGrid<Scalar> grid;
  std::uint64_t seed = 0;
  /// Keep every grid state, or only x_T and the final state.
  bool keep_path = true;
};

template <typename Scalar = double>
struct TrajectoryPoint {
  Scalar t;
  Vector<Scalar> x;
};

template <typename Scalar = double>
struct Trajectory {
  /// From t_N = T down to t_0 (only the two endpoints when keep_path is off).
  std::vector<TrajectoryPoint<Scalar>> states;
  Vector<Scalar> boot_noise;
  int predictor_calls = 0;

  const Vector<Scalar>& terminal() const { return states.back().x; }
};

/// Checks a configuration against a schedule; returns non-fatal warnings.
template <typename Scalar>
std::vector<std::string> validate(const SamplerConfig<Scalar>& config, const NoiseSchedule<Scalar>& schedule) {
  using std::abs;
  std::vector<std::string> warnings;
  const auto& grid = config.grid;
  if (grid.times.size() < 2) throw Error(ErrorKind::InvalidGridParams, "grid needs at least two times");
  if (abs(grid.t_max() - schedule.horizon()) > Scalar(1e-12) * schedule.horizon()) {
    throw Error(ErrorKind::InvalidGridParams, "grid must end at the schedule horizon T");
  }
  if (!(config.eta >= 0) || !(config.eta <= 1)) throw Error(ErrorKind::InvalidArgument, "eta must lie in [0, 1]");
  const int n = grid.n_steps();
  if (config.method == Method::DBIM2 && n < 2) throw Error(ErrorKind::InvalidGridParams, "DBIM2 needs N >= 2");
  if (config.method == Method::DBIM3 && n < 3) throw Error(ErrorKind::InvalidGridParams, "DBIM3 needs N >= 3");
  if (config.method != Method::DBIM1 && config.eta != 0) {
    warnings.push_back("eta is ignored by method " + std::string(to_string(config.method)));
  }
  return warnings;
}

template <typename Scalar = double>
Vector<Scalar> draw_boot_noise(std::uint64_t seed, std::uint64_t stream, Eigen::Index dim) {
  return NormalStream(seed, StreamTag::BootNoise).draw<Scalar>(stream, 0, dim);
}

// ---------------------------------------------------------------------------
// First-order DBIM

/// Leaves t = T: x_{t'} = a_{t'} x_T + b_{t'} x_theta(x_T, T, x_T) + c_{t'} eps.
template <typename Scalar>
Vector<Scalar> boot_step(const NoiseSchedule<Scalar>& schedule, const DataPredictor<Scalar>& predictor,
                         VecRef<Scalar> xT, Scalar t_target, VecRef<Scalar> eps) {
  detail::require_same_size(xT, eps, "boot_step");
  if (!(t_target < schedule.horizon())) throw Error(ErrorKind::TimeOutOfRange, "boot target must lie below T");
  const Vector<Scalar> x_hat = predictor.predict(xT, schedule.horizon(), xT);
  const auto k = coeffs(schedule, t_target);
  return k.a * xT + k.b * x_hat + k.c * eps;
}

/// One DBIM update from t_{n+1} to t_n given the data prediction at t_{n+1}.
template <typename Scalar>
Vector<Scalar> dbim_step(const NoiseSchedule<Scalar>& schedule, Scalar rho_n, VecRef<Scalar> x_next,
                         VecRef<Scalar> xT, VecRef<Scalar> x_hat, Scalar t_n, Scalar t_next, VecRef<Scalar> eps) {
  detail::require_same_size(x_next, xT, "dbim_step");
  detail::require_same_size(x_next, x_hat, "dbim_step");
  if (!(t_next > t_n)) throw Error(ErrorKind::InvalidArgument, "dbim_step needs t_n < t_{n+1}");
  const auto kn = coeffs(schedule, t_n);
  const auto kn1 = coeffs(schedule, t_next);
  if (!(rho_n >= 0) || rho_n > kn.c) throw Error(ErrorKind::InvalidArgument, "rho_n outside [0, c_{t_n}]");

  Vector<Scalar> out = kn.a * xT + kn.b * x_hat;
  const Scalar carry = detail::residual_scale(kn.c, rho_n);
  if (carry != 0) {
    if (kn1.c == 0) {
      throw Error(ErrorKind::InitialStepSingularity, "deterministic step out of t = T; route through boot_step");
    }
    out += (carry / kn1.c) * (x_next - kn1.a * xT - kn1.b * x_hat);
  }
  if (rho_n != 0) {
    detail::require_same_size(x_next, eps, "dbim_step");
    out += rho_n * eps;
  }
  return out;
}

/// Coefficients of (x_{t_{n+1}}, x_T, x_hat) in the noise-free part of dbim_step.
template <typename Scalar = double>
struct StepCoefficients {
  Scalar state;
  Scalar condition;
  Scalar prediction;
};

template <typename Scalar>
StepCoefficients<Scalar> dbim_step_coefficients(const NoiseSchedule<Scalar>& schedule, Scalar rho_n, Scalar t_n,
                                                Scalar t_next) {
  const auto kn = coeffs(schedule, t_n);
  const auto kn1 = coeffs(schedule, t_next);
  const Scalar carry = detail::residual_scale(kn.c, rho_n);
  if (carry == 0) return {Scalar(0), kn.a, kn.b};
  if (kn1.c == 0) throw Error(ErrorKind::InitialStepSingularity, "c_{t_{n+1}} = 0");
  const Scalar ratio = carry / kn1.c;
  return {ratio, kn.a - ratio * kn1.a, kn.b - ratio * kn1.b};
}

namespace detail {

template <typename Scalar>
Trajectory<Scalar> start_trajectory(const SamplerConfig<Scalar>& config, const NoiseSchedule<Scalar>& schedule,
                                    const DataPredictor<Scalar>& predictor, VecRef<Scalar> xT,
                                    VecRef<Scalar> boot_noise) {
  detail::require_same_size(xT, boot_noise, "sampler");
  if (xT.size() != predictor.dim()) throw Error(ErrorKind::DimensionMismatch, "x_T does not match predictor");
  const auto& grid = config.grid;
  const int n = grid.n_steps();
  Trajectory<Scalar> traj;
  traj.boot_noise = boot_noise;
  traj.states.reserve(config.keep_path ? n + 1 : 2);
  traj.states.push_back({grid[n], xT});
  traj.states.push_back({grid[n - 1], boot_step(schedule, predictor, xT, grid[n - 1], boot_noise)});
  traj.predictor_calls = 1;
  return traj;
}

template <typename Scalar>
void push_state(Trajectory<Scalar>& traj, bool keep_path, Scalar t, Vector<Scalar> x) {
  if (keep_path || traj.states.size() < 2) {
    traj.states.push_back({t, std::move(x)});
  } else {
    traj.states.back() = {t, std::move(x)};
  }
}

}  // namespace detail

/// DBIM with per-step variance set by eta: boot step, then N - 1 updates.
/// Step noise for trajectory `stream` is drawn from (config.seed, stream, n).
template <typename Scalar>
Trajectory<Scalar> run_dbim1(const SamplerConfig<Scalar>& config, const NoiseSchedule<Scalar>& schedule,
                             const DataPredictor<Scalar>& predictor, VecRef<Scalar> xT, VecRef<Scalar> boot_noise,
                             std::uint64_t stream = 0) {
  const auto& grid = config.grid;
  const int n_steps = grid.n_steps();
  const auto variance = make_rhos(schedule, grid, config.eta);
  const NormalStream noise(config.seed, StreamTag::StepNoise);
  const Vector<Scalar> no_noise = Vector<Scalar>::Zero(xT.size());

  auto traj = detail::start_trajectory(config, schedule, predictor, xT, boot_noise);
  Vector<Scalar> x = traj.states.back().x;
  for (int n = n_steps - 2; n >= 0; --n) {
    const Vector<Scalar> x_hat = predictor.predict(x, grid[n + 1], xT);
    ++traj.predictor_calls;
    const Scalar rho = variance.rhos[n];
    if (rho > 0) {
      x = dbim_step<Scalar>(schedule, rho, x, xT, x_hat, grid[n], grid[n + 1],
                            noise.draw<Scalar>(stream, static_cast<std::uint32_t>(n), xT.size()));
    } else {
      x = dbim_step<Scalar>(schedule, rho, x, xT, x_hat, grid[n], grid[n + 1], no_noise);
    }
    detail::push_state(traj, config.keep_path, grid[n], x);
  }
  return traj;
}

// ---------------------------------------------------------------------------
// High-order DBIM (exponential integrator in lambda = log(b / c))

namespace detail {

/// (1 - e^-h, h - 1 + e^-h, h^2/2 - h + 1 - e^-h)
template <typename Scalar>
std::array<Scalar, 3> taylor_weights(Scalar h) {
  using std::expm1;
  if (h < Scalar(0.1)) {
    // sum_k (-h)^k / k! split by the leading power.
    std::array<Scalar, 3> w{Scalar(0), Scalar(0), Scalar(0)};
    Scalar term = Scalar(1);
    for (int k = 1; k <= 24; ++k) {
      term *= -h / Scalar(k);
      if (k >= 1) w[0] -= term;
      if (k >= 2) w[1] += term;
      if (k >= 3) w[2] -= term;
    }
    return w;
  }
  const Scalar em = expm1(-h);
  return {-em, h + em, h * h / Scalar(2) - h - em};
}

}  // namespace detail

/// Taylor approximation of the integral of e^lambda x_theta over [lambda_t, lambda_s].
/// order 2 uses (x_hat, d1); order 3 adds d2.
template <typename Scalar>
Vector<Scalar> taylor_integral(int order, Scalar lambda_s, Scalar lambda_t, VecRef<Scalar> x_hat,
                               VecRef<Scalar> x_hat_d1, VecRef<Scalar> x_hat_d2) {
  using std::exp;
  if (order != 2 && order != 3) throw Error(ErrorKind::InvalidArgument, "Taylor order must be 2 or 3");
  const Scalar h = lambda_s - lambda_t;
  if (!(h > 0)) throw Error(ErrorKind::NonpositiveStep, "need lambda_s > lambda_t");
  detail::require_same_size(x_hat, x_hat_d1, "taylor_integral");
  const auto w = detail::taylor_weights(h);
  Vector<Scalar> out = w[0] * x_hat + w[1] * x_hat_d1;
  if (order == 3) {
    detail::require_same_size(x_hat, x_hat_d2, "taylor_integral");
    out += w[2] * x_hat_d2;
  }
  return exp(lambda_s) * out;
}

/// High-order DBIM: boot step, then exponential-integrator updates whose x_theta
/// derivatives come from finite differences of stored predictions. The t = T
/// prediction is the first history entry; its lambda is -inf, so divided
/// differences against it vanish.
template <typename Scalar>
Trajectory<Scalar> run_dbim_high(const SamplerConfig<Scalar>& config, int order, const NoiseSchedule<Scalar>& schedule,
                                 const DataPredictor<Scalar>& predictor, VecRef<Scalar> xT,
                                 VecRef<Scalar> boot_noise) {
  if (order != 2 && order != 3) throw Error(ErrorKind::InvalidArgument, "high-order DBIM supports orders 2 and 3");
  const auto& grid = config.grid;
  const int n_steps = grid.n_steps();
  if (n_steps < order) throw Error(ErrorKind::InvalidGridParams, "high-order DBIM needs N >= order");
  const Scalar T = schedule.horizon();
  const Eigen::Index d = xT.size();
  constexpr Scalar kMinusInf = -std::numeric_limits<Scalar>::infinity();

  // Predictions at t_{i+1} and t_{i+2} with their lambdas.
  struct Past {
    Scalar lambda;
    Vector<Scalar> x_hat;
  };
  Past u1{kMinusInf, predictor.predict(xT, T, xT)};
  Past u2{kMinusInf, Vector<Scalar>::Zero(d)};

  Trajectory<Scalar> traj;
  traj.boot_noise = boot_noise;
  traj.states.push_back({grid[n_steps], xT});
  {
    detail::require_same_size(xT, boot_noise, "run_dbim_high");
    const auto k = coeffs(schedule, grid[n_steps - 1]);
    traj.states.push_back({grid[n_steps - 1], k.a * xT + k.b * u1.x_hat + k.c * boot_noise});
  }
  traj.predictor_calls = 1;
  Vector<Scalar> x = traj.states.back().x;
  const Vector<Scalar> zero = Vector<Scalar>::Zero(d);

  for (int i = n_steps - 1; i >= 1; --i) {
    const Scalar s = grid[i - 1];
    const Scalar t = grid[i];
    const auto ks = coeffs(schedule, s);
    const auto kt = coeffs(schedule, t);
    Vector<Scalar> x_hat = predictor.predict(x, t, xT);
    ++traj.predictor_calls;

    Vector<Scalar> integral;
    if (order == 2 || i == n_steps - 1) {
      const Vector<Scalar> d1 = u1.lambda == kMinusInf ? zero : Vector<Scalar>((x_hat - u1.x_hat) / (kt.lambda - u1.lambda));
      integral = taylor_integral<Scalar>(2, ks.lambda, kt.lambda, x_hat, d1, zero);
    } else {
      const Scalar h1 = kt.lambda - u1.lambda;
      const Vector<Scalar> diff1 = (x_hat - u1.x_hat) / h1;
      Vector<Scalar> d1;
      Vector<Scalar> d2;
      if (u2.lambda == kMinusInf) {
        // h2 -> inf limit of the two-point formulas.
        d1 = diff1;
        d2 = zero;
      } else {
        const Scalar h2 = u1.lambda - u2.lambda;
        const Vector<Scalar> diff2 = (u1.x_hat - u2.x_hat) / h2;
        d1 = (diff1 * (Scalar(2) * h1 + h2) - diff2 * h1) / (h1 + h2);
        d2 = Scalar(2) * (diff1 - diff2) / (h1 + h2);
      }
      integral = taylor_integral<Scalar>(3, ks.lambda, kt.lambda, x_hat, d1, d2);
    }
    const Scalar ratio = ks.c / kt.c;
    x = ratio * x + (ks.a - ratio * kt.a) * xT + ks.c * integral;
    detail::push_state(traj, config.keep_path, s, x);

    u2 = std::move(u1);
    u1 = Past{kt.lambda, std::move(x_hat)};
  }
  return traj;
}

// ---------------------------------------------------------------------------
// Drifts

/// Drift of the induced ODE d(x/c) = x_T d(a/c) + x_theta d(b/c), written in dt form
/// through f and g.
template <typename Scalar>
Vector<Scalar> drift_dbim(const NoiseSchedule<Scalar>& schedule, const DataPredictor<Scalar>& predictor,
                          VecRef<Scalar> x, Scalar t, VecRef<Scalar> xT) {
  const auto k = coeffs(schedule, t);
  if (k.c == 0) throw Error(ErrorKind::DegenerateCoefficient, "drift is singular at t = T");
  const Vector<Scalar> x_hat = predictor.predict(x, t, xT);
  const Scalar g2 = schedule.g2(t);
  const Scalar half_g2_over_c2 = g2 / (Scalar(2) * k.c * k.c);
  const Scalar log_c_rate = schedule.f(t) + g2 / schedule.sigma2(t) - half_g2_over_c2;
  return log_c_rate * x + half_g2_over_c2 * (k.a * xT - k.b * x_hat);
}

/// Probability-flow ODE drift f x - g^2 (score / 2 - grad log q(x_T | x_t)).
template <typename Scalar>
Vector<Scalar> drift_pfode(const NoiseSchedule<Scalar>& schedule, const DataPredictor<Scalar>& predictor,
                           VecRef<Scalar> x, Scalar t, VecRef<Scalar> xT) {
  const auto k = coeffs(schedule, t);
  if (k.c == 0) throw Error(ErrorKind::DegenerateCoefficient, "drift is singular at t = T");
  const Vector<Scalar> x_hat = predictor.predict(x, t, xT);
  const Vector<Scalar> score = score_from_predictor<Scalar>(schedule, x, t, xT, x_hat);
  const Scalar alpha_ratio = schedule.alpha(schedule.horizon()) / schedule.alpha(t);
  const Vector<Scalar> h_score = -k.a * (alpha_ratio * x - xT) / (k.c * k.c);
  return schedule.f(t) * x - schedule.g2(t) * (Scalar(0.5) * score - h_score);
}

/// Reverse-SDE drift f x - g^2 (score - grad log q(x_T | x_t)).
template <typename Scalar>
Vector<Scalar> drift_sde(const NoiseSchedule<Scalar>& schedule, const DataPredictor<Scalar>& predictor,
                         VecRef<Scalar> x, Scalar t, VecRef<Scalar> xT) {
  const auto k = coeffs(schedule, t);
  if (k.c == 0) throw Error(ErrorKind::DegenerateCoefficient, "drift is singular at t = T");
  const Vector<Scalar> x_hat = predictor.predict(x, t, xT);
  const Vector<Scalar> score = score_from_predictor<Scalar>(schedule, x, t, xT, x_hat);
  const Scalar alpha_ratio = schedule.alpha(schedule.horizon()) / schedule.alpha(t);
  const Vector<Scalar> h_score = -k.a * (alpha_ratio * x - xT) / (k.c * k.c);
  return schedule.f(t) * x - schedule.g2(t) * (score - h_score);
}

// ---------------------------------------------------------------------------
// Baselines: explicit integrators started after the boot step

template <typename Scalar>
Trajectory<Scalar> run_baseline(const SamplerConfig<Scalar>& config, const NoiseSchedule<Scalar>& schedule,
                                const DataPredictor<Scalar>& predictor, VecRef<Scalar> xT, VecRef<Scalar> boot_noise,
                                std::uint64_t stream = 0) {
  using std::sqrt;
  const auto& grid = config.grid;
  const int n_steps = grid.n_steps();
  const NormalStream noise(config.seed, StreamTag::StepNoise);

  auto traj = detail::start_trajectory(config, schedule, predictor, xT, boot_noise);
  Vector<Scalar> x = traj.states.back().x;
  for (int n = n_steps - 2; n >= 0; --n) {
    const Scalar t = grid[n + 1];
    const Scalar s = grid[n];
    const Scalar dt = s - t;
    switch (config.method) {
      case Method::PfOdeEuler:
        x += dt * drift_pfode<Scalar>(schedule, predictor, x, t, xT);
        traj.predictor_calls += 1;
        break;
      case Method::PfOdeHeun: {
        const Vector<Scalar> d1 = drift_pfode<Scalar>(schedule, predictor, x, t, xT);
        const Vector<Scalar> predicted = x + dt * d1;
        const Vector<Scalar> d2 = drift_pfode<Scalar>(schedule, predictor, predicted, s, xT);
        x += dt * (d1 + d2) / Scalar(2);
        traj.predictor_calls += 2;
        break;
      }
      case Method::SdeEulerMaruyama:
        x += dt * drift_sde<Scalar>(schedule, predictor, x, t, xT) +
             sqrt(schedule.g2(t) * -dt) * noise.draw<Scalar>(stream, static_cast<std::uint32_t>(n), x.size());
        traj.predictor_calls += 1;
        break;
      default:
        throw Error(ErrorKind::InvalidArgument, "run_baseline handles PF-ODE and SDE methods only");
    }
    detail::push_state(traj, config.keep_path, s, x);
  }
  return traj;
}

/// Dispatches on config.method.
template <typename Scalar>
Trajectory<Scalar> run_sampler(const SamplerConfig<Scalar>& config, const NoiseSchedule<Scalar>& schedule,
                               const DataPredictor<Scalar>& predictor, VecRef<Scalar> xT, VecRef<Scalar> boot_noise,
                               std::uint64_t stream = 0) {
  validate(config, schedule);
  switch (config.method) {
    case Method::DBIM1: return run_dbim1(config, schedule, predictor, xT, boot_noise, stream);
    case Method::DBIM2: return run_dbim_high(config, 2, schedule, predictor, xT, boot_noise);
    case Method::DBIM3: return run_dbim_high(config, 3, schedule, predictor, xT, boot_noise);
    default: return run_baseline(config, schedule, predictor, xT, boot_noise, stream);
  }
}

/// Same, with boot noise drawn from (config.seed, stream).
template <typename Scalar>
Trajectory<Scalar> run_sampler(const SamplerConfig<Scalar>& config, const NoiseSchedule<Scalar>& schedule,
                               const DataPredictor<Scalar>& predictor, VecRef<Scalar> xT, std::uint64_t stream) {
  const Vector<Scalar> eps = draw_boot_noise<Scalar>(config.seed, stream, xT.size());
  return run_sampler(config, schedule, predictor, xT, eps, stream);
}

// ---------------------------------------------------------------------------
// Deterministic encoding, decoding and latent interpolation

template <typename Scalar>
SamplerConfig<Scalar> deterministic_config(TimeGrid<Scalar> grid) {
  SamplerConfig<Scalar> config;
  config.method = Method::DBIM1;
  config.eta = Scalar(0);
  config.grid = std::move(grid);
  config.keep_path = false;
  return config;
}

/// eta = 0 DBIM from a given boot noise; returns x_{t_0}.
template <typename Scalar>
Vector<Scalar> decode(const NoiseSchedule<Scalar>& schedule, const DataPredictor<Scalar>& predictor,
                      VecRef<Scalar> boot_noise, VecRef<Scalar> xT, const TimeGrid<Scalar>& grid) {
  const auto config = deterministic_config(grid);
  validate(config, schedule);
  return run_dbim1(config, schedule, predictor, xT, boot_noise).terminal();
}

template <typename Scalar = double>
struct EncodeOptions {
  /// Largest |eps_i| accepted as a plausible boot noise.
  Scalar latent_bound = Scalar(8);
  int max_newton_iterations = 50;
};

/// Inverts the eta = 0 recursion from x_{t_0} = x0 back up to t_{N-1}, then solves
/// the boot step for its noise. Each step is solved by Newton iteration on the
/// predictor Jacobian (one iteration for affine predictors).
template <typename Scalar>
Vector<Scalar> encode(const NoiseSchedule<Scalar>& schedule, const DataPredictor<Scalar>& predictor, VecRef<Scalar> x0,
                      VecRef<Scalar> xT, const TimeGrid<Scalar>& grid, const EncodeOptions<Scalar>& options = {}) {
  using std::abs;
  using std::max;
  detail::require_same_size(x0, xT, "encode");
  validate(deterministic_config(grid), schedule);
  const int n_steps = grid.n_steps();
  const Eigen::Index d = x0.size();
  const Vector<Scalar> no_noise = Vector<Scalar>::Zero(d);
  const Scalar tol = Scalar(64) * Eigen::NumTraits<Scalar>::epsilon();

  Vector<Scalar> x = x0;
  for (int n = 0; n + 1 < n_steps; ++n) {
    const Scalar s = grid[n];
    const Scalar t = grid[n + 1];
    const auto coef = dbim_step_coefficients(schedule, Scalar(0), s, t);
    if (coef.state == 0) throw Error(ErrorKind::DegenerateCoefficient, "encode: zero state coefficient");
    const Vector<Scalar> target = x;
    Vector<Scalar> y = x;
    bool converged = false;
    for (int it = 0; it < options.max_newton_iterations; ++it) {
      const Vector<Scalar> x_hat = predictor.predict(y, t, xT);
      const Vector<Scalar> residual = dbim_step<Scalar>(schedule, Scalar(0), y, xT, x_hat, s, t, no_noise) - target;
      const Scalar scale = max(Scalar(1), target.cwiseAbs().maxCoeff());
      if (residual.cwiseAbs().maxCoeff() <= tol * scale && it > 0) {
        converged = true;
        break;
      }
      Matrix<Scalar> jac = coef.prediction * predictor.jacobian(y, t, xT);
      jac.diagonal().array() += coef.state;
      Eigen::PartialPivLU<Matrix<Scalar>> lu(jac);
      if (!(abs(lu.determinant()) > 0)) throw Error(ErrorKind::DegenerateCoefficient, "encode: singular step");
      const Vector<Scalar> delta = lu.solve(residual);
      y -= delta;
      if (delta.cwiseAbs().maxCoeff() <= tol * max(Scalar(1), y.cwiseAbs().maxCoeff())) {
        converged = true;
        break;
      }
    }
    if (!converged) throw Error(ErrorKind::InconsistentEncoding, "encode: step inversion did not converge");
    x = std::move(y);
  }

  const Scalar T = schedule.horizon();
  const auto k = coeffs(schedule, grid[n_steps - 1]);
  const Vector<Scalar> eps = (x - k.a * xT - k.b * predictor.predict(xT, T, xT)) / k.c;
  if (!eps.allFinite() || eps.cwiseAbs().maxCoeff() > options.latent_bound) {
    throw Error(ErrorKind::InconsistentEncoding,
                "encode: recovered boot noise is implausible for this condition (max |eps| = " +
                    std::to_string(double(eps.cwiseAbs().maxCoeff())) + ")");
  }
  return eps;
}

/// Spherical linear interpolation; w = 0 gives a, w = 1 gives b.
template <typename DerivedA, typename DerivedB>
Vector<typename DerivedA::Scalar> slerp_interpolate(const Eigen::MatrixBase<DerivedA>& a,
                                                    const Eigen::MatrixBase<DerivedB>& b,
                                                    typename DerivedA::Scalar w) {
  using Scalar = typename DerivedA::Scalar;
  using std::acos;
  using std::clamp;
  using std::sin;
  detail::require_same_size(a, b, "slerp_interpolate");
  const Scalar na = a.norm();
  const Scalar nb = b.norm();
  if (na == 0 || nb == 0) throw Error(ErrorKind::ZeroVector, "slerp endpoints must be nonzero");
  if (!(w >= 0) || !(w <= 1)) throw Error(ErrorKind::InvalidArgument, "slerp weight must lie in [0, 1]");
  if (w == 0) return a;
  if (w == 1) return b;
  const Scalar cos_theta = clamp(a.dot(b) / (na * nb), Scalar(-1), Scalar(1));
  const Scalar theta = acos(cos_theta);
  const Scalar sin_theta = sin(theta);
  if (sin_theta < Scalar(1e-12)) return (Scalar(1) - w) * a + w * b;
  return (sin((Scalar(1) - w) * theta) / sin_theta) * a + (sin(w * theta) / sin_theta) * b;
}

}  // namespace bridgekit
