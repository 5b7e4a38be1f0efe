#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include <boost/math/tools/roots.hpp>

#include "bridgekit/core.hpp"

namespace bridgekit {

enum class ScheduleKind { VP, VE, BrownianBridge };

constexpr std::string_view to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::VP: return "vp";
    case ScheduleKind::VE: return "ve";
    case ScheduleKind::BrownianBridge: return "brownian";
  }
  return "unknown";
}

/// Noise schedule (alpha_t, sigma_t) of the linear forward SDE dx = f x dt + g dw.
///
/// Three closed forms are supported:
///   VP:       beta(t) = beta_min + (beta_max - beta_min) t / T,
///             alpha_t = exp(-B(t)/2), sigma_t^2 = 1 - alpha_t^2, B(t) = int_0^t beta
///   VE:       alpha_t = 1, sigma_t = sigma_min (sigma_max / sigma_min)^(t / T)
///   Brownian: alpha_t = 1, sigma_t^2 = beta t
///
/// Everything is evaluated through log alpha and log sigma^2 so that the bridge
/// coefficients stay accurate near both t = 0 and t = T.
template <typename Scalar = double>
class NoiseSchedule {
 public:
  static NoiseSchedule vp(Scalar beta_min, Scalar beta_max, Scalar horizon = Scalar(1)) {
    if (!(beta_min >= 0) || !(beta_max > 0) || beta_max < beta_min) {
      throw Error(ErrorKind::InvalidArgument, "VP schedule needs 0 <= beta_min <= beta_max, beta_max > 0");
    }
    return NoiseSchedule(ScheduleKind::VP, {beta_min, beta_max}, horizon);
  }

  static NoiseSchedule ve(Scalar sigma_min, Scalar sigma_max, Scalar horizon = Scalar(1)) {
    if (!(sigma_min > 0) || !(sigma_max > sigma_min)) {
      throw Error(ErrorKind::InvalidArgument, "VE schedule needs 0 < sigma_min < sigma_max");
    }
    return NoiseSchedule(ScheduleKind::VE, {sigma_min, sigma_max}, horizon);
  }

  static NoiseSchedule brownian(Scalar beta, Scalar horizon = Scalar(1)) {
    if (!(beta > 0)) throw Error(ErrorKind::InvalidArgument, "Brownian bridge needs beta > 0");
    return NoiseSchedule(ScheduleKind::BrownianBridge, {beta}, horizon);
  }

  ScheduleKind kind() const { return kind_; }
  const std::vector<Scalar>& params() const { return params_; }
  Scalar horizon() const { return horizon_; }

  Scalar log_alpha(Scalar t) const {
    switch (kind_) {
      case ScheduleKind::VP: return Scalar(-0.5) * integrated_beta(t);
      case ScheduleKind::VE:
      case ScheduleKind::BrownianBridge: return Scalar(0);
    }
    return Scalar(0);
  }

  Scalar log_sigma2(Scalar t) const {
    using std::expm1;
    using std::log;
    switch (kind_) {
      case ScheduleKind::VP: return log(-expm1(-integrated_beta(t)));
      case ScheduleKind::VE:
        return Scalar(2) * log(params_[0]) + Scalar(2) * (t / horizon_) * log(params_[1] / params_[0]);
      case ScheduleKind::BrownianBridge: return log(params_[0] * t);
    }
    return Scalar(0);
  }

  Scalar alpha(Scalar t) const {
    using std::exp;
    return exp(log_alpha(t));
  }
  Scalar sigma2(Scalar t) const {
    using std::exp;
    return exp(log_sigma2(t));
  }
  Scalar sigma(Scalar t) const {
    using std::exp;
    return exp(Scalar(0.5) * log_sigma2(t));
  }
  Scalar log_snr(Scalar t) const { return Scalar(2) * log_alpha(t) - log_sigma2(t); }
  Scalar snr(Scalar t) const {
    using std::exp;
    return exp(log_snr(t));
  }

  /// f(t) = d log alpha_t / dt
  Scalar f(Scalar t) const {
    if (kind_ == ScheduleKind::VP) return Scalar(-0.5) * beta(t);
    return Scalar(0);
  }

  /// g^2(t) = d sigma_t^2 / dt - 2 f(t) sigma_t^2
  Scalar g2(Scalar t) const {
    using std::log;
    switch (kind_) {
      case ScheduleKind::VP: return beta(t);
      case ScheduleKind::VE: return sigma2(t) * Scalar(2) * log(params_[1] / params_[0]) / horizon_;
      case ScheduleKind::BrownianBridge: return params_[0];
    }
    return Scalar(0);
  }

 private:
  NoiseSchedule(ScheduleKind kind, std::vector<Scalar> params, Scalar horizon)
      : kind_(kind), params_(std::move(params)), horizon_(horizon) {
    if (!(horizon_ > 0)) throw Error(ErrorKind::InvalidArgument, "schedule horizon must be positive");
  }

  Scalar beta(Scalar t) const { return params_[0] + (params_[1] - params_[0]) * t / horizon_; }
  Scalar integrated_beta(Scalar t) const {
    return params_[0] * t + Scalar(0.5) * (params_[1] - params_[0]) * t * t / horizon_;
  }

  ScheduleKind kind_;
  std::vector<Scalar> params_;
  Scalar horizon_;
};

/// Weights of x_T, x_0 and unit noise in the bridge marginal
/// x_t = a x_T + b x_0 + c eps, plus the exponential-integrator time lambda = log(b / c).
template <typename Scalar = double>
struct BridgeCoeffs {
  Scalar a;
  Scalar b;
  Scalar c;
  Scalar lambda;
};

namespace detail {

inline constexpr double kCoeffFloor = 1e-300;

template <typename Scalar>
void require_time(const NoiseSchedule<Scalar>& schedule, Scalar t, const char* where) {
  if (!(t > 0) || t > schedule.horizon()) {
    throw Error(ErrorKind::TimeOutOfRange, std::string(where) + ": t must lie in (0, T]");
  }
}

}  // namespace detail

/// Bridge coefficients at time t. At t == T this returns the pinned endpoint
/// (1, 0, 0, -inf); anywhere else a coefficient that underflows is an error.
template <typename Scalar>
BridgeCoeffs<Scalar> coeffs(const NoiseSchedule<Scalar>& schedule, Scalar t) {
  using std::exp;
  using std::expm1;
  using std::log;
  detail::require_time(schedule, t, "coeffs");
  const Scalar T = schedule.horizon();
  if (t == T) {
    return {Scalar(1), Scalar(0), Scalar(0), -std::numeric_limits<Scalar>::infinity()};
  }
  // log(SNR_T / SNR_t) <= 0
  const Scalar log_ratio = schedule.log_snr(T) - schedule.log_snr(t);
  const Scalar one_minus_ratio = -expm1(log_ratio);
  const Scalar log_alpha_t = schedule.log_alpha(t);

  BridgeCoeffs<Scalar> out;
  out.a = exp(log_alpha_t - schedule.log_alpha(T) + log_ratio);
  out.b = exp(log_alpha_t) * one_minus_ratio;
  out.c = exp(Scalar(0.5) * (schedule.log_sigma2(t) + log(one_minus_ratio)));
  if (!(out.b > Scalar(detail::kCoeffFloor)) || !(out.c > Scalar(detail::kCoeffFloor))) {
    throw Error(ErrorKind::DegenerateCoefficient, "b_t or c_t underflows at t = " + std::to_string(double(t)));
  }
  out.lambda = Scalar(0.5) * (schedule.log_snr(t) + log(one_minus_ratio));
  return out;
}

/// lambda_t = log(b_t / c_t), defined for 0 < t < T.
template <typename Scalar>
Scalar lambda_of(const NoiseSchedule<Scalar>& schedule, Scalar t) {
  if (!(t < schedule.horizon())) {
    throw Error(ErrorKind::TimeOutOfRange, "lambda_of: t must be strictly below T");
  }
  return coeffs(schedule, t).lambda;
}

/// The same quantity written as 1/2 log(SNR_t - SNR_T); kept as an independent
/// route for consistency checks.
template <typename Scalar>
Scalar lambda_from_snr_gap(const NoiseSchedule<Scalar>& schedule, Scalar t) {
  using std::log;
  return Scalar(0.5) * log(schedule.snr(t) - schedule.snr(schedule.horizon()));
}

template <typename Scalar = double>
struct TimeInterval {
  Scalar lo;
  Scalar hi;
};

/// Inverse of lambda_of by bracketed root finding on the monotone map t -> lambda_t.
template <typename Scalar>
Scalar time_of_lambda(const NoiseSchedule<Scalar>& schedule, Scalar lambda, TimeInterval<Scalar> bracket) {
  if (!(bracket.lo > 0) || !(bracket.hi < schedule.horizon()) || !(bracket.lo < bracket.hi)) {
    throw Error(ErrorKind::NotBracketed, "time_of_lambda: bracket must satisfy 0 < lo < hi < T");
  }
  const Scalar lambda_lo = lambda_of(schedule, bracket.lo);  // largest lambda
  const Scalar lambda_hi = lambda_of(schedule, bracket.hi);  // smallest lambda
  if (!(lambda <= lambda_lo) || !(lambda >= lambda_hi)) {
    throw Error(ErrorKind::NotBracketed, "time_of_lambda: lambda outside attainable range");
  }
  if (lambda == lambda_lo) return bracket.lo;
  if (lambda == lambda_hi) return bracket.hi;

  auto residual = [&](Scalar t) { return lambda_of(schedule, t) - lambda; };
  boost::math::tools::eps_tolerance<Scalar> tol(std::numeric_limits<Scalar>::digits - 4);
  std::uintmax_t max_iter = 200;
  const auto [left, right] = boost::math::tools::toms748_solve(
      residual, bracket.lo, bracket.hi, lambda_lo - lambda, lambda_hi - lambda, tol, max_iter);
  return left + (right - left) / 2;
}

template <typename Scalar>
Scalar time_of_lambda(const NoiseSchedule<Scalar>& schedule, Scalar lambda) {
  const Scalar T = schedule.horizon();
  return time_of_lambda(schedule, lambda, TimeInterval<Scalar>{T * Scalar(1e-9), T * (Scalar(1) - Scalar(1e-9))});
}

// ---------------------------------------------------------------------------
// Time grids

enum class GridKind { UniformWithBootStep, EdmPower, LambdaUniform };

constexpr std::string_view to_string(GridKind kind) {
  switch (kind) {
    case GridKind::UniformWithBootStep: return "uniform";
    case GridKind::EdmPower: return "edm";
    case GridKind::LambdaUniform: return "lambda_uniform";
  }
  return "unknown";
}

template <typename Scalar = double>
struct GridSpec {
  GridKind kind = GridKind::UniformWithBootStep;
  int n_steps = 10;
  Scalar t_min = Scalar(1e-4);
  Scalar t_max = Scalar(1);
  Scalar boot_gap = Scalar(1e-4);
  Scalar edm_exponent = Scalar(7);
};

/// Discretization t_0 < t_1 < ... < t_N = t_max used by every sampler.
template <typename Scalar = double>
struct TimeGrid {
  std::vector<Scalar> times;
  GridKind kind = GridKind::UniformWithBootStep;
  Scalar t_min = Scalar(1e-4);
  Scalar boot_gap = Scalar(1e-4);
  Scalar edm_exponent = Scalar(7);

  int n_steps() const { return static_cast<int>(times.size()) - 1; }
  Scalar t_max() const { return times.back(); }
  Scalar operator[](std::size_t i) const { return times[i]; }
};

namespace detail {

template <typename Scalar>
void validate_grid_spec(const GridSpec<Scalar>& spec) {
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::InvalidGridParams, msg); };
  if (spec.n_steps < 1) fail("N must be at least 1");
  if (!(spec.t_min > 0)) fail("t_min must be positive");
  if (!(spec.t_max > spec.t_min)) fail("t_max must exceed t_min");
  if (spec.kind == GridKind::EdmPower) {
    if (!(spec.edm_exponent > 0)) fail("EDM exponent must be positive");
    return;
  }
  if (!(spec.boot_gap > 0)) fail("boot_gap must be positive");
  const Scalar last_interior = spec.t_max - spec.boot_gap;
  if (spec.n_steps == 1) {
    using std::abs;
    if (abs(spec.t_min - last_interior) > Scalar(1e-12) * spec.t_max) {
      fail("a one-step grid requires t_min == t_max - boot_gap");
    }
  } else if (!(spec.t_min < last_interior)) {
    fail("need t_min < t_max - boot_gap");
  }
}

template <typename Scalar>
void check_strictly_increasing(const std::vector<Scalar>& times) {
  for (std::size_t i = 1; i < times.size(); ++i) {
    if (!(times[i] > times[i - 1])) {
      throw Error(ErrorKind::InvalidGridParams, "grid is not strictly increasing at index " + std::to_string(i));
    }
  }
}

}  // namespace detail

/// Uniform-with-boot-step and EDM power grids. LambdaUniform needs a schedule;
/// use the two-argument overload for it.
template <typename Scalar>
TimeGrid<Scalar> make_grid(const GridSpec<Scalar>& spec) {
  using std::pow;
  detail::validate_grid_spec(spec);
  const int n = spec.n_steps;
  TimeGrid<Scalar> grid{{}, spec.kind, spec.t_min, spec.boot_gap, spec.edm_exponent};
  grid.times.resize(n + 1);

  switch (spec.kind) {
    case GridKind::UniformWithBootStep: {
      const Scalar last_interior = spec.t_max - spec.boot_gap;
      grid.times[0] = spec.t_min;
      if (n >= 2) {
        const Scalar step = (last_interior - spec.t_min) / Scalar(n - 1);
        for (int i = 1; i < n - 1; ++i) grid.times[i] = spec.t_min + Scalar(i) * step;
        grid.times[n - 1] = last_interior;
      }
      break;
    }
    case GridKind::EdmPower: {
      const Scalar inv = Scalar(1) / spec.edm_exponent;
      const Scalar hi = pow(spec.t_max, inv);
      const Scalar lo = pow(spec.t_min, inv);
      // t_n is the EDM sequence read backwards: index i = N - n.
      for (int idx = 0; idx <= n; ++idx) {
        const Scalar w = Scalar(n - idx) / Scalar(n);
        grid.times[idx] = pow(hi + w * (lo - hi), spec.edm_exponent);
      }
      grid.times[0] = spec.t_min;
      break;
    }
    case GridKind::LambdaUniform:
      throw Error(ErrorKind::InvalidGridParams, "lambda-uniform grid needs a schedule");
  }
  grid.times[n] = spec.t_max;
  detail::check_strictly_increasing(grid.times);
  return grid;
}

/// Same as make_grid(spec), plus LambdaUniform: t_0 .. t_{N-1} equally spaced in
/// lambda_t between t_min and t_max - boot_gap, then the boot step to t_max.
template <typename Scalar>
TimeGrid<Scalar> make_grid(const GridSpec<Scalar>& spec, const NoiseSchedule<Scalar>& schedule) {
  if (spec.kind != GridKind::LambdaUniform) return make_grid(spec);
  detail::validate_grid_spec(spec);
  if (spec.t_max > schedule.horizon()) {
    throw Error(ErrorKind::InvalidGridParams, "t_max exceeds the schedule horizon");
  }
  const int n = spec.n_steps;
  TimeGrid<Scalar> grid{{}, spec.kind, spec.t_min, spec.boot_gap, spec.edm_exponent};
  grid.times.resize(n + 1);
  const Scalar last_interior = spec.t_max - spec.boot_gap;
  grid.times[0] = spec.t_min;
  if (n >= 2) {
    const Scalar lambda_first = lambda_of(schedule, spec.t_min);
    const Scalar lambda_last = lambda_of(schedule, last_interior);
    const TimeInterval<Scalar> bracket{spec.t_min, last_interior};
    for (int i = 1; i < n - 1; ++i) {
      const Scalar w = Scalar(i) / Scalar(n - 1);
      grid.times[i] = time_of_lambda(schedule, lambda_first + w * (lambda_last - lambda_first), bracket);
    }
    grid.times[n - 1] = last_interior;
  }
  grid.times[n] = spec.t_max;
  detail::check_strictly_increasing(grid.times);
  return grid;
}

}  // namespace bridgekit
