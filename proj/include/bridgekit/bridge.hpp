#pragma once

#include <cmath>
#include <string>
#include <type_traits>
#include <vector>

#include "bridgekit/core.hpp"
#include "bridgekit/random.hpp"
#include "bridgekit/schedule.hpp"

namespace bridgekit {

/// Read-only vector argument that also accepts Eigen expressions. The scalar
/// type is taken from the schedule argument, never deduced from this one.
template <typename Scalar>
using VecRef = std::type_identity_t<Eigen::Ref<const Vector<Scalar>>>;

/// Per-step standard deviations rho_0 .. rho_{N-1} of the non-Markovian bridge.
template <typename Scalar = double>
struct VarianceParam {
  Scalar eta = Scalar(0);
  std::vector<Scalar> rhos;

  /// Arbitrary rho vector, for probing marginal preservation away from the
  /// eta interpolant. Requires 0 <= rho_n <= c_{t_n} and rho_{N-1} = c_{t_{N-1}}.
  static VarianceParam from_rhos(const NoiseSchedule<Scalar>& schedule, const TimeGrid<Scalar>& grid,
                                 std::vector<Scalar> rhos);
};

namespace detail {

/// sqrt(c^2 - rho^2) without forming the squares.
template <typename Scalar>
Scalar residual_scale(Scalar c, Scalar rho) {
  using std::sqrt;
  const Scalar prod = (c - rho) * (c + rho);
  return prod > 0 ? sqrt(prod) : Scalar(0);
}

}  // namespace detail

/// The Markovian (eta = 1) choice sigma_{t_n} sqrt(1 - SNR_{t_{n+1}} / SNR_{t_n}).
template <typename Scalar>
Scalar markov_rho(const NoiseSchedule<Scalar>& schedule, Scalar t_n, Scalar t_next) {
  using std::expm1;
  using std::sqrt;
  detail::require_time(schedule, t_n, "markov_rho");
  detail::require_time(schedule, t_next, "markov_rho");
  if (!(t_next > t_n)) throw Error(ErrorKind::InvalidArgument, "markov_rho: need t_n < t_{n+1}");
  const Scalar gap = -expm1(schedule.log_snr(t_next) - schedule.log_snr(t_n));
  return schedule.sigma(t_n) * sqrt(gap);
}

template <typename Scalar>
VarianceParam<Scalar> make_rhos(const NoiseSchedule<Scalar>& schedule, const TimeGrid<Scalar>& grid, Scalar eta) {
  if (!(eta >= 0) || !(eta <= 1)) throw Error(ErrorKind::InvalidArgument, "eta must lie in [0, 1]");
  const int n_steps = grid.n_steps();
  VarianceParam<Scalar> out;
  out.eta = eta;
  out.rhos.resize(n_steps);
  for (int n = 0; n + 1 < n_steps; ++n) {
    const Scalar c = coeffs(schedule, grid[n]).c;
    const Scalar rho = eta * markov_rho(schedule, grid[n], grid[n + 1]);
    out.rhos[n] = rho < c ? rho : c;
  }
  out.rhos[n_steps - 1] = coeffs(schedule, grid[n_steps - 1]).c;
  return out;
}

template <typename Scalar>
VarianceParam<Scalar> VarianceParam<Scalar>::from_rhos(const NoiseSchedule<Scalar>& schedule,
                                                       const TimeGrid<Scalar>& grid, std::vector<Scalar> rhos) {
  using std::abs;
  const int n_steps = grid.n_steps();
  if (static_cast<int>(rhos.size()) != n_steps) {
    throw Error(ErrorKind::DimensionMismatch, "rho vector must have one entry per step");
  }
  for (int n = 0; n < n_steps; ++n) {
    const Scalar c = coeffs(schedule, grid[n]).c;
    if (!(rhos[n] >= 0) || rhos[n] > c * (Scalar(1) + Scalar(1e-12))) {
      throw Error(ErrorKind::InvalidArgument, "rho_" + std::to_string(n) + " outside [0, c_t]");
    }
    if (n == n_steps - 1 && abs(rhos[n] - c) > Scalar(1e-12) * c) {
      throw Error(ErrorKind::InvalidArgument, "rho_{N-1} must equal c_{t_{N-1}}");
    }
    if (rhos[n] > c) rhos[n] = c;
  }
  return VarianceParam{Scalar(-1), std::move(rhos)};
}

/// x_t = a_t x_T + b_t x_0 + c_t noise
template <typename Scalar>
Vector<Scalar> forward_sample(const NoiseSchedule<Scalar>& schedule, VecRef<Scalar> x0, VecRef<Scalar> xT, Scalar t,
                              VecRef<Scalar> noise) {
  detail::require_same_size(x0, xT, "forward_sample");
  detail::require_same_size(x0, noise, "forward_sample");
  const auto k = coeffs(schedule, t);
  return k.a * xT + k.b * x0 + k.c * noise;
}

template <typename Scalar = double>
struct GaussianStep {
  Vector<Scalar> mean;
  Scalar variance;
};

/// Mean and variance of q(x_{t_n} | x_0, x_{t_{n+1}}, x_T) for the rho-indexed family.
template <typename Scalar>
GaussianStep<Scalar> inference_kernel_mean_var(const NoiseSchedule<Scalar>& schedule, Scalar rho_n,
                                               VecRef<Scalar> x0, VecRef<Scalar> x_next, VecRef<Scalar> xT,
                                               Scalar t_n, Scalar t_next) {
  detail::require_same_size(x0, xT, "inference_kernel_mean_var");
  detail::require_same_size(x0, x_next, "inference_kernel_mean_var");
  if (!(t_next > t_n)) throw Error(ErrorKind::InvalidArgument, "inference kernel needs t_n < t_{n+1}");
  const auto kn = coeffs(schedule, t_n);
  const auto kn1 = coeffs(schedule, t_next);
  if (!(rho_n >= 0) || rho_n > kn.c) throw Error(ErrorKind::InvalidArgument, "rho_n outside [0, c_{t_n}]");

  GaussianStep<Scalar> out{kn.a * xT + kn.b * x0, rho_n * rho_n};
  const Scalar carry = detail::residual_scale(kn.c, rho_n);
  if (carry == 0) return out;
  if (kn1.c == 0) {
    throw Error(ErrorKind::InitialStepSingularity, "c_{t_{n+1}} = 0 with rho_n < c_{t_n}; use the boot step");
  }
  out.mean += (carry / kn1.c) * (x_next - kn1.a * xT - kn1.b * x0);
  return out;
}

/// Coefficient of x_0 in grad_{x_{t_{n+1}}} log q(x_{t_{n+1}} | x_0, x_{t_n}, x_T).
/// Zero exactly when the induced forward step is Markovian.
template <typename Scalar>
Scalar markov_x0_coefficient(const NoiseSchedule<Scalar>& schedule, Scalar rho_n, Scalar t_n, Scalar t_next) {
  if (rho_n == 0) throw Error(ErrorKind::ZeroRho, "Markov coefficient is undefined at rho_n = 0");
  if (!(t_next > t_n)) throw Error(ErrorKind::InvalidArgument, "need t_n < t_{n+1}");
  const auto kn = coeffs(schedule, t_n);
  const auto kn1 = coeffs(schedule, t_next);
  if (kn1.c == 0) throw Error(ErrorKind::DegenerateCoefficient, "c_{t_{n+1}} = 0");
  if (!(rho_n > 0) || rho_n > kn.c) throw Error(ErrorKind::InvalidArgument, "rho_n outside (0, c_{t_n}]");
  const Scalar numer = kn1.b * kn.c * kn.c - kn.b * kn1.c * detail::residual_scale(kn.c, rho_n);
  return numer / (kn1.c * kn1.c * rho_n * rho_n);
}

/// Weight gamma(t_n) that makes the discrete variational bound a weighted
/// bridge score matching loss; n runs from 1 to N.
template <typename Scalar>
Scalar vi_weight(const NoiseSchedule<Scalar>& schedule, const TimeGrid<Scalar>& grid,
                 const VarianceParam<Scalar>& variance, int n) {
  using std::exp;
  const int n_steps = grid.n_steps();
  if (n < 1 || n > n_steps) throw Error(ErrorKind::InvalidArgument, "vi_weight index must lie in [1, N]");
  if (static_cast<int>(variance.rhos.size()) != n_steps) {
    throw Error(ErrorKind::DimensionMismatch, "rho vector does not match the grid");
  }
  const Scalar rho = variance.rhos[n - 1];
  if (!(rho > 0)) throw Error(ErrorKind::ZeroRho, "vi_weight needs rho_{n-1} > 0");

  Scalar d = Scalar(1);
  if (n > 1) {
    const auto kp = coeffs(schedule, grid[n - 1]);
    const Scalar carry = detail::residual_scale(kp.c, rho);
    d = kp.b;
    if (carry != 0) {
      const auto kn = coeffs(schedule, grid[n]);
      d -= carry * kn.b / kn.c;
    }
  }
  // c_t^4 / b_t^2 == sigma_t^4 / alpha_t^2, which stays finite at t_N = T.
  const Scalar t = grid[n];
  const Scalar c4_over_b2 = exp(Scalar(2) * schedule.log_sigma2(t) - Scalar(2) * schedule.log_alpha(t));
  return d * d * c4_over_b2 / (Scalar(2) * rho * rho);
}

/// Draws one path of the inference chain with the true x_0: x_{t_{N-1}} from the
/// bridge marginal, then x_{t_n} ~ q(x_{t_n} | x_0, x_{t_{n+1}}, x_T) down to t_0.
/// Entry n of the result is the state at t_n, for n = 0 .. N-1.
template <typename Scalar>
std::vector<Vector<Scalar>> simulate_inference_chain(const NoiseSchedule<Scalar>& schedule,
                                                     const TimeGrid<Scalar>& grid,
                                                     const VarianceParam<Scalar>& variance, VecRef<Scalar> x0,
                                                     VecRef<Scalar> xT, const NormalStream& noise,
                                                     std::uint64_t stream) {
  const int n_steps = grid.n_steps();
  const Eigen::Index d = x0.size();
  std::vector<Vector<Scalar>> states(n_steps);
  states[n_steps - 1] = forward_sample<Scalar>(schedule, x0, xT, grid[n_steps - 1],
                                               noise.draw<Scalar>(stream, static_cast<std::uint32_t>(n_steps - 1), d));
  for (int n = n_steps - 2; n >= 0; --n) {
    const Scalar rho = variance.rhos[n];
    auto step = inference_kernel_mean_var<Scalar>(schedule, rho, x0, states[n + 1], xT, grid[n], grid[n + 1]);
    if (rho > 0) step.mean += rho * noise.draw<Scalar>(stream, static_cast<std::uint32_t>(n), d);
    states[n] = std::move(step.mean);
  }
  return states;
}

}  // namespace bridgekit
