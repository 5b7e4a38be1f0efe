#include <cstdio>
#include <ostream>

#include "bridgekit/cli.hpp"

namespace bridgekit::cli {

namespace {

using Schedule = NoiseSchedule<double>;

CheckResult drift_equivalence() {
  const NormalStream rng(7, StreamTag::Data);
  double worst = 0.0;
  std::uint64_t stream = 0;
  for (const Schedule& schedule : {Schedule::vp(0.1, 2.0), Schedule::brownian(1.0)}) {
    const GaussianOracle<double> oracle(GaussianBridgeProblem<double>::isotropic(3, 0.5, 0.2, 0.8), schedule);
    for (int i = 0; i < 500; ++i, ++stream) {
      const double t = 0.01 + 0.98 * rng.uniform(stream, 0);
      const VectorXd x = rng.draw<double>(stream, 1, 3);
      const VectorXd xT = rng.draw<double>(stream, 2, 3);
      const VectorXd a = drift_dbim<double>(schedule, oracle, x, t, xT);
      const VectorXd b = drift_pfode<double>(schedule, oracle, x, t, xT);
      worst = std::max(worst, (a - b).norm() / b.norm());
    }
  }
  return {"drift_equivalence", worst <= 1e-9, "max rel dev " + format_real(worst)};
}

CheckResult coefficient_identities(const LambdaFn& lambda) {
  double identity_err = 0.0;
  double lambda_err = 0.0;
  for (const Schedule& schedule : {Schedule::vp(0.1, 2.0), Schedule::ve(0.002, 80.0), Schedule::brownian(1.0)}) {
    const double T = schedule.horizon();
    for (int i = 1; i < 200; ++i) {
      const double t = T * double(i) / 200.0;
      const auto k = coeffs(schedule, t);
      const double ratio = schedule.alpha(T) / schedule.alpha(t);
      identity_err = std::max(identity_err, std::abs(k.a * ratio + k.b / schedule.alpha(t) - 1.0));
      const double gap = 0.5 * std::log(schedule.snr(t) - schedule.snr(T));
      lambda_err = std::max(lambda_err, std::abs(lambda(schedule, t) - gap) / std::max(1.0, std::abs(gap)));
    }
  }
  const double spot = std::abs(lambda(Schedule::brownian(1.0), 0.2) - 0.5 * std::log(4.0));
  const auto end = coeffs(Schedule::vp(0.1, 2.0), 1.0);
  const bool endpoint = end.a == 1.0 && end.b == 0.0 && end.c == 0.0;
  const bool ok = identity_err <= 1e-12 && lambda_err <= 1e-10 && spot <= 1e-12 && endpoint;
  return {"coefficient_identities", ok,
          "identity " + format_real(identity_err) + ", lambda " + format_real(lambda_err) + ", spot " +
              format_real(spot)};
}

CheckResult markov_boundary() {
  const Schedule schedule = Schedule::vp(0.1, 2.0);
  const NormalStream rng(11, StreamTag::Data);
  double at_markov = 0.0;
  double at_half = 1e300;
  for (std::uint64_t i = 0; i < 20; ++i) {
    double t0 = 0.02 + 0.9 * rng.uniform(i, 0);
    double t1 = 0.02 + 0.9 * rng.uniform(i, 1);
    if (t0 > t1) std::swap(t0, t1);
    if (t1 - t0 < 1e-3) t1 = t0 + 1e-3;
    const double rho = markov_rho(schedule, t0, t1);
    at_markov = std::max(at_markov, std::abs(markov_x0_coefficient(schedule, rho, t0, t1)));
    at_half = std::min(at_half, std::abs(markov_x0_coefficient(schedule, 0.5 * rho, t0, t1)));
  }
  return {"markov_coefficient_zero", at_markov <= 1e-12 && at_half > 1e-3,
          "eta=1 " + format_real(at_markov) + ", eta=0.5 min " + format_real(at_half)};
}

CheckResult roundtrip() {
  const Schedule schedule = Schedule::vp(0.1, 2.0);
  const auto problem = GaussianBridgeProblem<double>::isotropic(2, 0.5, 0.1, 1.0);
  const GaussianOracle<double> oracle(problem, schedule);
  GridSpec<double> spec;
  spec.n_steps = 200;
  const auto grid = make_grid(spec);
  const NormalStream rng(13, StreamTag::Data);
  double worst = 0.0;
  for (std::uint64_t i = 0; i < 8; ++i) {
    const VectorXd xT = rng.draw<double>(i, 0, 2);
    const VectorXd x0 = problem.posterior_mean(xT) + rng.draw<double>(i, 1, 2);
    const VectorXd eps = encode<double>(schedule, oracle, x0, xT, grid);
    const VectorXd back = decode<double>(schedule, oracle, eps, xT, grid);
    worst = std::max(worst, (back - x0).norm() / x0.norm());
  }
  return {"roundtrip_n200", worst <= 1e-6, "max rel err " + format_real(worst)};
}

template <typename Fn>
CheckResult guarded(const char* name, Fn&& fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    return {name, false, std::string("threw: ") + e.what()};
  }
}

}  // namespace

std::vector<CheckResult> selftest_checks(const SelftestHooks& hooks) {
  const LambdaFn lambda = hooks.lambda ? hooks.lambda : LambdaFn([](const Schedule& s, double t) {
    return lambda_of(s, t);
  });
  return {
      guarded("drift_equivalence", drift_equivalence),
      guarded("coefficient_identities", [&] { return coefficient_identities(lambda); }),
      guarded("markov_coefficient_zero", markov_boundary),
      guarded("roundtrip_n200", roundtrip),
  };
}

int selftest(std::ostream& out, const SelftestHooks& hooks) {
  const auto results = selftest_checks(hooks);
  bool all = true;
  for (const auto& r : results) {
    char line[160];
    std::snprintf(line, sizeof line, "%-26s %s  ", r.name.c_str(), r.passed ? "PASS" : "FAIL");
    out << line << r.detail << '\n';
    all = all && r.passed;
  }
  out << (all ? "selftest passed" : "selftest FAILED") << " (" << results.size() << " checks)\n";
  return all ? 0 : 1;
}

}  // namespace bridgekit::cli
