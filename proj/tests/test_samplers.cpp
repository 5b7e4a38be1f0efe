#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "bridgekit/metrics.hpp"
#include "bridgekit/oracle.hpp"
#include "bridgekit/samplers.hpp"

using namespace bridgekit;
using Schedule = NoiseSchedule<double>;
using Problem = GaussianBridgeProblem<double>;

namespace {

VectorXd vec(std::initializer_list<double> v) {
  VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

template <typename Fn>
ErrorKind error_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error thrown");
  return ErrorKind::InvalidArgument;
}

TimeGrid<double> uniform_grid(int n) {
  GridSpec<double> spec;
  spec.n_steps = n;
  return make_grid(spec);
}

SamplerConfig<double> config_for(Method method, int n, double eta = 0.0, std::uint64_t seed = 1) {
  SamplerConfig<double> config;
  config.method = method;
  config.eta = eta;
  config.grid = uniform_grid(n);
  config.seed = seed;
  return config;
}

Problem two_dim_problem() {
  return Problem(MatrixXd::Identity(2, 2) * 0.5, vec({0.3, -0.2}), (MatrixXd(2, 2) << 1.0, 0.3, 0.3, 0.6).finished());
}

}  // namespace

TEST_CASE("method names round-trip") {
  for (Method m : {Method::DBIM1, Method::DBIM2, Method::DBIM3, Method::PfOdeEuler, Method::PfOdeHeun,
                   Method::SdeEulerMaruyama}) {
    CHECK(method_from_string(to_string(m)) == m);
  }
  CHECK_FALSE(method_from_string("hybrid").has_value());
}

TEST_CASE("validate") {
  const Schedule s = Schedule::vp(0.1, 2.0);
  CHECK(validate(config_for(Method::DBIM1, 10, 0.5), s).empty());
  CHECK(validate(config_for(Method::DBIM2, 10, 0.5), s).size() == 1);
  CHECK(error_of([&] { (void)validate(config_for(Method::DBIM1, 10, 1.5), s); }) == ErrorKind::InvalidArgument);
  CHECK(error_of([&] { (void)validate(config_for(Method::DBIM3, 2), s); }) == ErrorKind::InvalidGridParams);
  CHECK_NOTHROW((void)validate(config_for(Method::DBIM3, 3), s));
  CHECK(error_of([&] { (void)validate(config_for(Method::DBIM1, 10), Schedule::vp(0.1, 2.0, 2.0)); }) ==
        ErrorKind::InvalidGridParams);
}

TEST_CASE("boot step") {
  const Schedule s = Schedule::brownian(1.0);
  const GaussianOracle<double> oracle(Problem::isotropic(1, 0.5, 0.2, 1.0), s);
  // a = b = c = 0.5 at t = 0.5; m(x_T = 2) = 1.2.
  CHECK(boot_step<double>(s, oracle, vec({2.0}), 0.5, vec({0.3}))(0) == doctest::Approx(1.0 + 0.6 + 0.15));

  const Schedule vp = Schedule::vp(0.1, 2.0);
  const Problem p = two_dim_problem();
  const GaussianOracle<double> vp_oracle(p, vp);
  const VectorXd xT = vec({1.0, -0.5});
  const auto k = coeffs(vp, 0.9);
  CHECK((boot_step<double>(vp, vp_oracle, xT, 0.9, VectorXd::Zero(2)) - (k.a * xT + k.b * p.posterior_mean(xT))).norm() <=
        1e-15);
  CHECK(error_of([&] { (void)boot_step<double>(vp, vp_oracle, xT, 1.0, VectorXd::Zero(2)); }) ==
        ErrorKind::TimeOutOfRange);
}

TEST_CASE("dbim step") {
  const Schedule s = Schedule::brownian(1.0);
  const VectorXd xT = vec({2.0});
  const VectorXd x_hat = vec({1.0});
  const VectorXd eps = vec({0.3});

  SUBCASE("rho = c drops the predicted noise") {
    const double c = coeffs(s, 0.25).c;
    CHECK(dbim_step<double>(s, c, vec({9.0}), xT, x_hat, 0.25, 0.5, eps)(0) ==
          doctest::Approx(0.25 * 2.0 + 0.75 * 1.0 + c * 0.3));
  }
  SUBCASE("deterministic step stays on the noiseless line") {
    const VectorXd on_line = vec({0.5 * 2.0 + 0.5 * 1.0});
    CHECK(dbim_step<double>(s, 0.0, on_line, xT, x_hat, 0.25, 0.5, VectorXd::Zero(1))(0) ==
          doctest::Approx(0.25 * 2.0 + 0.75 * 1.0).epsilon(1e-15));
  }
  SUBCASE("eta = 0.5 hand substitution") {
    // c_{0.25}^2 = 0.1875, a = b = c = 0.5 at 0.5; eta = 1 rho is 0.5 sqrt(0.5).
    const double rho = 0.25 * std::sqrt(0.5);
    const double expected = 0.5 + 0.75 + std::sqrt(0.1875 - 0.03125) * (1.7 - 1.0 - 0.5) / 0.5 + rho * 0.3;
    CHECK(make_rhos(s, TimeGrid<double>{{0.25, 0.5, 1.0}}, 0.5).rhos[0] == doctest::Approx(rho).epsilon(1e-14));
    CHECK(dbim_step<double>(s, rho, vec({1.7}), xT, x_hat, 0.25, 0.5, eps)(0) ==
          doctest::Approx(expected).epsilon(1e-14));
  }
  SUBCASE("coefficients reproduce the step") {
    const double rho = 0.1;
    const auto coef = dbim_step_coefficients(s, rho, 0.25, 0.5);
    const double got = dbim_step<double>(s, rho, vec({1.7}), xT, x_hat, 0.25, 0.5, VectorXd::Zero(1))(0);
    CHECK(got == doctest::Approx(coef.state * 1.7 + coef.condition * 2.0 + coef.prediction * 1.0).epsilon(1e-14));
  }
  SUBCASE("errors") {
    CHECK(error_of([&] { (void)dbim_step<double>(s, 0.0, xT, xT, x_hat, 0.9, 1.0, eps); }) ==
          ErrorKind::InitialStepSingularity);
    CHECK(error_of([&] { (void)dbim_step<double>(s, 0.9, xT, xT, x_hat, 0.25, 0.5, eps); }) ==
          ErrorKind::InvalidArgument);
    CHECK(error_of([&] { (void)dbim_step<double>(s, 0.0, xT, xT, x_hat, 0.5, 0.5, eps); }) ==
          ErrorKind::InvalidArgument);
  }
}

TEST_CASE("first-order DBIM runs") {
  const Schedule s = Schedule::vp(0.1, 2.0);
  const GaussianOracle<double> oracle(two_dim_problem(), s);
  const VectorXd xT = vec({1.0, -0.5});

  SUBCASE("terminal state is affine in the boot noise") {
    const auto config = config_for(Method::DBIM1, 50);
    const VectorXd ea = vec({0.3, -1.2});
    const VectorXd eb = vec({-0.7, 0.4});
    const VectorXd ec = ea + 2.5 * (eb - ea);
    const VectorXd xa = run_sampler<double>(config, s, oracle, xT, ea).terminal();
    const VectorXd xb = run_sampler<double>(config, s, oracle, xT, eb).terminal();
    const VectorXd xc = run_sampler<double>(config, s, oracle, xT, ec).terminal();
    CHECK((xc - xa - 2.5 * (xb - xa)).norm() <= 1e-10);
  }
  SUBCASE("one-step grid is the boot step") {
    SamplerConfig<double> config;
    config.grid = TimeGrid<double>{{0.9999, 1.0}};
    const VectorXd eps = vec({0.5, 0.25});
    const auto traj = run_sampler<double>(config, s, oracle, xT, eps);
    CHECK(traj.terminal() == boot_step<double>(s, oracle, xT, 0.9999, eps));
    CHECK(traj.predictor_calls == 1);
  }
  SUBCASE("path bookkeeping") {
    for (Method m : {Method::DBIM1, Method::DBIM2, Method::DBIM3}) {
      const auto config = config_for(m, 12);
      const auto traj = run_sampler<double>(config, s, oracle, xT, 0);
      CHECK(traj.predictor_calls == 12);
      REQUIRE(traj.states.size() == 13);
      for (int i = 0; i <= 12; ++i) CHECK(traj.states[i].t == config.grid[12 - i]);
      CHECK(traj.states.front().x == xT);
      CHECK(traj.boot_noise == draw_boot_noise<double>(config.seed, 0, 2));
    }
    auto config = config_for(Method::DBIM1, 12, 0.5);
    config.keep_path = false;
    const auto short_traj = run_sampler<double>(config, s, oracle, xT, 3);
    config.keep_path = true;
    const auto long_traj = run_sampler<double>(config, s, oracle, xT, 3);
    CHECK(short_traj.states.size() == 2);
    CHECK(short_traj.terminal() == long_traj.terminal());
  }
  SUBCASE("identical inputs give bitwise-identical trajectories") {
    for (Method m : {Method::DBIM1, Method::DBIM3, Method::SdeEulerMaruyama}) {
      const auto config = config_for(m, 20, m == Method::DBIM1 ? 0.7 : 0.0, 99);
      const auto a = run_sampler<double>(config, s, oracle, xT, 5);
      const auto b = run_sampler<double>(config, s, oracle, xT, 5);
      REQUIRE(a.states.size() == b.states.size());
      for (std::size_t i = 0; i < a.states.size(); ++i) CHECK(a.states[i].x == b.states[i].x);
      CHECK(run_sampler<double>(config, s, oracle, xT, 6).terminal() != a.terminal());
    }
  }
}

TEST_CASE("deterministic DBIM terminal moments match the bridge marginal") {
  const Schedule s = Schedule::vp(0.1, 2.0);
  const Problem p = Problem::isotropic(1, 0.5, 0.2, 0.8);
  const GaussianOracle<double> oracle(p, s);
  const VectorXd xT = vec({1.0});
  const auto config = config_for(Method::DBIM1, 400, 0.0, 11);
  constexpr int n = 10000;
  std::vector<VectorXd> batch(n);
  for (int i = 0; i < n; ++i) batch[i] = run_sampler<double>(config, s, oracle, xT, std::uint64_t(i)).terminal();
  const auto target = marginal_at(p, s, config.grid[0], xT);
  const auto rep = moment_check<double>(batch, config.grid[0], target.mean, target.cov);
  CHECK(rep.max_abs_z() <= 4.0);
  CHECK(rep.max_var_rel_err() <= 4.0 * std::sqrt(2.0 / (n - 1)));
}

TEST_CASE("Taylor integral") {
  using boost::math::quadrature::gauss_kronrod;
  const double lt = -1.3;
  const double ls = 0.4;
  const double h = ls - lt;

  SUBCASE("zero derivatives give the first-order exponential step") {
    const VectorXd x = vec({0.7, -2.0});
    const VectorXd z = VectorXd::Zero(2);
    const VectorXd expected = std::exp(ls) * (1 - std::exp(-h)) * x;
    CHECK((taylor_integral<double>(2, ls, lt, x, z, z) - expected).norm() <= 1e-15 * expected.norm());
    CHECK((taylor_integral<double>(3, ls, lt, x, z, z) - expected).norm() <= 1e-15 * expected.norm());
  }
  SUBCASE("linear integrand against quadrature") {
    const double exact = gauss_kronrod<double, 61>::integrate([](double l) { return std::exp(l) * l; }, lt, ls, 15, 1e-14);
    const double got = taylor_integral<double>(2, ls, lt, vec({lt}), vec({1.0}), vec({0.0}))(0);
    CHECK(std::abs(got - exact) <= 1e-10 * std::abs(exact));
  }
  SUBCASE("quadratic integrand against quadrature") {
    const double exact =
        gauss_kronrod<double, 61>::integrate([](double l) { return std::exp(l) * l * l; }, lt, ls, 15, 1e-14);
    const double got = taylor_integral<double>(3, ls, lt, vec({lt * lt}), vec({2 * lt}), vec({2.0}))(0);
    CHECK(std::abs(got - exact) <= 1e-10 * std::abs(exact));
    // Order 2 truncates the curvature.
    CHECK(std::abs(taylor_integral<double>(2, ls, lt, vec({lt * lt}), vec({2 * lt}), vec({2.0}))(0) - exact) > 1e-3);
  }
  SUBCASE("small-step weights are continuous and accurate") {
    const auto below = detail::taylor_weights(0.1 - 1e-13);
    const auto above = detail::taylor_weights(0.1 + 1e-13);
    for (int j = 0; j < 3; ++j) CHECK(std::abs(below[j] - above[j]) <= 1e-11 * std::abs(above[j]));
    const double tiny = 1e-6;
    const auto w = detail::taylor_weights(tiny);
    CHECK(w[0] == doctest::Approx(tiny - tiny * tiny / 2).epsilon(1e-14));
    CHECK(w[1] == doctest::Approx(tiny * tiny / 2 - tiny * tiny * tiny / 6).epsilon(1e-14));
    CHECK(w[2] == doctest::Approx(tiny * tiny * tiny / 6 - std::pow(tiny, 4) / 24).epsilon(1e-14));
  }
  SUBCASE("errors") {
    const VectorXd x = vec({1.0});
    CHECK(error_of([&] { (void)taylor_integral<double>(2, 0.0, 0.0, x, x, x); }) == ErrorKind::NonpositiveStep);
    CHECK(error_of([&] { (void)taylor_integral<double>(2, -1.0, 0.0, x, x, x); }) == ErrorKind::NonpositiveStep);
    CHECK(error_of([&] { (void)taylor_integral<double>(4, 1.0, 0.0, x, x, x); }) == ErrorKind::InvalidArgument);
  }
}

TEST_CASE("constant predictor makes every DBIM order agree") {
  const Schedule s = Schedule::vp(0.1, 2.0);
  const GaussianOracle<double> oracle(Problem::isotropic(2, 0.5, 0.1, 0.0), s);
  const VectorXd xT = vec({1.0, -0.5});
  const auto first = run_sampler<double>(config_for(Method::DBIM1, 10), s, oracle, xT, 4);
  for (Method m : {Method::DBIM2, Method::DBIM3}) {
    const auto other = run_sampler<double>(config_for(m, 10), s, oracle, xT, 4);
    REQUIRE(other.states.size() == first.states.size());
    for (std::size_t i = 0; i < first.states.size(); ++i) {
      CHECK((other.states[i].x - first.states[i].x).norm() <= 1e-12 * (1 + first.states[i].x.norm()));
    }
  }
}

TEST_CASE("high-order DBIM at the minimum grid sizes") {
  const Schedule s = Schedule::brownian(1.0);
  const GaussianOracle<double> oracle(two_dim_problem(), s);
  const VectorXd xT = vec({0.5, 0.5});
  CHECK(run_sampler<double>(config_for(Method::DBIM2, 2), s, oracle, xT, 0).terminal().allFinite());
  CHECK(run_sampler<double>(config_for(Method::DBIM3, 3), s, oracle, xT, 0).terminal().allFinite());
  CHECK(error_of([&] { (void)run_dbim_high<double>(config_for(Method::DBIM3, 2), 3, s, oracle, xT, xT); }) ==
        ErrorKind::InvalidGridParams);
}

TEST_CASE("drift equivalence between the induced ODE and the PF-ODE") {
  const NormalStream rng(21, StreamTag::Data);
  const Problem p = two_dim_problem();
  for (const Schedule& s : {Schedule::vp(0.1, 2.0), Schedule::brownian(1.0)}) {
    const GaussianOracle<double> oracle(p, s);
    double worst = 0.0;
    for (std::uint64_t i = 0; i < 1000; ++i) {
      const double t = 0.01 + 0.98 * rng.uniform(i, 0);
      const VectorXd xT = rng.draw<double>(i, 1, 2);
      const VectorXd x = 2.0 * rng.draw<double>(i, 2, 2);
      const VectorXd a = drift_dbim<double>(s, oracle, x, t, xT);
      const VectorXd b = drift_pfode<double>(s, oracle, x, t, xT);
      worst = std::max(worst, (a - b).norm() / b.norm());
    }
    CHECK(worst <= 1e-9);
  }
}

TEST_CASE("drift keeps the mean on the mean line") {
  const Problem p = two_dim_problem();
  const VectorXd xT = vec({1.0, -0.5});
  for (const Schedule& s : {Schedule::vp(0.1, 2.0), Schedule::brownian(1.0)}) {
    const GaussianOracle<double> oracle(p, s);
    auto mean_at = [&](double t) {
      const auto k = coeffs(s, t);
      return VectorXd(k.a * xT + k.b * p.posterior_mean(xT));
    };
    for (double t : {0.05, 0.3, 0.6, 0.9}) {
      const double h = 1e-6;
      const VectorXd fd = (mean_at(t + h) - mean_at(t - h)) / (2 * h);
      const VectorXd drift = drift_dbim<double>(s, oracle, mean_at(t), t, xT);
      CHECK((drift - fd).norm() <= 1e-7 * std::max(1.0, fd.norm()));
    }
  }
}

TEST_CASE("drift spot values and singularity") {
  const Schedule s = Schedule::brownian(1.0);
  // Constant prediction 1; at t = 0.5 the score is 2 and the h-term is 2, f = 0, g^2 = 1.
  const GaussianOracle<double> oracle(Problem::isotropic(1, 0.0, 1.0, 0.0), s);
  CHECK(drift_pfode<double>(s, oracle, vec({1.0}), 0.5, vec({2.0}))(0) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(drift_dbim<double>(s, oracle, vec({1.0}), 0.5, vec({2.0}))(0) == doctest::Approx(1.0).epsilon(1e-14));
  // Reverse SDE uses the full score: -(2 - 2) = 0.
  CHECK(std::abs(drift_sde<double>(s, oracle, vec({1.0}), 0.5, vec({2.0}))(0)) <= 1e-14);
  for (auto drift : {drift_dbim<double>, drift_pfode<double>, drift_sde<double>}) {
    CHECK(error_of([&] { (void)drift(s, oracle, vec({1.0}), 1.0, vec({2.0})); }) == ErrorKind::DegenerateCoefficient);
  }
}

TEST_CASE("Heun step is the Euler predictor with a trapezoidal corrector") {
  const Schedule s = Schedule::vp(0.1, 2.0);
  const GaussianOracle<double> oracle(two_dim_problem(), s);
  const VectorXd xT = vec({1.0, -0.5});
  const VectorXd eps = vec({0.2, 0.9});
  auto config = config_for(Method::PfOdeHeun, 2);
  const auto traj = run_sampler<double>(config, s, oracle, xT, eps);
  const double t1 = config.grid[1];
  const double t0 = config.grid[0];
  const VectorXd x1 = boot_step<double>(s, oracle, xT, t1, eps);
  const VectorXd d1 = drift_pfode<double>(s, oracle, x1, t1, xT);
  const VectorXd euler = x1 + (t0 - t1) * d1;
  const VectorXd d2 = drift_pfode<double>(s, oracle, euler, t0, xT);
  CHECK((traj.terminal() - (x1 + (t0 - t1) * 0.5 * (d1 + d2))).norm() <= 1e-14 * traj.terminal().norm());
  CHECK(traj.predictor_calls == 3);

  config.method = Method::PfOdeEuler;
  CHECK((run_sampler<double>(config, s, oracle, xT, eps).terminal() - euler).norm() <= 1e-14 * euler.norm());
}

TEST_CASE("encode and decode") {
  const Schedule s = Schedule::vp(0.1, 2.0);
  const Problem p = two_dim_problem();
  const GaussianOracle<double> oracle(p, s);
  const VectorXd xT = vec({1.0, -0.5});
  const auto grid = uniform_grid(1000);

  SUBCASE("decode inverts encode") {
    const VectorXd eps = vec({0.4, -1.3});
    const VectorXd x0 = decode<double>(s, oracle, eps, xT, grid);
    const VectorXd back = encode<double>(s, oracle, x0, xT, grid);
    CHECK((back - eps).norm() <= 1e-8);
    CHECK((decode<double>(s, oracle, back, xT, grid) - x0).norm() <= 1e-8);
  }
  SUBCASE("decode matches the deterministic sampler") {
    const VectorXd eps = vec({1.1, 0.2});
    CHECK(decode<double>(s, oracle, eps, xT, grid) ==
          run_sampler<double>(config_for(Method::DBIM1, 1000), s, oracle, xT, eps).terminal());
  }
  SUBCASE("deterministic pairing only encodes its own trajectories") {
    const GaussianOracle<double> flat(Problem::isotropic(2, 0.5, 0.1, 0.0), s);
    const auto short_grid = uniform_grid(50);
    const VectorXd eps = vec({0.5, -0.5});
    const VectorXd x0 = decode<double>(s, flat, eps, xT, short_grid);
    CHECK((encode<double>(s, flat, x0, xT, short_grid) - eps).norm() <= 1e-8);
    const VectorXd far = p.posterior_mean(xT) + vec({1.0, 1.0});
    CHECK(error_of([&] { (void)encode<double>(s, flat, far, xT, short_grid); }) == ErrorKind::InconsistentEncoding);
  }
}

TEST_CASE("spherical interpolation") {
  const VectorXd a = vec({1.0, 0.0, 0.0});
  const VectorXd b = vec({0.0, 1.0, 0.0});
  CHECK(slerp_interpolate(a, b, 0.0) == a);
  CHECK(slerp_interpolate(a, b, 1.0) == b);
  const VectorXd mid = slerp_interpolate(a, b, 0.5);
  CHECK(mid.norm() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK((mid - vec({std::sqrt(0.5), std::sqrt(0.5), 0.0})).norm() <= 1e-15);
  const VectorXd third = slerp_interpolate(a, b, 1.0 / 3.0);
  CHECK(third(0) == doctest::Approx(std::cos(M_PI / 6)).epsilon(1e-15));
  CHECK(third(1) == doctest::Approx(std::sin(M_PI / 6)).epsilon(1e-15));
  CHECK(error_of([&] { (void)slerp_interpolate(a, VectorXd::Zero(3), 0.5); }) == ErrorKind::ZeroVector);
  CHECK(error_of([&] { (void)slerp_interpolate(a, b, 1.5); }) == ErrorKind::InvalidArgument);
}
