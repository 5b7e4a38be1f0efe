#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>

#include "bridgekit/bridge.hpp"
#include "bridgekit/core.hpp"
#include "bridgekit/random.hpp"
#include "bridgekit/schedule.hpp"

namespace bridgekit {

/// Jointly Gaussian endpoint model: x_0 | x_T ~ N(M x_T + m0, S).
template <typename Scalar = double>
class GaussianBridgeProblem {
 public:
  static constexpr Eigen::Index kMaxDim = 64;

  GaussianBridgeProblem(Matrix<Scalar> M, Vector<Scalar> m0, Matrix<Scalar> S)
      : M_(std::move(M)), m0_(std::move(m0)), S_(std::move(S)) {
    using std::abs;
    const Eigen::Index d = m0_.size();
    if (d < 1 || d > kMaxDim) throw Error(ErrorKind::InvalidArgument, "dimension must lie in [1, 64]");
    if (M_.rows() != d || M_.cols() != d || S_.rows() != d || S_.cols() != d) {
      throw Error(ErrorKind::DimensionMismatch, "M and S must be d x d");
    }
    if ((S_ - S_.transpose()).cwiseAbs().maxCoeff() > Scalar(1e-12)) {
      throw Error(ErrorKind::InvalidArgument, "S must be symmetric");
    }
    Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> eig(S_, Eigen::EigenvaluesOnly);
    if (eig.eigenvalues().minCoeff() < Scalar(-1e-12)) {
      throw Error(ErrorKind::InvalidArgument, "S must be positive semi-definite");
    }
  }

  /// Isotropic convenience form: M = mean_gain I, m0 = offset, S = variance I.
  static GaussianBridgeProblem isotropic(Eigen::Index dim, Scalar mean_gain, Scalar offset, Scalar variance) {
    return GaussianBridgeProblem(mean_gain * Matrix<Scalar>::Identity(dim, dim),
                                 Vector<Scalar>::Constant(dim, offset),
                                 variance * Matrix<Scalar>::Identity(dim, dim));
  }

  Eigen::Index dim() const { return m0_.size(); }
  const Matrix<Scalar>& M() const { return M_; }
  const Vector<Scalar>& m0() const { return m0_; }
  const Matrix<Scalar>& S() const { return S_; }

  Vector<Scalar> posterior_mean(const Eigen::Ref<const Vector<Scalar>>& xT) const {
    detail::require_same_size(xT, m0_, "posterior_mean");
    return M_ * xT + m0_;
  }

 private:
  Matrix<Scalar> M_;
  Vector<Scalar> m0_;
  Matrix<Scalar> S_;
};

/// Contract for x_theta(x_t, t, x_T), the estimate of E[x_0 | x_t, x_T].
template <typename Scalar = double>
class DataPredictor {
 public:
  virtual ~DataPredictor() = default;

  virtual Eigen::Index dim() const = 0;
  virtual Vector<Scalar> predict(VecRef<Scalar> x, Scalar t, VecRef<Scalar> xT) const = 0;

  /// d predict / d x. The default uses central differences, which is exact up
  /// to rounding for affine predictors.
  virtual Matrix<Scalar> jacobian(VecRef<Scalar> x, Scalar t, VecRef<Scalar> xT) const {
    using std::abs;
    using std::max;
    using std::sqrt;
    const Eigen::Index d = x.size();
    Matrix<Scalar> jac(d, d);
    Vector<Scalar> probe = x;
    for (Eigen::Index j = 0; j < d; ++j) {
      const Scalar h = sqrt(Eigen::NumTraits<Scalar>::epsilon()) * max(Scalar(1), abs(x(j)));
      probe(j) = x(j) + h;
      const Vector<Scalar> up = predict(probe, t, xT);
      probe(j) = x(j) - h;
      const Vector<Scalar> down = predict(probe, t, xT);
      probe(j) = x(j);
      jac.col(j) = (up - down) / (Scalar(2) * h);
    }
    return jac;
  }
};

/// Exact posterior mean under a GaussianBridgeProblem:
///   E[x_0 | x_t, x_T] = m + b S (b^2 S + c^2 I)^{-1} (x_t - a x_T - b m).
template <typename Scalar = double>
class GaussianOracle : public DataPredictor<Scalar> {
 public:
  GaussianOracle(GaussianBridgeProblem<Scalar> problem, NoiseSchedule<Scalar> schedule)
      : problem_(std::move(problem)), schedule_(std::move(schedule)) {}

  const GaussianBridgeProblem<Scalar>& problem() const { return problem_; }
  const NoiseSchedule<Scalar>& schedule() const { return schedule_; }

  Eigen::Index dim() const override { return problem_.dim(); }

  Vector<Scalar> predict(VecRef<Scalar> x, Scalar t, VecRef<Scalar> xT) const override {
    detail::require_same_size(x, xT, "predict");
    detail::require_same_size(x, problem_.m0(), "predict");
    const auto k = coeffs(schedule_, t);
    Vector<Scalar> mean = problem_.posterior_mean(xT);
    if (k.b == 0) return mean;
    const Vector<Scalar> residual = x - k.a * xT - k.b * mean;
    return mean + k.b * (problem_.S() * solve_system(k, residual));
  }

  Matrix<Scalar> jacobian(VecRef<Scalar> x, Scalar t, VecRef<Scalar> xT) const override {
    detail::require_same_size(x, xT, "jacobian");
    const Eigen::Index d = dim();
    const auto k = coeffs(schedule_, t);
    if (k.b == 0) return Matrix<Scalar>::Zero(d, d);
    return k.b * problem_.S() * solve_system(k, Matrix<Scalar>::Identity(d, d));
  }

 private:
  template <typename Rhs>
  auto solve_system(const BridgeCoeffs<Scalar>& k, const Rhs& rhs) const {
    Matrix<Scalar> system = (k.b * k.b) * problem_.S();
    system.diagonal().array() += k.c * k.c;
    Eigen::LLT<Matrix<Scalar>> llt(system);
    if (llt.info() != Eigen::Success) {
      throw Error(ErrorKind::SingularSystem, "b^2 S + c^2 I is not positive definite");
    }
    return Matrix<Scalar>(llt.solve(rhs));
  }

  GaussianBridgeProblem<Scalar> problem_;
  NoiseSchedule<Scalar> schedule_;
};

/// GaussianOracle plus a constant bias, for studying how predictor error
/// propagates through a sampler.
template <typename Scalar = double>
class PerturbedOracle : public DataPredictor<Scalar> {
 public:
  PerturbedOracle(GaussianOracle<Scalar> exact, Vector<Scalar> bias) : exact_(std::move(exact)), bias_(std::move(bias)) {
    detail::require_same_size(bias_, exact_.problem().m0(), "PerturbedOracle");
  }

  /// Bias along a fixed random direction with norm `bias_norm`.
  PerturbedOracle(GaussianOracle<Scalar> exact, Scalar bias_norm, std::uint64_t seed) : exact_(std::move(exact)) {
    const Vector<Scalar> dir = NormalStream(seed, StreamTag::Bias).draw<Scalar>(0, 0, exact_.dim());
    bias_ = bias_norm * dir / dir.norm();
  }

  const Vector<Scalar>& bias() const { return bias_; }
  Eigen::Index dim() const override { return exact_.dim(); }

  Vector<Scalar> predict(VecRef<Scalar> x, Scalar t, VecRef<Scalar> xT) const override {
    return exact_.predict(x, t, xT) + bias_;
  }
  Matrix<Scalar> jacobian(VecRef<Scalar> x, Scalar t, VecRef<Scalar> xT) const override {
    return exact_.jacobian(x, t, xT);
  }

 private:
  GaussianOracle<Scalar> exact_;
  Vector<Scalar> bias_;
};

template <typename Scalar = double>
struct GaussianMarginal {
  Vector<Scalar> mean;
  Matrix<Scalar> cov;
};

/// q(x_t | x_T) = N(a x_T + b m(x_T), b^2 S + c^2 I)
template <typename Scalar>
GaussianMarginal<Scalar> marginal_at(const GaussianBridgeProblem<Scalar>& problem,
                                     const NoiseSchedule<Scalar>& schedule, Scalar t, VecRef<Scalar> xT) {
  const auto k = coeffs(schedule, t);
  GaussianMarginal<Scalar> out;
  out.mean = k.a * xT + k.b * problem.posterior_mean(xT);
  out.cov = (k.b * k.b) * problem.S();
  out.cov.diagonal().array() += k.c * k.c;
  return out;
}

/// Bridge score from a data prediction: -(x - a x_T - b x_hat) / c^2.
template <typename Scalar>
Vector<Scalar> score_from_predictor(const NoiseSchedule<Scalar>& schedule, VecRef<Scalar> x, Scalar t,
                                    VecRef<Scalar> xT, VecRef<Scalar> x_hat) {
  detail::require_same_size(x, xT, "score_from_predictor");
  detail::require_same_size(x, x_hat, "score_from_predictor");
  const auto k = coeffs(schedule, t);
  if (k.c == 0) throw Error(ErrorKind::DegenerateCoefficient, "score undefined at c_t = 0");
  return -(x - k.a * xT - k.b * x_hat) / (k.c * k.c);
}

/// Exact probability-flow map of the Gaussian bridge from time t to time s.
/// The marginals share S's eigenbasis, so along each eigenvector the flow is the
/// monotone rescaling of the centred state by the ratio of marginal std devs.
template <typename Scalar>
Vector<Scalar> exact_flow(const GaussianBridgeProblem<Scalar>& problem, const NoiseSchedule<Scalar>& schedule,
                          VecRef<Scalar> x, Scalar t, Scalar s, VecRef<Scalar> xT) {
  using std::sqrt;
  detail::require_same_size(x, xT, "exact_flow");
  const auto kt = coeffs(schedule, t);
  const auto ks = coeffs(schedule, s);
  if (kt.c == 0) throw Error(ErrorKind::DegenerateCoefficient, "exact_flow cannot leave t = T");
  const Vector<Scalar> m = problem.posterior_mean(xT);
  Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> eig(problem.S());
  const Matrix<Scalar>& U = eig.eigenvectors();
  Vector<Scalar> centred = U.transpose() * (x - kt.a * xT - kt.b * m);
  for (Eigen::Index i = 0; i < centred.size(); ++i) {
    const Scalar lam = eig.eigenvalues()(i) > 0 ? eig.eigenvalues()(i) : Scalar(0);
    centred(i) *= sqrt((ks.b * ks.b * lam + ks.c * ks.c) / (kt.b * kt.b * lam + kt.c * kt.c));
  }
  return ks.a * xT + ks.b * m + U * centred;
}

}  // namespace bridgekit
