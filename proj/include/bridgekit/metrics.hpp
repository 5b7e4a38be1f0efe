#pragma once

#include <chrono>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "bridgekit/core.hpp"

namespace bridgekit {

namespace detail {

template <typename Scalar>
void require_square(const Matrix<Scalar>& m, Eigen::Index d, const char* where) {
  if (m.rows() != d || m.cols() != d) {
    throw Error(ErrorKind::DimensionMismatch, std::string(where) + ": covariance must be d x d");
  }
}

}  // namespace detail

/// KL( N(mean_a, cov_a) || N(mean_b, cov_b) ).
template <typename Scalar>
Scalar gaussian_kl(const Vector<Scalar>& mean_a, const Matrix<Scalar>& cov_a, const Vector<Scalar>& mean_b,
                   const Matrix<Scalar>& cov_b) {
  using std::log;
  using std::max;
  detail::require_same_size(mean_a, mean_b, "gaussian_kl");
  const Eigen::Index d = mean_a.size();
  detail::require_square(cov_a, d, "gaussian_kl");
  detail::require_square(cov_b, d, "gaussian_kl");
  Eigen::LLT<Matrix<Scalar>> chol_b(cov_b);
  if (chol_b.info() != Eigen::Success) throw Error(ErrorKind::SingularCovariance, "cov_b is not positive definite");
  Eigen::LLT<Matrix<Scalar>> chol_a(cov_a);
  if (chol_a.info() != Eigen::Success) throw Error(ErrorKind::SingularCovariance, "cov_a is not positive definite");

  const Vector<Scalar> diff = mean_b - mean_a;
  const Scalar trace_term = chol_b.solve(cov_a).trace();
  const Scalar mahalanobis = diff.dot(chol_b.solve(diff));
  const Scalar logdet_b = Scalar(2) * chol_b.matrixLLT().diagonal().array().log().sum();
  const Scalar logdet_a = Scalar(2) * chol_a.matrixLLT().diagonal().array().log().sum();
  const Scalar kl = Scalar(0.5) * (trace_term + mahalanobis - Scalar(d) + logdet_b - logdet_a);
  return max(kl, Scalar(0));
}

namespace detail {

template <typename Scalar>
Matrix<Scalar> psd_sqrt(const Matrix<Scalar>& m) {
  Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> eig(m);
  const Vector<Scalar> root = eig.eigenvalues().cwiseMax(Scalar(0)).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace detail

/// W2 between Gaussians:
///   |m_a - m_b|^2 + tr(A + B - 2 (A^{1/2} B A^{1/2})^{1/2}).
template <typename Scalar>
Scalar wasserstein2_gaussian(const Vector<Scalar>& mean_a, const Matrix<Scalar>& cov_a, const Vector<Scalar>& mean_b,
                             const Matrix<Scalar>& cov_b) {
  using std::max;
  using std::sqrt;
  detail::require_same_size(mean_a, mean_b, "wasserstein2_gaussian");
  const Eigen::Index d = mean_a.size();
  detail::require_square(cov_a, d, "wasserstein2_gaussian");
  detail::require_square(cov_b, d, "wasserstein2_gaussian");
  const Matrix<Scalar> root_a = detail::psd_sqrt(cov_a);
  Matrix<Scalar> middle = root_a * cov_b * root_a;
  middle = Scalar(0.5) * (middle + middle.transpose()).eval();
  const Scalar bures = cov_a.trace() + cov_b.trace() - Scalar(2) * detail::psd_sqrt(middle).trace();
  return sqrt((mean_a - mean_b).squaredNorm() + max(bures, Scalar(0)));
}

/// Least-squares slope of log(error) against log(1/N).
template <typename Scalar = double>
Scalar fit_order(const std::vector<int>& step_counts, const std::vector<Scalar>& errors) {
  using std::log;
  if (step_counts.size() != errors.size()) throw Error(ErrorKind::DimensionMismatch, "fit_order: size mismatch");
  const std::size_t n = errors.size();
  if (n < 3) throw Error(ErrorKind::InvalidArgument, "fit_order needs at least three points");
  Scalar mx = 0;
  Scalar my = 0;
  std::vector<Scalar> xs(n);
  std::vector<Scalar> ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(step_counts[i] > 0) || !(errors[i] > 0)) {
      throw Error(ErrorKind::InvalidArgument, "fit_order needs positive step counts and errors");
    }
    xs[i] = -log(Scalar(step_counts[i]));
    ys[i] = log(errors[i]);
    mx += xs[i];
    my += ys[i];
  }
  mx /= Scalar(n);
  my /= Scalar(n);
  Scalar sxy = 0;
  Scalar sxx = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  if (!(sxx > 0)) throw Error(ErrorKind::InvalidArgument, "fit_order needs distinct step counts");
  return sxy / sxx;
}

/// Mean over coordinates of the population standard deviation across samples.
template <typename Scalar>
Scalar diversity_score(const std::vector<Vector<Scalar>>& samples) {
  using std::sqrt;
  if (samples.size() < 2) throw Error(ErrorKind::InvalidArgument, "diversity_score needs at least two samples");
  const Eigen::Index d = samples.front().size();
  Vector<Scalar> mean = Vector<Scalar>::Zero(d);
  for (const auto& s : samples) {
    detail::require_same_size(s, mean, "diversity_score");
    mean += s;
  }
  mean /= Scalar(samples.size());
  Vector<Scalar> var = Vector<Scalar>::Zero(d);
  for (const auto& s : samples) var += (s - mean).cwiseAbs2();
  var /= Scalar(samples.size());
  return var.cwiseSqrt().mean();
}

template <typename Scalar = double>
struct MomentReport {
  Scalar t = Scalar(0);
  Vector<Scalar> empirical_mean;
  Matrix<Scalar> empirical_cov;
  Vector<Scalar> target_mean;
  Matrix<Scalar> target_cov;
  std::size_t n_samples = 0;
  /// (empirical - target) mean per coordinate in units of sqrt(target var / n).
  Vector<Scalar> z_scores;

  Scalar max_abs_z() const { return z_scores.cwiseAbs().maxCoeff(); }
  /// Largest |empirical var / target var - 1| over coordinates.
  Scalar max_var_rel_err() const {
    return (empirical_cov.diagonal().array() / target_cov.diagonal().array() - Scalar(1)).abs().maxCoeff();
  }
};

/// Sample moments of a batch against a Gaussian target. Covariances use the
/// unbiased (n - 1) form.
template <typename Scalar>
MomentReport<Scalar> moment_check(const std::vector<Vector<Scalar>>& batch, Scalar t, const Vector<Scalar>& target_mean,
                                  const Matrix<Scalar>& target_cov) {
  using std::sqrt;
  const std::size_t n = batch.size();
  if (n < 2) throw Error(ErrorKind::InvalidArgument, "moment_check needs at least two samples");
  const Eigen::Index d = target_mean.size();
  detail::require_square(target_cov, d, "moment_check");
  if (!(target_cov.diagonal().minCoeff() > 0)) {
    throw Error(ErrorKind::SingularCovariance, "moment_check: target variance must be positive");
  }

  MomentReport<Scalar> out;
  out.t = t;
  out.n_samples = n;
  out.target_mean = target_mean;
  out.target_cov = target_cov;
  out.empirical_mean = Vector<Scalar>::Zero(d);
  for (const auto& x : batch) {
    detail::require_same_size(x, target_mean, "moment_check");
    out.empirical_mean += x;
  }
  out.empirical_mean /= Scalar(n);
  out.empirical_cov = Matrix<Scalar>::Zero(d, d);
  for (const auto& x : batch) {
    const Vector<Scalar> r = x - out.empirical_mean;
    out.empirical_cov.noalias() += r * r.transpose();
  }
  out.empirical_cov /= Scalar(n - 1);
  const Vector<Scalar> stderr_mean = (target_cov.diagonal() / Scalar(n)).cwiseSqrt();
  out.z_scores = (out.empirical_mean - target_mean).cwiseQuotient(stderr_mean);
  return out;
}

/// Summary of one CLI run.
struct RunReport {
  std::string experiment;
  std::map<std::string, double> metrics;
  double wall_seconds = 0.0;
  long predictor_calls = 0;
  int steps_per_sample = 0;

  bool all_finite() const {
    for (const auto& [name, value] : metrics) {
      if (!std::isfinite(value)) return false;
    }
    return std::isfinite(wall_seconds);
  }
};

}  // namespace bridgekit
