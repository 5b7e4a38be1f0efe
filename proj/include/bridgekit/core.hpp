#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace bridgekit {

inline constexpr std::string_view kVersion = "0.3.0";

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using VectorXd = Vector<double>;
using MatrixXd = Matrix<double>;

enum class ErrorKind {
  TimeOutOfRange,
  DegenerateCoefficient,
  NotBracketed,
  InvalidGridParams,
  DimensionMismatch,
  InitialStepSingularity,
  ZeroRho,
  SingularSystem,
  NonpositiveStep,
  ZeroVector,
  SingularCovariance,
  InvalidArgument,
  InconsistentEncoding,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::TimeOutOfRange: return "TimeOutOfRange";
    case ErrorKind::DegenerateCoefficient: return "DegenerateCoefficient";
    case ErrorKind::NotBracketed: return "NotBracketed";
    case ErrorKind::InvalidGridParams: return "InvalidGridParams";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::InitialStepSingularity: return "InitialStepSingularity";
    case ErrorKind::ZeroRho: return "ZeroRho";
    case ErrorKind::SingularSystem: return "SingularSystem";
    case ErrorKind::NonpositiveStep: return "NonpositiveStep";
    case ErrorKind::ZeroVector: return "ZeroVector";
    case ErrorKind::SingularCovariance: return "SingularCovariance";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::InconsistentEncoding: return "InconsistentEncoding";
  }
  return "Unknown";
}

/// Every numerical failure in the library surfaces as this exception; `kind()`
/// tells callers which precondition broke.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

namespace detail {

template <typename A, typename B>
void require_same_size(const A& a, const B& b, const char* where) {
  if (a.size() != b.size()) {
    throw Error(ErrorKind::DimensionMismatch,
                std::string(where) + ": " + std::to_string(a.size()) + " vs " +
                    std::to_string(b.size()));
  }
}

}  // namespace detail
}  // namespace bridgekit
