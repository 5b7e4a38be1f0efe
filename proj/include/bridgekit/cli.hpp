#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "bridgekit/metrics.hpp"
#include "bridgekit/oracle.hpp"
#include "bridgekit/samplers.hpp"
#include "bridgekit/schedule.hpp"

namespace bridgekit::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfigInvalid = 2;
inline constexpr int kExitNumericalFailure = 3;

/// Raised for any problem found while reading or validating a run configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Experiment { Sample, Marginals, DriftCheck, Convergence, Roundtrip, Interpolate, Diversity };

std::string to_string(Experiment experiment);

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::VP;
  std::vector<double> params;
  double horizon = 1.0;

  NoiseSchedule<double> build() const;
};

struct ProblemSpec {
  MatrixXd M;
  VectorXd m0;
  MatrixXd S;

  GaussianBridgeProblem<double> build() const { return GaussianBridgeProblem<double>(M, m0, S); }
};

struct SamplerSpec {
  Method method = Method::DBIM1;
  double eta = 0.0;
  /// Methods compared by the convergence experiment.
  std::vector<Method> methods;
  std::vector<int> n_sweep;
};

struct RunConfig {
  Experiment experiment = Experiment::Sample;
  std::uint64_t seed = 0;
  std::size_t trajectories = 100;
  ScheduleSpec schedule;
  ProblemSpec problem;
  GridSpec<double> grid;
  SamplerSpec sampler;
  /// Fixed condition x_T; drawn from the seed when absent.
  std::optional<VectorXd> condition;
  std::string output;

  // Experiment-specific knobs.
  std::size_t drift_points = 1000;
  std::string convergence_reference = "exact";
  std::size_t conditions = 4;
  std::size_t samples_per_condition = 5;
  std::size_t interpolation_points = 9;
};

/// Parses and fully validates a configuration. Throws ConfigError.
RunConfig parse_config(const nlohmann::json& doc);
RunConfig load_config(const std::filesystem::path& path);

/// The configuration with every default filled in.
nlohmann::json to_json(const RunConfig& config);

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

std::string format_real(double value);
void write_csv(const Table& table, std::ostream& out);

struct RunResult {
  Table table;
  RunReport report;
};

/// Runs the configured experiment in memory. `threads` = 0 picks the hardware
/// concurrency; results do not depend on it. Throws bridgekit::Error on
/// numerical failure.
RunResult execute(const RunConfig& config, unsigned threads);

/// Full CLI `run` command: load, validate, execute, then write
/// <out>/<experiment>.csv and <out>/report.json. Returns the process exit code.
int run_command(const std::filesystem::path& config_path, const std::optional<std::filesystem::path>& out_dir,
                std::optional<std::uint64_t> seed, unsigned threads, std::ostream& log);

using LambdaFn = std::function<double(const NoiseSchedule<double>&, double)>;

struct SelftestHooks {
  /// The lambda_t implementation under test; defaults to lambda_of.
  LambdaFn lambda;
};

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

std::vector<CheckResult> selftest_checks(const SelftestHooks& hooks = {});

/// Prints the pass/fail table; returns 0 only if every check passed.
int selftest(std::ostream& out, const SelftestHooks& hooks = {});

/// Thread count from the flag, falling back to BRIDGEKIT_THREADS, then 0 (auto).
unsigned resolve_thread_flag(std::optional<unsigned> flag);

}  // namespace bridgekit::cli
