#include <fstream>
#include <set>
#include <sstream>

#include "bridgekit/cli.hpp"

namespace bridgekit::cli {

using nlohmann::json;

namespace {

constexpr std::array kExperiments = {
    std::pair{Experiment::Sample, "sample"},           std::pair{Experiment::Marginals, "marginals"},
    std::pair{Experiment::DriftCheck, "drift-check"},  std::pair{Experiment::Convergence, "convergence"},
    std::pair{Experiment::Roundtrip, "roundtrip"},     std::pair{Experiment::Interpolate, "interpolate"},
    std::pair{Experiment::Diversity, "diversity"},
};

[[noreturn]] void fail(const std::string& msg) { throw ConfigError(msg); }

void reject_unknown_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  const std::set<std::string> keys(allowed.begin(), allowed.end());
  for (const auto& item : obj.items()) {
    if (!keys.count(item.key())) fail(where + ": unknown key '" + item.key() + "'");
  }
}

const json& require_object(const json& parent, const char* key) {
  if (!parent.contains(key)) fail(std::string("missing required section '") + key + "'");
  const json& node = parent.at(key);
  if (!node.is_object()) fail(std::string("'") + key + "' must be an object");
  return node;
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    fail(where + "." + key + " has the wrong type");
  }
}

double get_number(const json& obj, const char* key, double fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  if (!obj.at(key).is_number()) fail(where + "." + key + " must be a number");
  return obj.at(key).get<double>();
}

std::size_t get_count(const json& obj, const char* key, std::size_t fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) fail(where + "." + key + " must be a non-negative integer");
  return v.get<std::size_t>();
}

VectorXd parse_vector(const json& node, const std::string& where) {
  if (!node.is_array()) fail(where + " must be an array of numbers");
  VectorXd out(static_cast<Eigen::Index>(node.size()));
  for (std::size_t i = 0; i < node.size(); ++i) {
    if (!node[i].is_number()) fail(where + " must be an array of numbers");
    out(static_cast<Eigen::Index>(i)) = node[i].get<double>();
  }
  return out;
}

MatrixXd parse_matrix(const json& node, Eigen::Index dim, const std::string& where) {
  if (!node.is_array() || static_cast<Eigen::Index>(node.size()) != dim) fail(where + " must have d rows");
  MatrixXd out(dim, dim);
  for (Eigen::Index i = 0; i < dim; ++i) {
    const VectorXd row = parse_vector(node[static_cast<std::size_t>(i)], where);
    if (row.size() != dim) fail(where + " must be d x d");
    out.row(i) = row.transpose();
  }
  return out;
}

ScheduleSpec parse_schedule(const json& node) {
  const std::string where = "schedule";
  const std::string kind = get_or<std::string>(node, "kind", "", where);
  ScheduleSpec spec;
  spec.horizon = get_number(node, "T", 1.0, where);
  if (kind == "vp") {
    reject_unknown_keys(node, where, {"kind", "T", "beta_min", "beta_max"});
    spec.kind = ScheduleKind::VP;
    spec.params = {get_number(node, "beta_min", 0.1, where), get_number(node, "beta_max", 2.0, where)};
  } else if (kind == "ve") {
    reject_unknown_keys(node, where, {"kind", "T", "sigma_min", "sigma_max"});
    spec.kind = ScheduleKind::VE;
    spec.params = {get_number(node, "sigma_min", 0.002, where), get_number(node, "sigma_max", 80.0, where)};
  } else if (kind == "brownian") {
    reject_unknown_keys(node, where, {"kind", "T", "beta"});
    spec.kind = ScheduleKind::BrownianBridge;
    spec.params = {get_number(node, "beta", 1.0, where)};
  } else {
    fail("schedule.kind must be one of vp, ve, brownian");
  }
  return spec;
}

ProblemSpec parse_problem(const json& node) {
  const std::string where = "problem";
  reject_unknown_keys(node, where, {"dim", "M", "mean_gain", "m0", "offset", "S", "variance"});
  const std::size_t dim_raw = get_count(node, "dim", 2, where);
  if (dim_raw < 1 || dim_raw > 64) fail("problem.dim must lie in [1, 64]");
  const auto dim = static_cast<Eigen::Index>(dim_raw);
  if (node.contains("M") && node.contains("mean_gain")) fail("problem: give M or mean_gain, not both");
  if (node.contains("m0") && node.contains("offset")) fail("problem: give m0 or offset, not both");
  if (node.contains("S") && node.contains("variance")) fail("problem: give S or variance, not both");

  ProblemSpec spec;
  spec.M = node.contains("M") ? parse_matrix(node.at("M"), dim, "problem.M")
                              : MatrixXd(get_number(node, "mean_gain", 0.5, where) * MatrixXd::Identity(dim, dim));
  if (node.contains("m0")) {
    spec.m0 = parse_vector(node.at("m0"), "problem.m0");
    if (spec.m0.size() != dim) fail("problem.m0 must have d entries");
  } else {
    spec.m0 = VectorXd::Constant(dim, get_number(node, "offset", 0.0, where));
  }
  spec.S = node.contains("S") ? parse_matrix(node.at("S"), dim, "problem.S")
                              : MatrixXd(get_number(node, "variance", 1.0, where) * MatrixXd::Identity(dim, dim));
  return spec;
}

GridSpec<double> parse_grid(const json& node) {
  const std::string where = "grid";
  reject_unknown_keys(node, where, {"kind", "n_steps", "t_min", "t_max", "boot_gap", "edm_exponent"});
  GridSpec<double> spec;
  const std::string kind = get_or<std::string>(node, "kind", "uniform", where);
  if (kind == "uniform") {
    spec.kind = GridKind::UniformWithBootStep;
  } else if (kind == "edm") {
    spec.kind = GridKind::EdmPower;
  } else if (kind == "lambda_uniform") {
    spec.kind = GridKind::LambdaUniform;
  } else {
    fail("grid.kind must be one of uniform, edm, lambda_uniform");
  }
  const std::size_t n = get_count(node, "n_steps", 10, where);
  if (n < 1 || n > 1000000) fail("grid.n_steps must lie in [1, 1e6]");
  spec.n_steps = static_cast<int>(n);
  spec.t_min = get_number(node, "t_min", spec.t_min, where);
  spec.t_max = get_number(node, "t_max", spec.t_max, where);
  spec.boot_gap = get_number(node, "boot_gap", spec.boot_gap, where);
  spec.edm_exponent = get_number(node, "edm_exponent", spec.edm_exponent, where);
  return spec;
}

Method parse_method(const json& node, const std::string& where) {
  if (!node.is_string()) fail(where + " must be a string");
  const auto m = method_from_string(node.get<std::string>());
  if (!m) fail(where + ": unknown method '" + node.get<std::string>() + "'");
  return *m;
}

SamplerSpec parse_sampler(const json& node, Experiment experiment) {
  const std::string where = "sampler";
  reject_unknown_keys(node, where, {"method", "eta", "methods", "n_sweep"});
  SamplerSpec spec;
  if (node.contains("method")) spec.method = parse_method(node.at("method"), "sampler.method");
  spec.eta = get_number(node, "eta", 0.0, where);
  if (node.contains("methods")) {
    if (!node.at("methods").is_array() || node.at("methods").empty()) fail("sampler.methods must be a non-empty array");
    for (const auto& m : node.at("methods")) spec.methods.push_back(parse_method(m, "sampler.methods"));
  } else {
    spec.methods = {Method::DBIM1, Method::DBIM2, Method::DBIM3};
  }
  if (node.contains("n_sweep")) {
    const json& sweep = node.at("n_sweep");
    if (!sweep.is_array() || sweep.empty()) fail("sampler.n_sweep must be a non-empty array");
    for (const auto& v : sweep) {
      if (!v.is_number_integer() || v.get<long long>() < 1 || v.get<long long>() > 1000000) {
        fail("sampler.n_sweep entries must be integers in [1, 1e6]");
      }
      spec.n_sweep.push_back(v.get<int>());
    }
  } else if (experiment == Experiment::Diversity) {
    spec.n_sweep = {5, 10, 20, 50, 200};
  } else {
    spec.n_sweep = {8, 16, 32, 64, 128};
  }
  if (!(spec.eta >= 0.0 && spec.eta <= 1.0)) fail("sampler.eta must lie in [0, 1]");
  return spec;
}

int method_min_steps(Method m) {
  switch (m) {
    case Method::DBIM2: return 2;
    case Method::DBIM3: return 3;
    default: return 1;
  }
}

/// Builds every object the run will need so that invalid combinations are
/// reported before anything is computed.
void validate(const RunConfig& config) {
  NoiseSchedule<double> schedule = [&] {
    try {
      return config.schedule.build();
    } catch (const Error& e) {
      fail(std::string("schedule: ") + e.what());
    }
  }();
  try {
    (void)config.problem.build();
  } catch (const Error& e) {
    fail(std::string("problem: ") + e.what());
  }
  if (std::abs(config.grid.t_max - schedule.horizon()) > 1e-12 * schedule.horizon()) {
    fail("grid.t_max must equal the schedule horizon T");
  }

  auto check_grid = [&](int n_steps, Method method) {
    GridSpec<double> spec = config.grid;
    spec.n_steps = n_steps;
    if (n_steps < method_min_steps(method)) {
      fail("method " + std::string(to_string(method)) + " needs at least " + std::to_string(method_min_steps(method)) +
           " steps");
    }
    try {
      (void)make_grid(spec, schedule);
    } catch (const Error& e) {
      fail(std::string("grid: ") + e.what());
    }
  };

  const Eigen::Index d = config.problem.m0.size();
  if (config.condition && config.condition->size() != d) fail("condition must have d entries");

  switch (config.experiment) {
    case Experiment::Convergence:
      if (config.sampler.n_sweep.size() < 3) fail("convergence needs at least three entries in sampler.n_sweep");
      for (Method m : config.sampler.methods) {
        for (int n : config.sampler.n_sweep) check_grid(n, m);
      }
      if (config.convergence_reference != "exact" && config.convergence_reference != "dbim1") {
        fail("convergence.reference must be 'exact' or 'dbim1'");
      }
      for (Method m : config.sampler.methods) {
        if (m == Method::SdeEulerMaruyama) fail("convergence compares deterministic samplers; sde_em is not allowed");
      }
      if (config.sampler.eta != 0.0) fail("convergence runs DBIM1 deterministically; sampler.eta must be 0");
      if (config.grid.kind == GridKind::EdmPower) {
        fail("convergence needs a grid whose boot step does not move with N (uniform or lambda_uniform)");
      }
      if (config.trajectories < 1) fail("trajectories must be at least 1");
      break;
    case Experiment::Diversity:
      for (int n : config.sampler.n_sweep) check_grid(n, config.sampler.method);
      if (config.conditions < 1) fail("diversity.conditions must be at least 1");
      if (config.samples_per_condition < 2) fail("diversity.samples_per_condition must be at least 2");
      break;
    case Experiment::DriftCheck:
      if (config.drift_points < 1) fail("drift_check.points must be at least 1");
      break;
    case Experiment::Interpolate:
      check_grid(config.grid.n_steps, Method::DBIM1);
      if (config.interpolation_points < 2) fail("interpolate.points must be at least 2");
      break;
    case Experiment::Marginals:
      check_grid(config.grid.n_steps, config.sampler.method);
      if (config.trajectories < 2) fail("marginals needs at least two trajectories");
      break;
    case Experiment::Sample:
    case Experiment::Roundtrip:
      check_grid(config.grid.n_steps, config.experiment == Experiment::Roundtrip ? Method::DBIM1 : config.sampler.method);
      if (config.trajectories < 1) fail("trajectories must be at least 1");
      break;
  }
  if (config.trajectories > 10000000) fail("trajectories must not exceed 1e7");
}

}  // namespace

std::string to_string(Experiment experiment) {
  for (const auto& [e, name] : kExperiments) {
    if (e == experiment) return name;
  }
  return "unknown";
}

NoiseSchedule<double> ScheduleSpec::build() const {
  switch (kind) {
    case ScheduleKind::VP: return NoiseSchedule<double>::vp(params.at(0), params.at(1), horizon);
    case ScheduleKind::VE: return NoiseSchedule<double>::ve(params.at(0), params.at(1), horizon);
    case ScheduleKind::BrownianBridge: return NoiseSchedule<double>::brownian(params.at(0), horizon);
  }
  throw Error(ErrorKind::InvalidArgument, "unknown schedule kind");
}

RunConfig parse_config(const json& doc) {
  if (!doc.is_object()) fail("configuration must be a JSON object");
  reject_unknown_keys(doc, "config",
                      {"experiment", "seed", "trajectories", "schedule", "problem", "grid", "sampler", "condition",
                       "output", "drift_check", "convergence", "diversity", "interpolate"});
  RunConfig config;

  if (!doc.contains("experiment") || !doc.at("experiment").is_string()) fail("missing required string 'experiment'");
  const std::string name = doc.at("experiment").get<std::string>();
  bool found = false;
  for (const auto& [e, label] : kExperiments) {
    if (name == label) {
      config.experiment = e;
      found = true;
    }
  }
  if (!found) fail("unknown experiment '" + name + "'");

  if (doc.contains("seed")) {
    const json& seed = doc.at("seed");
    if (!seed.is_number_unsigned() && !(seed.is_number_integer() && seed.get<long long>() >= 0)) {
      fail("seed must be a non-negative integer");
    }
    config.seed = doc.at("seed").get<std::uint64_t>();
  }
  config.trajectories = get_count(doc, "trajectories", 100, "config");
  config.schedule = parse_schedule(require_object(doc, "schedule"));
  config.problem = parse_problem(doc.contains("problem") ? require_object(doc, "problem") : json::object());
  config.grid = parse_grid(doc.contains("grid") ? require_object(doc, "grid") : json::object());
  config.sampler = parse_sampler(doc.contains("sampler") ? require_object(doc, "sampler") : json::object(),
                                 config.experiment);
  if (doc.contains("condition")) config.condition = parse_vector(doc.at("condition"), "condition");
  config.output = get_or<std::string>(doc, "output", "", "config");

  if (doc.contains("drift_check")) {
    const json& node = require_object(doc, "drift_check");
    reject_unknown_keys(node, "drift_check", {"points"});
    config.drift_points = get_count(node, "points", config.drift_points, "drift_check");
  }
  if (doc.contains("convergence")) {
    const json& node = require_object(doc, "convergence");
    reject_unknown_keys(node, "convergence", {"reference"});
    config.convergence_reference = get_or<std::string>(node, "reference", "exact", "convergence");
  }
  if (doc.contains("diversity")) {
    const json& node = require_object(doc, "diversity");
    reject_unknown_keys(node, "diversity", {"conditions", "samples_per_condition"});
    config.conditions = get_count(node, "conditions", config.conditions, "diversity");
    config.samples_per_condition = get_count(node, "samples_per_condition", config.samples_per_condition, "diversity");
  }
  if (doc.contains("interpolate")) {
    const json& node = require_object(doc, "interpolate");
    reject_unknown_keys(node, "interpolate", {"points"});
    config.interpolation_points = get_count(node, "points", config.interpolation_points, "interpolate");
  }

  validate(config);
  return config;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail("cannot read config file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    fail(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(doc);
}

json to_json(const RunConfig& config) {
  auto vec = [](const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  auto mat = [&](const MatrixXd& m) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) rows.push_back(vec(m.row(i).transpose()));
    return rows;
  };

  json schedule{{"kind", std::string(to_string(config.schedule.kind))}, {"T", config.schedule.horizon}};
  switch (config.schedule.kind) {
    case ScheduleKind::VP:
      schedule["beta_min"] = config.schedule.params[0];
      schedule["beta_max"] = config.schedule.params[1];
      break;
    case ScheduleKind::VE:
      schedule["sigma_min"] = config.schedule.params[0];
      schedule["sigma_max"] = config.schedule.params[1];
      break;
    case ScheduleKind::BrownianBridge: schedule["beta"] = config.schedule.params[0]; break;
  }

  json methods = json::array();
  for (Method m : config.sampler.methods) methods.push_back(std::string(to_string(m)));

  json out{
      {"experiment", to_string(config.experiment)},
      {"seed", config.seed},
      {"trajectories", config.trajectories},
      {"schedule", schedule},
      {"problem",
       {{"dim", config.problem.m0.size()}, {"M", mat(config.problem.M)}, {"m0", vec(config.problem.m0)},
        {"S", mat(config.problem.S)}}},
      {"grid",
       {{"kind", std::string(to_string(config.grid.kind))},
        {"n_steps", config.grid.n_steps},
        {"t_min", config.grid.t_min},
        {"t_max", config.grid.t_max},
        {"boot_gap", config.grid.boot_gap},
        {"edm_exponent", config.grid.edm_exponent}}},
      {"sampler",
       {{"method", std::string(to_string(config.sampler.method))},
        {"eta", config.sampler.eta},
        {"methods", methods},
        {"n_sweep", config.sampler.n_sweep}}},
      {"drift_check", {{"points", config.drift_points}}},
      {"convergence", {{"reference", config.convergence_reference}}},
      {"diversity",
       {{"conditions", config.conditions}, {"samples_per_condition", config.samples_per_condition}}},
      {"interpolate", {{"points", config.interpolation_points}}},
  };
  if (config.condition) out["condition"] = vec(*config.condition);
  if (!config.output.empty()) out["output"] = config.output;
  return out;
}

}  // namespace bridgekit::cli
