#include "mmbsde/config.hpp"

#include <cmath>

#include "mmbsde/random.hpp"

namespace mmbsde {

void config_error(const std::string& where, const std::string& message) {
  throw Error(ErrorCode::ConfigInvalid, where + ": " + message);
}

ConfigObject::ConfigObject(const Json& value, std::string path) : value_(&value), path_(std::move(path)) {
  if (!value.is_object()) config_error(path_, "expected an object");
}

std::string ConfigObject::where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

bool ConfigObject::has(const std::string& key) const { return value_->contains(key); }

const Json& ConfigObject::take(const std::string& key) {
  if (!has(key)) config_error(where(key), "missing required field");
  used_.insert(key);
  return value_->at(key);
}

const Json& ConfigObject::raw(const std::string& key) { return take(key); }

namespace {

double as_number(const Json& v, const std::string& where) {
  if (!v.is_number()) config_error(where, "expected a number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) config_error(where, "expected a finite number");
  return x;
}

Index as_integer(const Json& v, const std::string& where) {
  if (v.is_number_integer()) return v.get<Index>();
  if (v.is_number_float()) {
    const double x = v.get<double>();
    if (x == std::floor(x) && std::abs(x) < 9e15) return static_cast<Index>(x);
  }
  config_error(where, "expected an integer");
}

std::vector<double> as_numbers(const Json& v, const std::string& where) {
  if (v.is_number()) return {as_number(v, where)};
  if (!v.is_array()) config_error(where, "expected an array of numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(as_number(v[i], where + "[" + std::to_string(i) + "]"));
  return out;
}

Matrix as_matrix(const Json& v, const std::string& where) {
  if (v.is_number()) return Matrix::Constant(1, 1, as_number(v, where));
  if (!v.is_array() || v.empty()) config_error(where, "expected a nonempty array of rows");
  const auto rows = static_cast<Index>(v.size());
  Index cols = -1;
  Matrix m;
  for (Index i = 0; i < rows; ++i) {
    const std::string at = where + "[" + std::to_string(i) + "]";
    const Json& row = v[static_cast<std::size_t>(i)];
    if (!row.is_array()) config_error(at, "expected a row array");
    if (cols < 0) {
      cols = static_cast<Index>(row.size());
      if (cols == 0) config_error(at, "empty row");
      m.resize(rows, cols);
    }
    if (static_cast<Index>(row.size()) != cols) config_error(at, "ragged matrix");
    for (Index j = 0; j < cols; ++j)
      m(i, j) = as_number(row[static_cast<std::size_t>(j)], at + "[" + std::to_string(j) + "]");
  }
  return m;
}

}  // namespace

double ConfigObject::number(const std::string& key) { return as_number(take(key), where(key)); }

double ConfigObject::number(const std::string& key, double fallback) {
  return has(key) ? number(key) : fallback;
}

double ConfigObject::positive(const std::string& key, double fallback) {
  const double x = number(key, fallback);
  if (!(x > 0)) config_error(where(key), "must be positive");
  return x;
}

Index ConfigObject::integer(const std::string& key) { return as_integer(take(key), where(key)); }

Index ConfigObject::integer(const std::string& key, Index fallback) { return has(key) ? integer(key) : fallback; }

std::uint64_t ConfigObject::unsigned_integer(const std::string& key, std::uint64_t fallback) {
  if (!has(key)) return fallback;
  const Json& v = take(key);
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  const Index x = as_integer(v, where(key));
  if (x < 0) config_error(where(key), "must be nonnegative");
  return static_cast<std::uint64_t>(x);
}

bool ConfigObject::boolean(const std::string& key, bool fallback) {
  if (!has(key)) return fallback;
  const Json& v = take(key);
  if (!v.is_boolean()) config_error(where(key), "expected true or false");
  return v.get<bool>();
}

std::string ConfigObject::string(const std::string& key) {
  const Json& v = take(key);
  if (!v.is_string()) config_error(where(key), "expected a string");
  return v.get<std::string>();
}

std::string ConfigObject::string(const std::string& key, const std::string& fallback) {
  return has(key) ? string(key) : fallback;
}

std::vector<double> ConfigObject::numbers(const std::string& key) { return as_numbers(take(key), where(key)); }

std::vector<double> ConfigObject::numbers(const std::string& key, std::vector<double> fallback) {
  return has(key) ? numbers(key) : fallback;
}

Matrix ConfigObject::matrix(const std::string& key) { return as_matrix(take(key), where(key)); }

ConfigObject ConfigObject::object(const std::string& key) { return {take(key), where(key)}; }

std::optional<ConfigObject> ConfigObject::optional_object(const std::string& key) {
  if (!has(key)) return std::nullopt;
  return object(key);
}

std::vector<ConfigObject> ConfigObject::objects(const std::string& key) {
  const Json& v = take(key);
  if (!v.is_array()) config_error(where(key), "expected an array of objects");
  std::vector<ConfigObject> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.emplace_back(v[i], where(key) + "[" + std::to_string(i) + "]");
  return out;
}

void ConfigObject::finish() const {
  for (auto it = value_->begin(); it != value_->end(); ++it)
    if (!used_.count(it.key())) config_error(where(it.key()), "unknown field");
}

GeneratorMatrix<double> read_generator(ConfigObject& obj, const std::string& key) {
  const Matrix q = obj.matrix(key);
  return with_context(obj.where(key), [&] { return validate_generator(q); });
}

StatePartition read_partition(ConfigObject& obj, const std::string& key, Index states) {
  const Json& v = obj.raw(key);
  const std::string at = obj.where(key);
  if (!v.is_array()) config_error(at, "expected an array of state-index arrays");
  std::vector<std::vector<Index>> blocks;
  for (std::size_t k = 0; k < v.size(); ++k) {
    const std::string bk = at + "[" + std::to_string(k) + "]";
    if (!v[k].is_array()) config_error(bk, "expected an array of state indices");
    std::vector<Index> block;
    for (std::size_t j = 0; j < v[k].size(); ++j) block.push_back(as_integer(v[k][j], bk + "[" + std::to_string(j) + "]"));
    blocks.push_back(std::move(block));
  }
  return with_context(at, [&] { return StatePartition(states, std::move(blocks)); });
}

TwoScaleGenerator<double> read_two_scale(ConfigObject obj) {
  auto fast = read_generator(obj, "fast");
  auto slow = read_generator(obj, "slow");
  auto partition = read_partition(obj, "partition", fast.size());
  const double eps = obj.positive("epsilon", 0.05);
  obj.finish();
  return with_context(obj.path(), [&] { return make_two_scale(fast, slow, eps, partition); });
}

TimeGrid read_grid(ConfigObject obj) {
  const double t0 = obj.number("t0", 0.0);
  const double horizon = obj.number("horizon", 1.0);
  const Index steps = obj.integer("steps");
  obj.finish();
  if (steps < 1) config_error(obj.where("steps"), "must be at least 1");
  return with_context(obj.path(), [&] { return TimeGrid::uniform(t0, horizon, static_cast<std::size_t>(steps)); });
}

DriverSpec read_driver(ConfigObject obj, Index default_dim) {
  DriverSpec spec;
  spec.type = obj.string("type");
  if (spec.type == "zero") {
    spec.driver = zero_driver(obj.integer("dim", default_dim));
  } else if (spec.type == "linear") {
    spec.driver = linear_driver(obj.number("lambda"), obj.integer("dim", default_dim));
  } else if (spec.type == "linear_per_state") {
    const auto c = obj.numbers("c");
    spec.rates = Eigen::Map<const Vector>(c.data(), static_cast<Index>(c.size()));
    spec.driver = linear_per_state_driver(spec.rates, obj.integer("dim", default_dim));
  } else if (spec.type == "constant_per_state") {
    // One row of per-state values per component; a flat list means k = 1.
    const Json& c = obj.raw("c");
    spec.constants = c.is_array() && !c.empty() && c[0].is_array()
                         ? as_matrix(c, obj.where("c"))
                         : Matrix(as_matrix(Json::array({c}), obj.where("c")));
    spec.driver = constant_per_state_driver(spec.constants);
  } else {
    config_error(obj.where("type"),
                 "unknown driver '" + spec.type + "' (zero, linear, linear_per_state, constant_per_state)");
  }
  obj.finish();
  if (spec.driver.dim < 1) config_error(obj.where("dim"), "must be at least 1");
  return spec;
}

TerminalSpec read_terminal(ConfigObject obj) {
  TerminalSpec spec;
  spec.type = obj.string("type");
  if (spec.type == "constant") {
    const auto v = obj.numbers("value");
    if (v.empty()) config_error(obj.where("value"), "needs at least one component");
    spec.value = Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
    spec.xi = constant_terminal(spec.value);
  } else if (spec.type == "brownian_endpoint") {
    spec.xi = brownian_endpoint_terminal(0);
  } else {
    config_error(obj.where("type"), "unknown terminal '" + spec.type + "' (constant, brownian_endpoint)");
  }
  obj.finish();
  return spec;
}

std::vector<ChainPath> read_chains(ConfigObject obj, double t0, double horizon, std::uint64_t seed,
                                   bool allow_many) {
  const std::string type = obj.string("type");
  std::vector<ChainPath> out;
  if (type == "constant") {
    const Index state = obj.integer("state", 0);
    if (state < 0) config_error(obj.where("state"), "must be nonnegative");
    out.push_back(ChainPath::constant(t0, horizon, state));
  } else if (type == "path") {
    const Index initial = obj.integer("initial_state", 0);
    const auto times = obj.numbers("jump_times", {});
    std::vector<Index> states;
    for (double s : obj.numbers("states", {})) {
      if (s != std::floor(s) || s < 0) config_error(obj.where("states"), "states must be nonnegative integers");
      states.push_back(static_cast<Index>(s));
    }
    out.push_back(with_context(obj.path(), [&] { return ChainPath(t0, horizon, initial, times, states); }));
  } else if (type == "simulate") {
    const auto q = read_generator(obj, "generator");
    const Index initial = obj.integer("initial_state", 0);
    const Index count = obj.integer("count", 1);
    if (count < 1) config_error(obj.where("count"), "must be at least 1");
    if (count > 1 && !allow_many) config_error(obj.where("count"), "this experiment takes a single chain path");
    out = with_context(obj.path(), [&] {
      return simulate_chains(q, initial, t0, horizon, static_cast<std::size_t>(count), derive_key(seed, "chain"));
    });
  } else {
    config_error(obj.where("type"), "unknown chain '" + type + "' (constant, path, simulate)");
  }
  obj.finish();
  return out;
}

namespace {

// A bare number, or {"polynomial": [c0, c1, ...]} in x.
std::function<double(double)> read_coefficient(ConfigObject& obj, const std::string& key, double fallback,
                                               bool& is_constant, double& constant) {
  is_constant = true;
  constant = fallback;
  if (!obj.has(key)) return [fallback](double) { return fallback; };
  const Json& v = obj.raw(key);
  if (v.is_number()) {
    constant = as_number(v, obj.where(key));
    const double c = constant;
    return [c](double) { return c; };
  }
  ConfigObject poly(v, obj.where(key));
  const auto coefficients = poly.numbers("polynomial");
  poly.finish();
  if (coefficients.empty()) config_error(poly.where("polynomial"), "needs at least one coefficient");
  is_constant = coefficients.size() == 1;
  constant = coefficients.front();
  return [coefficients](double x) {
    double sum = 0.0;
    for (auto it = coefficients.rbegin(); it != coefficients.rend(); ++it) sum = sum * x + *it;
    return sum;
  };
}

Vector to_vector(const std::vector<double>& v) { return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size())); }

}  // namespace

PdeSpec read_pde_problem(ConfigObject obj) {
  PdeSpec spec;
  PdeProblem& p = spec.problem;
  double drift_value = 0.0;
  bool drift_constant = true;
  p.drift = read_coefficient(obj, "drift", 0.0, drift_constant, drift_value);
  spec.zero_drift = drift_constant && drift_value == 0.0;
  p.sigma = read_coefficient(obj, "sigma", 1.0, spec.constant_sigma, spec.sigma_value);

  ConfigObject terminal = obj.object("terminal");
  spec.terminal_type = terminal.string("type");
  if (spec.terminal_type == "constant") {
    spec.terminal_value = to_vector(terminal.numbers("value"));
    const Vector v = spec.terminal_value;
    p.terminal = [v](double) { return v; };
    p.dim = v.size();
  } else if (spec.terminal_type == "linear") {
    const Vector slope = to_vector(terminal.numbers("slope"));
    const Vector intercept = to_vector(terminal.numbers("intercept", std::vector<double>(slope.size(), 0.0)));
    if (slope.size() != intercept.size()) config_error(terminal.where("intercept"), "length differs from slope");
    p.terminal = [slope, intercept](double x) { return Vector(intercept + slope * x); };
    p.dim = slope.size();
  } else if (spec.terminal_type == "gaussian") {
    spec.gaussian_width = terminal.positive("width", 1.0);
    spec.gaussian_center = terminal.number("center", 0.0);
    spec.gaussian_amplitude = to_vector(terminal.numbers("amplitude", {1.0}));
    const double s = spec.gaussian_width, m = spec.gaussian_center;
    const Vector a = spec.gaussian_amplitude;
    p.terminal = [s, m, a](double x) { return Vector(a * std::exp(-(x - m) * (x - m) / (2 * s * s))); };
    p.dim = a.size();
  } else {
    config_error(terminal.where("type"), "unknown terminal '" + spec.terminal_type + "' (constant, linear, gaussian)");
  }
  terminal.finish();
  if (p.dim < 1) config_error(terminal.path(), "needs at least one component");

  spec.reaction_type = "none";
  const Index dim = p.dim;
  p.reaction = [dim](double, double, const Vector&, const Vector&, Index) { return Vector(Vector::Zero(dim)); };
  if (auto reaction = obj.optional_object("reaction")) {
    spec.reaction_type = reaction->string("type");
    if (spec.reaction_type == "linear") {
      spec.reaction_c = to_vector(reaction->numbers("c"));
      if (spec.reaction_c.size() == 0) config_error(reaction->where("c"), "needs one rate per chain state");
      p.reaction = linear_reaction(spec.reaction_c);
      p.reaction_lipschitz = spec.reaction_c.cwiseAbs().maxCoeff();
    } else if (spec.reaction_type != "none") {
      config_error(reaction->where("type"), "unknown reaction '" + spec.reaction_type + "' (none, linear)");
    }
    reaction->finish();
  }

  p.horizon = obj.positive("horizon", 1.0);
  p.x_lo = obj.number("x_lo");
  p.x_hi = obj.number("x_hi");
  if (!(p.x_hi > p.x_lo)) config_error(obj.where("x_hi"), "must exceed x_lo");
  p.space_points = obj.integer("space_points", 201);
  const Index steps = obj.integer("time_steps", 200);
  if (p.space_points < 3) config_error(obj.where("space_points"), "must be at least 3");
  if (steps < 1) config_error(obj.where("time_steps"), "must be at least 1");
  p.time_steps = static_cast<std::size_t>(steps);
  p.sigma_min = obj.positive("sigma_min", 1e-8);
  obj.finish();
  return spec;
}

namespace {

// A matrix, or {"polynomial": [M0, M1, ...]} in t.
MatrixPolynomial read_polynomial(ConfigObject& obj, const std::string& key) {
  const Json& v = obj.raw(key);
  if (v.is_object()) {
    ConfigObject poly(v, obj.where(key));
    const Json& list = poly.raw("polynomial");
    if (!list.is_array() || list.empty()) config_error(poly.where("polynomial"), "expected a nonempty list of matrices");
    MatrixPolynomial out;
    for (std::size_t i = 0; i < list.size(); ++i)
      out.coefficients.push_back(as_matrix(list[i], poly.where("polynomial") + "[" + std::to_string(i) + "]"));
    for (const auto& c : out.coefficients)
      if (c.rows() != out.rows() || c.cols() != out.cols())
        config_error(poly.where("polynomial"), "coefficients differ in shape");
    poly.finish();
    return out;
  }
  return MatrixPolynomial::constant(as_matrix(v, obj.where(key)));
}

}  // namespace

LqProblem read_lq_problem(ConfigObject& obj) {
  LqProblem p;
  p.horizon = obj.positive("horizon", 1.0);
  p.initial_state = to_vector(obj.numbers("initial_state"));
  p.initial_regime = obj.integer("initial_regime", 0);
  for (auto& r : obj.objects("regimes")) {
    LqRegime regime{read_polynomial(r, "a"), read_polynomial(r, "b"), read_polynomial(r, "c"),
                    read_polynomial(r, "d"), read_polynomial(r, "r"), read_polynomial(r, "n"),
                    r.matrix("q_terminal")};
    r.finish();
    p.regimes.push_back(std::move(regime));
  }
  if (p.regimes.empty()) config_error(obj.where("regimes"), "needs at least one regime");
  p.generator = obj.has("generator") ? obj.matrix("generator") : Matrix::Zero(1, 1);
  with_context(obj.path(), [&] { return validate_lq_problem(p); });
  return p;
}

std::vector<ProbePoint> read_probes(ConfigObject& obj, const std::string& key) {
  const Json& v = obj.raw(key);
  const std::string at = obj.where(key);
  if (!v.is_array() || v.empty()) config_error(at, "expected a nonempty array of [t, x] pairs");
  std::vector<ProbePoint> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::string pi = at + "[" + std::to_string(i) + "]";
    const auto pair = as_numbers(v[i], pi);
    if (pair.size() != 2) config_error(pi, "expected [t, x]");
    out.push_back({pair[0], pair[1]});
  }
  return out;
}

}  // namespace mmbsde
