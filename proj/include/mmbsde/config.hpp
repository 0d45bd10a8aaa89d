#pragma once

// Strict reader for JSON experiment configs and builders for the module
// objects they describe. Every key must be consumed; leftovers are errors.

#include <json.hpp>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mmbsde/bsde.hpp"
#include "mmbsde/lq_control.hpp"
#include "mmbsde/pde.hpp"

namespace mmbsde {

using Json = nlohmann::ordered_json;

[[noreturn]] void config_error(const std::string& where, const std::string& message);

class ConfigObject {
public:
  ConfigObject(const Json& value, std::string path);

  const std::string& path() const { return path_; }
  std::string where(const std::string& key) const;
  bool has(const std::string& key) const;

  double number(const std::string& key);
  double number(const std::string& key, double fallback);
  double positive(const std::string& key, double fallback);
  Index integer(const std::string& key);
  Index integer(const std::string& key, Index fallback);
  std::uint64_t unsigned_integer(const std::string& key, std::uint64_t fallback);
  bool boolean(const std::string& key, bool fallback);
  std::string string(const std::string& key);
  std::string string(const std::string& key, const std::string& fallback);
  std::vector<double> numbers(const std::string& key);
  std::vector<double> numbers(const std::string& key, std::vector<double> fallback);
  /// Nested array of rows, or a bare number for a 1 x 1 matrix.
  Matrix matrix(const std::string& key);
  ConfigObject object(const std::string& key);
  std::optional<ConfigObject> optional_object(const std::string& key);
  std::vector<ConfigObject> objects(const std::string& key);
  const Json& raw(const std::string& key);

  /// Throws ConfigInvalid naming the first unknown key.
  void finish() const;

private:
  const Json& take(const std::string& key);

  const Json* value_;
  std::string path_;
  std::set<std::string> used_;
};

/// Runs fn, prefixing module errors with the config location.
template <typename Fn>
auto with_context(const std::string& where, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ConfigInvalid) throw;
    const std::string what = e.what();
    const std::size_t prefix = to_string(e.code()).size() + 2;
    throw Error(e.code(), where + ": " + (what.size() > prefix ? what.substr(prefix) : what));
  }
}

GeneratorMatrix<double> read_generator(ConfigObject& obj, const std::string& key);
StatePartition read_partition(ConfigObject& obj, const std::string& key, Index states);
/// {fast, slow, partition, epsilon = 0.05}.
TwoScaleGenerator<double> read_two_scale(ConfigObject obj);
TimeGrid read_grid(ConfigObject obj);

struct DriverSpec {
  Driver driver;
  std::string type;
  Matrix constants;  // constant_per_state: k x m
  Vector rates;      // linear_per_state
};
/// zero | linear {lambda} | linear_per_state {c} | constant_per_state {c}.
DriverSpec read_driver(ConfigObject obj, Index default_dim = 1);

struct TerminalSpec {
  TerminalCondition xi;
  std::string type;
  Vector value;  // constant
};
/// constant {value} | brownian_endpoint.
TerminalSpec read_terminal(ConfigObject obj);

/// constant {state} | path {initial_state, jump_times, states} |
/// simulate {generator, initial_state, count}. Simulated paths use stream p
/// of derive_key(seed, "chain").
std::vector<ChainPath> read_chains(ConfigObject obj, double t0, double horizon, std::uint64_t seed,
                                   bool allow_many);

struct PdeSpec {
  PdeProblem problem;
  std::string terminal_type;
  std::string reaction_type;
  Vector reaction_c;        // linear reaction rates per chain state
  Vector terminal_value;    // constant terminal
  double gaussian_width = 0.0;
  double gaussian_center = 0.0;
  Vector gaussian_amplitude;
  bool constant_sigma = false;
  double sigma_value = 0.0;
  bool zero_drift = false;
};
PdeSpec read_pde_problem(ConfigObject obj);

LqProblem read_lq_problem(ConfigObject& obj);

std::vector<ProbePoint> read_probes(ConfigObject& obj, const std::string& key);

}  // namespace mmbsde
