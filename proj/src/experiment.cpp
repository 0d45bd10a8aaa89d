#include "mmbsde/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <variant>

#include "mmbsde/homogenization.hpp"
#include "mmbsde/random.hpp"
#include "mmbsde/stats.hpp"

namespace mmbsde {

namespace fs = std::filesystem;

namespace {

const std::vector<double> kDefaultLadder = {0.2, 0.1, 0.05, 0.025, 0.0125};

std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

// RFC-4180: CRLF line ends, fields quoted when they contain separators.
class Csv {
public:
  using Cell = std::variant<double, long long, std::string>;

  Csv(const fs::path& file, const std::vector<std::string>& header) : out_(file, std::ios::binary) {
    if (!out_) throw Error(ErrorCode::InvalidArgument, "cannot write " + file.string());
    write(std::vector<Cell>(header.begin(), header.end()));
  }

  void write(const std::vector<Cell>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << render(cells[i]);
    }
    out_ << "\r\n";
  }

private:
  static std::string render(const Cell& cell) {
    if (const auto* d = std::get_if<double>(&cell)) return format_double(*d);
    if (const auto* i = std::get_if<long long>(&cell)) return std::to_string(*i);
    const auto& s = std::get<std::string>(cell);
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string quoted = "\"";
    for (char c : s) {
      if (c == '"') quoted += '"';
      quoted += c;
    }
    return quoted + '"';
  }

  std::ofstream out_;
};

long long I(std::size_t v) { return static_cast<long long>(v); }
long long I(Index v) { return static_cast<long long>(v); }

Json number_json(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }

Json to_json(const Matrix& m) {
  Json rows = Json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back(number_json(m(i, j)));
    rows.push_back(row);
  }
  return rows;
}

Json to_json(const Vector& v) {
  Json out = Json::array();
  for (Index i = 0; i < v.size(); ++i) out.push_back(number_json(v(i)));
  return out;
}

Json to_json(const std::vector<double>& v) {
  Json out = Json::array();
  for (double x : v) out.push_back(number_json(x));
  return out;
}

Json to_json(const Estimate& e) { return {{"mean", number_json(e.mean)}, {"standard_error", number_json(e.standard_error)}}; }

Json to_json(const AprioriStats& s) {
  return {{"sup_y2", to_json(s.sup_y2)}, {"int_z2", to_json(s.int_z2)}, {"combined", to_json(s.combined)}};
}

struct Context {
  std::uint64_t seed = 0;
  fs::path out;
  Json results = Json::object();
  Json verdicts = Json::object();
  std::vector<std::string> files;

  Csv csv(const std::string& name, const std::vector<std::string>& header) {
    files.push_back(name);
    return Csv(out / name, header);
  }
  void verdict(const std::string& name, bool passed) { verdicts[name] = passed; }
};

/// Parses params fully and returns the work to run afterwards, so that
/// every field is validated before anything is computed.
using Plan = std::function<void(Context&)>;
using Planner = std::function<Plan(ConfigObject& params, std::uint64_t seed)>;

std::vector<double> read_ladder(ConfigObject& params) {
  auto eps = params.numbers("epsilons", kDefaultLadder);
  if (eps.empty()) config_error(params.where("epsilons"), "needs at least one value");
  for (std::size_t i = 0; i < eps.size(); ++i) {
    if (!(eps[i] > 0)) config_error(params.where("epsilons"), "values must be positive");
    if (i && !(eps[i] < eps[i - 1])) config_error(params.where("epsilons"), "must be strictly decreasing");
  }
  return eps;
}

Index read_count(ConfigObject& params, const std::string& key, Index fallback, Index minimum) {
  const Index n = params.integer(key, fallback);
  if (n < minimum) config_error(params.where(key), "must be at least " + std::to_string(minimum));
  return n;
}

double occupation_integral(const ChainPath& path, double a, double b, const Vector& c) {
  double sum = 0.0;
  path.for_each_segment(a, b, [&](double lo, double hi, Index s) { sum += (hi - lo) * c(s); });
  return sum;
}

// ---------------------------------------------------------------- aggregate

Plan plan_aggregate(ConfigObject& params, std::uint64_t) {
  const auto ts = read_two_scale(params.object("two_scale"));
  std::optional<GeneratorMatrix<double>> q;
  if (params.has("generator")) q = read_generator(params, "generator");
  const double tol = params.positive("tolerance", 1e-12);
  std::optional<Matrix> expect_aggregate, expect_composed;
  std::optional<std::vector<std::vector<double>>> expect_nus;
  if (auto expect = params.optional_object("expect")) {
    if (expect->has("aggregate")) expect_aggregate = expect->matrix("aggregate");
    if (expect->has("composed")) expect_composed = expect->matrix("composed");
    if (expect->has("nus")) {
      const Json& v = expect->raw("nus");
      if (!v.is_array()) config_error(expect->where("nus"), "expected one array per block");
      std::vector<std::vector<double>> nus;
      for (std::size_t k = 0; k < v.size(); ++k) {
        const Json wrapped = {{"nu", v[k]}};
        ConfigObject holder(wrapped, expect->where("nus") + "[" + std::to_string(k) + "]");
        nus.push_back(holder.numbers("nu"));
      }
      expect_nus = nus;
    }
    expect->finish();
  }
  params.finish();
  if (q && q->size() != ts.fast.size()) config_error(params.where("generator"), "size differs from two_scale");

  return [=](Context& ctx) {
    const auto nus = block_quasi_stationary(ts);
    const auto qbar = aggregate_generator(ts.slow, ts.partition, nus);
    const auto composed = compose(ts);
    Json nus_json = Json::array();
    for (const auto& nu : nus) nus_json.push_back(to_json(nu.nu));
    ctx.results["epsilon"] = ts.epsilon;
    ctx.results["nus"] = nus_json;
    ctx.results["aggregate"] = to_json(qbar.rates());
    ctx.results["composed"] = to_json(composed.rates());

    if (q) {
      const auto report = verify_decomposition(*q, ts, tol);
      ctx.results["decomposition"] = {{"passed", report.passed}, {"max_residual", report.max_residual}, {"issues", report.issues}};
      ctx.verdict("decomposition", report.passed);
    }
    auto max_diff = [](const Matrix& a, const Matrix& b) {
      return a.rows() == b.rows() && a.cols() == b.cols() ? (a - b).cwiseAbs().maxCoeff() : INFINITY;
    };
    if (expect_aggregate) {
      const double d = max_diff(qbar.rates(), *expect_aggregate);
      ctx.results["aggregate_max_deviation"] = number_json(d);
      ctx.verdict("expected_aggregate", d <= tol);
    }
    if (expect_composed) {
      const double d = max_diff(composed.rates(), *expect_composed);
      ctx.results["composed_max_deviation"] = number_json(d);
      ctx.verdict("expected_composed", d <= tol);
    }
    if (expect_nus) {
      double d = expect_nus->size() == nus.size() ? 0.0 : INFINITY;
      for (std::size_t k = 0; k < std::min(nus.size(), expect_nus->size()); ++k) {
        const auto& want = (*expect_nus)[k];
        if (static_cast<Index>(want.size()) != nus[k].size()) d = INFINITY;
        else
          for (std::size_t j = 0; j < want.size(); ++j) d = std::max(d, std::abs(nus[k].nu(static_cast<Index>(j)) - want[j]));
      }
      ctx.results["nus_max_deviation"] = number_json(d);
      ctx.verdict("expected_nus", d <= tol);
    }

    auto gens = ctx.csv("generators.csv", {"matrix", "row", "col", "value"});
    for (const auto& [name, m] : {std::pair<std::string, Matrix>{"composed", composed.rates()}, {"aggregate", qbar.rates()}})
      for (Index i = 0; i < m.rows(); ++i)
        for (Index j = 0; j < m.cols(); ++j) gens.write({name, I(i), I(j), m(i, j)});
    auto nu_csv = ctx.csv("nus.csv", {"block", "position", "state", "nu"});
    for (Index k = 0; k < ts.partition.block_count(); ++k)
      for (Index j = 0; j < ts.partition.block_size(k); ++j)
        nu_csv.write({I(k), I(j), I(ts.partition.block(k)[static_cast<std::size_t>(j)]), nus[static_cast<std::size_t>(k)].nu(j)});
  };
}

// ----------------------------------------------------------- simulate-chain

Plan plan_simulate_chain(ConfigObject& params, std::uint64_t seed) {
  if (params.has("generator") == params.has("two_scale"))
    config_error(params.path(), "give exactly one of 'generator' and 'two_scale'");
  std::optional<TwoScaleGenerator<double>> ts;
  std::optional<GeneratorMatrix<double>> q;
  if (params.has("two_scale")) {
    ts = read_two_scale(params.object("two_scale"));
    q = compose(*ts);
  } else {
    q = read_generator(params, "generator");
  }
  const Index initial = params.integer("initial_state", 0);
  if (initial < 0 || initial >= q->size()) config_error(params.where("initial_state"), "not a state of the generator");
  const double t0 = params.number("t0", 0.0);
  const double horizon = params.number("horizon", 1.0);
  if (!(horizon > t0)) config_error(params.where("horizon"), "must exceed t0");
  const Index n_paths = read_count(params, "n_paths", 100, 1);
  const auto max_jumps = static_cast<std::size_t>(read_count(params, "max_jumps", 10000000, 1));

  struct Occupation {
    std::vector<double> epsilons;
    Index n_paths;
    double beta;
    double start;
    double slope_min;
  };
  std::optional<Occupation> occ;
  if (auto o = params.optional_object("occupation")) {
    if (!ts) config_error(o->path(), "needs 'two_scale'");
    Occupation spec{read_ladder(*o), read_count(*o, "n_paths", 2000, 100), o->number("beta", 1.0),
                    o->number("start", t0), o->number("slope_min", 0.8)};
    if (spec.epsilons.size() < 2) config_error(o->where("epsilons"), "needs at least two values for a slope");
    o->finish();
    occ = spec;
  }
  params.finish();

  return [=](Context& ctx) {
    const auto chains = simulate_chains(*q, initial, t0, horizon, static_cast<std::size_t>(n_paths),
                                        derive_key(seed, "simulate_chain"), max_jumps);
    auto paths = ctx.csv("chain_paths.csv", {"path_id", "jump_time", "new_state"});
    std::vector<double> occupancy(static_cast<std::size_t>(q->size()), 0.0);
    double jumps = 0.0;
    for (std::size_t p = 0; p < chains.size(); ++p) {
      paths.write({I(p), t0, I(chains[p].initial_state())});
      for (std::size_t n = 0; n < chains[p].jump_count(); ++n)
        paths.write({I(p), chains[p].jump_times()[n], I(chains[p].post_jump_states()[n])});
      const auto o = chains[p].occupation_times(t0, horizon, q->size());
      for (std::size_t s = 0; s < o.size(); ++s) occupancy[s] += o[s] / (horizon - t0) / static_cast<double>(n_paths);
      jumps += static_cast<double>(chains[p].jump_count());
    }
    ctx.results["n_paths"] = n_paths;
    ctx.results["mean_jumps"] = jumps / static_cast<double>(n_paths);
    ctx.results["mean_occupation_fraction"] = to_json(occupancy);

    if (!occ) return;
    auto table = ctx.csv("occupation.csv", {"epsilon", "block", "position", "state", "mean", "standard_error"});
    const double beta = occ->beta;
    std::vector<OccupationDeviation> levels;
    for (std::size_t level = 0; level < occ->epsilons.size(); ++level) {
      const double eps = occ->epsilons[level];
      levels.push_back(occupation_deviation(ts->with_epsilon(eps), [beta](double) { return beta; }, occ->start, horizon,
                                            static_cast<std::size_t>(occ->n_paths), derive_key(seed, "occupation", level),
                                            initial));
      for (Index k = 0; k < ts->partition.block_count(); ++k)
        for (Index j = 0; j < ts->partition.block_size(k); ++j) {
          const auto& e = levels.back().estimates[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)];
          table.write({eps, I(k), I(j), I(ts->partition.block(k)[static_cast<std::size_t>(j)]), e.mean, e.standard_error});
        }
    }
    // Entries that vanish at every level (singleton blocks) carry no rate.
    Json slopes = Json::array();
    bool all_ok = true;
    for (Index k = 0; k < ts->partition.block_count(); ++k)
      for (Index j = 0; j < ts->partition.block_size(k); ++j) {
        std::vector<double> means;
        for (const auto& l : levels) means.push_back(l.estimates[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)].mean);
        const bool zero = std::all_of(means.begin(), means.end(), [](double m) { return m == 0.0; });
        const bool positive = std::all_of(means.begin(), means.end(), [](double m) { return m > 0.0; });
        Json entry = {{"block", k}, {"position", j}};
        if (zero) {
          entry["slope"] = nullptr;
          entry["identically_zero"] = true;
        } else {
          const double slope = positive ? log_log_slope(occ->epsilons, means) : NAN;
          entry["slope"] = number_json(slope);
          entry["identically_zero"] = false;
          all_ok = all_ok && positive && slope >= occ->slope_min;
        }
        slopes.push_back(entry);
      }
    ctx.results["occupation_slopes"] = slopes;
    ctx.results["occupation_slope_min"] = occ->slope_min;
    ctx.verdict("occupation_rate", all_ok);
  };
}

// --------------------------------------------------------------- solve-bsde

struct BsdeInputs {
  TimeGrid grid;
  Index n_paths;
  DriverSpec driver;
  TerminalSpec terminal;
  std::vector<ChainPath> chains;
};

BsdeInputs read_bsde_inputs(ConfigObject& params, std::uint64_t seed, bool allow_many, Index default_paths) {
  const TimeGrid grid = read_grid(params.object("grid"));
  const Index n_paths = read_count(params, "n_paths", default_paths, 2);
  auto terminal = read_terminal(params.object("terminal"));
  auto driver = read_driver(params.object("driver"), terminal.xi.dim);
  if (driver.driver.dim != terminal.xi.dim) config_error(params.where("driver"), "dimension differs from the terminal condition");
  std::vector<ChainPath> chains;
  if (params.has("chain"))
    chains = read_chains(params.object("chain"), grid.start(), grid.horizon(), seed, allow_many);
  else
    chains.push_back(ChainPath::constant(grid.start(), grid.horizon(), 0));
  if (driver.type == "constant_per_state" || driver.type == "linear_per_state") {
    const Index states = driver.type == "constant_per_state" ? driver.constants.cols() : driver.rates.size();
    for (const auto& c : chains) {
      Index hi = c.initial_state();
      for (Index s : c.post_jump_states()) hi = std::max(hi, s);
      if (hi >= states) config_error(params.where("driver"), "has no value for chain state " + std::to_string(hi));
    }
  }
  return {grid, n_paths, std::move(driver), std::move(terminal), std::move(chains)};
}

Plan plan_solve_bsde(ConfigObject& params, std::uint64_t seed) {
  auto in = read_bsde_inputs(params, seed, true, 1000);
  SolverOptions options;
  const std::string mode = params.string("mode", "regression");
  if (mode == "nested") options.mode = ExpectationMode::NestedMonteCarlo;
  else if (mode != "regression") config_error(params.where("mode"), "must be 'regression' or 'nested'");
  options.nested_inner_paths = static_cast<int>(read_count(params, "nested_inner_paths", 200, 2));
  options.nested_seed = derive_key(seed, "nested");
  const Index export_paths = read_count(params, "export_paths", 10, 0);
  const double threshold = params.positive("martingale_threshold", 4.0);
  const double occupation_tolerance = params.positive("occupation_tolerance", 0.02);
  std::optional<std::vector<double>> expect_y0;
  std::optional<double> expect_z;
  double y0_tolerance = 0.02, z_tolerance = 0.05;
  if (auto e = params.optional_object("expect")) {
    if (e->has("y0")) expect_y0 = e->numbers("y0");
    y0_tolerance = e->positive("relative_tolerance", y0_tolerance);
    if (e->has("z")) expect_z = e->number("z");
    z_tolerance = e->positive("z_relative_rms", z_tolerance);
    e->finish();
    if (expect_y0 && static_cast<Index>(expect_y0->size()) != in.terminal.xi.dim)
      config_error(e->where("y0"), "needs one value per component");
  }
  params.finish();
  const bool occupation_oracle = in.driver.type == "constant_per_state" && in.terminal.type == "constant";

  return [=](Context& ctx) {
    const auto brownian = sample_brownian(in.grid, 1, in.n_paths, seed);
    const BsdeSolver solver(brownian_forward(brownian), brownian, options);
    const Index k = in.terminal.xi.dim;
    std::vector<std::string> header = {"chain_id", "path_id", "t"};
    for (Index c = 0; c < k; ++c) header.push_back("y_" + std::to_string(c));
    for (Index c = 0; c < k; ++c) header.push_back("z_" + std::to_string(c));
    auto solution_csv = ctx.csv("solution.csv", header);
    auto y0_csv = ctx.csv("y0.csv", {"chain_id", "component", "y0", "reference"});

    Json per_chain = Json::array();
    bool martingale_ok = true, y0_ok = true, z_ok = true, occupation_ok = true;
    double worst_occupation = 0.0, worst_z = 0.0;
    for (std::size_t ci = 0; ci < in.chains.size(); ++ci) {
      const ChainPath& chain = in.chains[ci];
      const BsdeSolution sol = solver.solve(in.driver.driver, in.terminal.xi, chain);
      const Vector y0 = sol.initial_value();
      const auto mart = martingale_residual_check(sol, in.driver.driver, chain, brownian, threshold);
      martingale_ok = martingale_ok && mart.passed;
      Json entry = {{"chain_id", ci},
                    {"jumps", chain.jump_count()},
                    {"y0", to_json(y0)},
                    {"a_priori", to_json(a_priori_stats(sol))},
                    {"martingale", {{"residual_rms", mart.residual_rms}, {"max_abs_z_score", number_json(mart.max_abs_z_score)}, {"passed", mart.passed}}}};

      Vector reference = Vector::Constant(k, NAN);
      if (occupation_oracle) {
        for (Index c = 0; c < k; ++c) {
          reference(c) = in.terminal.value(c) + occupation_integral(chain, in.grid.start(), in.grid.horizon(),
                                                                     in.driver.constants.row(c).transpose());
          const double err = std::abs(y0(c) - reference(c)) / std::max(1.0, std::abs(reference(c)));
          worst_occupation = std::max(worst_occupation, err);
          occupation_ok = occupation_ok && err <= occupation_tolerance;
        }
      }
      if (expect_y0)
        for (Index c = 0; c < k; ++c) {
          const double want = (*expect_y0)[static_cast<std::size_t>(c)];
          reference(c) = want;
          y0_ok = y0_ok && std::abs(y0(c) - want) <= y0_tolerance * std::max(std::abs(want), 1.0);
        }
      if (expect_z) {
        double sum = 0.0;
        std::size_t count = 0;
        for (std::size_t i = 0; i + 1 < in.grid.nodes().size(); ++i)
          for (Index p = 0; p < sol.z[i].rows(); ++p)
            for (Index j = 0; j < sol.z[i].cols(); ++j) {
              sum += (sol.z[i](p, j) - *expect_z) * (sol.z[i](p, j) - *expect_z);
              ++count;
            }
        const double rms = std::sqrt(sum / static_cast<double>(count)) / std::abs(*expect_z);
        entry["z_relative_rms_error"] = rms;
        worst_z = std::max(worst_z, rms);
        z_ok = z_ok && rms <= z_tolerance;
      }
      per_chain.push_back(entry);
      for (Index c = 0; c < k; ++c)
        y0_csv.write({I(ci), I(c), y0(c), std::isnan(reference(c)) ? Csv::Cell(std::string()) : Csv::Cell(reference(c))});
      for (Index p = 0; p < std::min(export_paths, in.n_paths); ++p)
        for (std::size_t i = 0; i < in.grid.nodes().size(); ++i) {
          std::vector<Csv::Cell> row = {I(ci), I(p), in.grid.node(i)};
          for (Index c = 0; c < k; ++c) row.emplace_back(sol.y[i](p, c));
          const bool has_z = i + 1 < in.grid.nodes().size();
          for (Index c = 0; c < k; ++c) row.emplace_back(has_z ? Csv::Cell(sol.z_at(i, p)(c, 0)) : Csv::Cell(std::string()));
          solution_csv.write(row);
        }
    }
    ctx.results["chains"] = per_chain;
    ctx.results["y0"] = per_chain.front()["y0"];
    ctx.verdict("martingale_residual", martingale_ok);
    if (occupation_oracle) {
      ctx.results["occupation_max_relative_error"] = worst_occupation;
      ctx.verdict("occupation_quadrature", occupation_ok);
    }
    if (expect_y0) ctx.verdict("expected_y0", y0_ok);
    if (expect_z) {
      ctx.results["z_relative_rms_error"] = worst_z;
      ctx.verdict("expected_z", z_ok);
    }
  };
}

// ------------------------------------------------------------------- picard

Plan plan_picard(ConfigObject& params, std::uint64_t seed) {
  auto in = read_bsde_inputs(params, seed, false, 1000);
  const double beta = params.number("beta", default_picard_beta(in.driver.driver.lipschitz_mu));
  if (!(beta > 0)) config_error(params.where("beta"), "must be positive");
  const int max_iterations = static_cast<int>(read_count(params, "max_iterations", 15, 1));
  const double tolerance = params.positive("tolerance", 1e-8);
  params.finish();

  return [=](Context& ctx) {
    const auto brownian = sample_brownian(in.grid, 1, in.n_paths, seed);
    const auto result = picard_solve(in.driver.driver, in.terminal.xi, in.grid, brownian, in.chains.front(), beta,
                                     max_iterations, tolerance);
    const auto& r = result.report;
    auto csv = ctx.csv("picard.csv", {"iteration", "difference", "ratio"});
    for (std::size_t n = 0; n < r.differences.size(); ++n)
      csv.write({I(n), r.differences[n], n == 0 ? Csv::Cell(std::string()) : Csv::Cell(r.ratios[n - 1])});
    ctx.results["beta"] = r.beta;
    ctx.results["iterations"] = r.iterations;
    ctx.results["differences"] = to_json(r.differences);
    ctx.results["ratios"] = to_json(r.ratios);
    ctx.results["y0"] = to_json(result.solution.initial_value());
    ctx.verdict("converged", r.converged && r.iterations <= max_iterations);
    ctx.verdict("contraction", std::all_of(r.ratios.begin(), r.ratios.end(), [](double q) { return q < 1.0; }));
  };
}

// ----------------------------------------------------------------------- lq

Plan plan_lq(ConfigObject& params, std::uint64_t seed) {
  ConfigObject problem_obj = params.object("problem");
  const LqProblem problem = read_lq_problem(problem_obj);
  problem_obj.finish();
  RiccatiOptions riccati;
  riccati.steps = static_cast<std::size_t>(read_count(params, "riccati_steps", 2000, 1));
  Index sim_steps = 200, sim_paths = 4;
  if (auto sim = params.optional_object("simulation")) {
    sim_steps = read_count(*sim, "steps", sim_steps, 1);
    sim_paths = read_count(*sim, "n_paths", sim_paths, 2);
    sim->finish();
  }
  OptimalityOptions opt;
  opt.throw_on_violation = false;
  opt.seed = seed;
  if (auto v = params.optional_object("verification")) {
    opt.n_perturbations = static_cast<int>(read_count(*v, "n_perturbations", opt.n_perturbations, 1));
    opt.deltas = v->numbers("deltas", opt.deltas);
    opt.pieces = static_cast<int>(read_count(*v, "pieces", opt.pieces, 1));
    opt.z_threshold = v->positive("z_threshold", opt.z_threshold);
    v->finish();
    for (double d : opt.deltas)
      if (!(d > 0)) config_error(v->where("deltas"), "values must be positive");
  }
  std::optional<Matrix> expect_p0;
  double p0_tolerance = 1e-4;
  if (auto e = params.optional_object("expect")) {
    expect_p0 = e->matrix("p0");
    p0_tolerance = e->positive("tolerance", p0_tolerance);
    e->finish();
  }
  std::optional<double> negative_scale;
  if (auto n = params.optional_object("negative_control")) {
    negative_scale = n->positive("scale", 1.5);
    n->finish();
  }
  const Index export_every = read_count(params, "export_every", 20, 1);
  params.finish();

  return [=](Context& ctx) {
    const auto fb = solve_optimal(problem, riccati);
    const auto brownian = sample_brownian(TimeGrid::uniform(0, problem.horizon, static_cast<std::size_t>(sim_steps)), 1,
                                          sim_paths, seed);
    std::vector<ChainPath> chains;
    if (problem.regime_count() == 1)
      chains.push_back(ChainPath::constant(0, problem.horizon, 0));
    else
      chains = simulate_chains(validate_generator(problem.generator), problem.initial_regime, 0.0, problem.horizon,
                               static_cast<std::size_t>(sim_paths), derive_key(seed, "lq_chain"));

    const auto report = verify_optimality(problem, fb, chains, brownian, opt);
    std::map<int, bool> per_perturbation;
    for (const auto& r : report.perturbations) {
      auto [it, fresh] = per_perturbation.emplace(r.perturbation, true);
      it->second = it->second && r.dominance;
    }
    const auto dominated = std::count_if(per_perturbation.begin(), per_perturbation.end(), [](const auto& e) { return e.second; });

    const Matrix p0 = fb.value_matrix(0.0, problem.initial_regime);
    ctx.results["p0"] = to_json(p0);
    ctx.results["optimal_cost"] = fb.optimal_cost();
    ctx.results["simulated_cost"] = to_json(report.optimal_cost);
    ctx.results["control_floor"] = report.control_floor;
    ctx.results["perturbations"] = per_perturbation.size();
    ctx.results["perturbations_dominated"] = dominated;
    ctx.results["dominance_checks_passed"] = report.dominance_passed;
    ctx.results["convexity_checks_passed"] = report.convexity_passed;
    ctx.results["stationarity"] = to_json(report.stationarity);
    ctx.results["stationarity_z"] = number_json(report.stationarity_z);
    ctx.verdict("dominance", report.dominance_ok);
    ctx.verdict("stationarity", report.stationarity_ok);
    ctx.verdict("convexity", report.convexity_ok);
    if (expect_p0) {
      const double d = expect_p0->rows() == p0.rows() && expect_p0->cols() == p0.cols()
                           ? (p0 - *expect_p0).cwiseAbs().maxCoeff()
                           : INFINITY;
      ctx.results["p0_max_deviation"] = number_json(d);
      ctx.verdict("expected_p0", d <= p0_tolerance);
    }
    if (negative_scale) {
      const auto bad = verify_optimality(problem, fb.scaled(*negative_scale), chains, brownian, opt);
      ctx.results["negative_control"] = {{"scale", *negative_scale},
                                         {"dominance_checks_passed", bad.dominance_passed},
                                         {"passed", bad.passed}};
      ctx.verdict("negative_control_rejected", !bad.passed);
    }

    auto ric = ctx.csv("riccati.csv", {"t", "regime", "row", "col", "value"});
    for (std::size_t i = 0; i < fb.times().size(); ++i) {
      if (i % static_cast<std::size_t>(export_every) != 0 && i + 1 != fb.times().size()) continue;
      for (Index r = 0; r < problem.regime_count(); ++r) {
        const Matrix& p = fb.values()[i][static_cast<std::size_t>(r)];
        for (Index a = 0; a < p.rows(); ++a)
          for (Index b = 0; b < p.cols(); ++b) ric.write({fb.times()[i], I(r), I(a), I(b), p(a, b)});
      }
    }
    auto pert = ctx.csv("perturbations.csv", {"perturbation", "delta", "cost_increase", "cost_increase_se", "curvature",
                                              "curvature_se", "convexity_bound", "dominance", "convexity"});
    for (const auto& r : report.perturbations)
      pert.write({static_cast<long long>(r.perturbation), r.delta, r.cost_increase.mean, r.cost_increase.standard_error,
                  r.curvature.mean, r.curvature.standard_error, r.convexity_bound, static_cast<long long>(r.dominance),
                  static_cast<long long>(r.convexity)});
  };
}

// --------------------------------------------------------------- sweep-bsde

void write_sweep_row(Csv& csv, double eps, Index component, double ks, double w1, const Csv::Cell& sup_y2,
                     const Csv::Cell& int_z2, Index n) {
  csv.write({eps, I(component), ks, w1, sup_y2, int_z2, I(n)});
}

const std::vector<std::string> kSweepHeader = {"epsilon", "component", "ks_distance", "wasserstein",
                                               "e_sup_y2", "e_int_z2", "n_paths"};

// Smallest-epsilon KS within the largest-epsilon KS plus 3 noise floors, and
// optionally below half of it.
void ks_verdicts(Context& ctx, const std::vector<std::vector<double>>& ks_per_level, double floor, bool halving) {
  const auto& first = ks_per_level.front();
  const auto& last = ks_per_level.back();
  bool trend = true, halved = true;
  Json ratio = Json::array();
  for (std::size_t c = 0; c < first.size(); ++c) {
    trend = trend && last[c] <= first[c] + 3 * floor;
    halved = halved && last[c] < 0.5 * first[c];
    ratio.push_back(number_json(first[c] > 0 ? last[c] / first[c] : NAN));
  }
  ctx.results["ks_ratio_last_to_first"] = ratio;
  ctx.verdict("ks_trend", trend);
  if (halving) ctx.verdict("ks_halving", halved);
}

Plan plan_sweep_bsde(ConfigObject& params, std::uint64_t seed) {
  const auto ts = read_two_scale(params.object("two_scale"));
  const auto epsilons = read_ladder(params);
  const Index n_paths = read_count(params, "n_paths", 1000, 2);
  const TimeGrid grid = read_grid(params.object("grid"));
  auto terminal = params.has("terminal") ? read_terminal(params.object("terminal"))
                                         : TerminalSpec{constant_terminal(Vector::Zero(1)), "constant", Vector::Zero(1)};
  auto driver = read_driver(params.object("driver"), terminal.xi.dim);
  if (driver.driver.dim != terminal.xi.dim) config_error(params.where("driver"), "dimension differs from the terminal condition");
  if (!driver.driver.z_independent) config_error(params.where("driver"), "must not depend on z");
  const Index m = ts.partition.state_count();
  if ((driver.type == "constant_per_state" && driver.constants.cols() != m) ||
      (driver.type == "linear_per_state" && driver.rates.size() != m))
    config_error(params.where("driver"), "needs one value per chain state (" + std::to_string(m) + ")");
  SweepOptions options;
  options.n_brownian = read_count(params, "n_brownian", options.n_brownian, 2);
  options.initial_state = params.integer("initial_state", 0);
  if (options.initial_state < 0 || options.initial_state >= m) config_error(params.where("initial_state"), "not a chain state");
  options.max_expected_jumps = params.positive("max_expected_jumps", options.max_expected_jumps);
  const double bound_factor = params.positive("bound_factor", 1.5);
  const bool halving = params.boolean("require_ks_halving", false);
  const double oracle_tolerance = params.positive("limit_oracle_tolerance", 1e-10);
  struct Concentration {
    double relative_tolerance;
    double sd_reduction;
    std::optional<double> reference;
  };
  std::optional<Concentration> concentration;
  if (auto c = params.optional_object("expect_concentration")) {
    Concentration spec{c->positive("relative_tolerance", 0.01), c->positive("sd_reduction", 2.0), std::nullopt};
    if (c->has("reference")) spec.reference = c->number("reference");
    c->finish();
    concentration = spec;
  }
  params.finish();
  const bool oracle = driver.type == "constant_per_state" && terminal.type == "constant";
  options.keep_chain_paths = oracle;

  return [=](Context& ctx) {
    const auto report = epsilon_sweep(ts, driver.driver, terminal.xi, grid, epsilons, n_paths, seed, options);
    const Index k = terminal.xi.dim;
    const auto bound = uniform_bound_check(report, bound_factor);

    auto csv = ctx.csv("sweep.csv", kSweepHeader);
    auto samples = ctx.csv("samples.csv", {"epsilon", "path_id", "component", "y0"});
    for (Index p = 0; p < n_paths; ++p)
      for (Index c = 0; c < k; ++c) samples.write({0.0, I(p), I(c), report.limit_y0(p, c)});
    Json levels = Json::array();
    std::vector<std::vector<double>> ks;
    for (const auto& level : report.levels) {
      for (Index c = 0; c < k; ++c)
        write_sweep_row(csv, level.epsilon, c, level.ks[static_cast<std::size_t>(c)], level.wasserstein[static_cast<std::size_t>(c)],
                        level.a_priori.sup_y2.mean, level.a_priori.int_z2.mean, n_paths);
      for (Index p = 0; p < n_paths; ++p)
        for (Index c = 0; c < k; ++c) samples.write({level.epsilon, I(p), I(c), level.y0(p, c)});
      ks.push_back(level.ks);
      Json mean = Json::array(), sd = Json::array();
      for (Index c = 0; c < k; ++c) {
        const std::vector<double> col(level.y0.col(c).data(), level.y0.col(c).data() + n_paths);
        mean.push_back(mean_estimate(col).mean);
        sd.push_back(sample_stddev(col));
      }
      levels.push_back({{"epsilon", level.epsilon},
                        {"ks", to_json(level.ks)},
                        {"wasserstein", to_json(level.wasserstein)},
                        {"a_priori", to_json(level.a_priori)},
                        {"y0_mean", mean},
                        {"y0_stddev", sd},
                        {"mean_jumps", level.mean_jumps},
                        {"seconds", level.seconds}});
    }
    ctx.results["levels"] = levels;
    ctx.results["limit"] = {{"a_priori", to_json(report.limit_a_priori)}, {"seconds", report.limit_seconds}};
    ctx.results["ks_noise_floor"] = report.ks_noise_floor;
    ctx.results["a_priori_bound"] = {{"values", to_json(bound.values)}, {"ratio", number_json(bound.ratio)}, {"factor", bound.factor}};
    ks_verdicts(ctx, ks, report.ks_noise_floor, halving);
    ctx.verdict("a_priori_bound", bound.passed);

    if (oracle) {
      // Limit Y_0 per path is xi + int cbar(alphabar) dt with cbar the
      // block averages of the per-state constants.
      const auto nus = block_quasi_stationary(ts);
      double worst = 0.0;
      for (Index c = 0; c < k; ++c) {
        Vector cbar(ts.partition.block_count());
        for (Index b = 0; b < cbar.size(); ++b) {
          cbar(b) = 0.0;
          for (Index j = 0; j < ts.partition.block_size(b); ++j)
            cbar(b) += nus[static_cast<std::size_t>(b)].nu(j) * driver.constants(c, ts.partition.block(b)[static_cast<std::size_t>(j)]);
        }
        for (std::size_t p = 0; p < report.limit_chains.size(); ++p) {
          const double exact = terminal.value(c) + occupation_integral(report.limit_chains[p], grid.start(), grid.horizon(), cbar);
          worst = std::max(worst, std::abs(report.limit_y0(static_cast<Index>(p), c) - exact));
        }
      }
      ctx.results["limit_oracle_max_error"] = worst;
      ctx.verdict("limit_oracle", worst <= oracle_tolerance);
    }
    if (concentration) {
      bool mean_ok = true, spread_ok = true;
      for (Index c = 0; c < k; ++c) {
        const auto& last = report.levels.back().y0;
        const auto& first = report.levels.front().y0;
        const double ref = concentration->reference ? *concentration->reference : report.limit_y0.col(c).mean();
        const double mean = last.col(c).mean();
        mean_ok = mean_ok && std::abs(mean - ref) <= concentration->relative_tolerance * std::abs(ref);
        const std::vector<double> a(first.col(c).data(), first.col(c).data() + n_paths);
        const std::vector<double> b(last.col(c).data(), last.col(c).data() + n_paths);
        spread_ok = spread_ok && sample_stddev(b) * concentration->sd_reduction <= sample_stddev(a);
      }
      ctx.verdict("concentration_mean", mean_ok);
      ctx.verdict("concentration_spread", spread_ok);
    }
  };
}

// ---------------------------------------------------------------------- pde

std::optional<ChainPath> read_single_chain(ConfigObject& params, double horizon, std::uint64_t seed) {
  if (!params.has("chain")) return ChainPath::constant(0.0, horizon, 0);
  return read_chains(params.object("chain"), 0.0, horizon, seed, false).front();
}

void check_chain_states(const PdeSpec& spec, const ChainPath& chain, const std::string& where) {
  if (spec.reaction_type != "linear") return;
  Index hi = chain.initial_state();
  for (Index s : chain.post_jump_states()) hi = std::max(hi, s);
  if (hi >= spec.reaction_c.size()) config_error(where, "reaction has no rate for chain state " + std::to_string(hi));
}

// Exact solution when one is known for the problem class, else nullopt.
std::optional<std::function<Vector(double, double)>> pde_closed_form(const PdeSpec& spec, const ChainPath& chain) {
  const auto& p = spec.problem;
  if (spec.reaction_type == "none" && spec.terminal_type == "gaussian" && spec.zero_drift && spec.constant_sigma) {
    const double s = spec.gaussian_width, m = spec.gaussian_center, sigma = spec.sigma_value, T = p.horizon;
    const Vector a = spec.gaussian_amplitude;
    return [=](double t, double x) {
      const double v = s * s + sigma * sigma * (T - t);
      return Vector(a * (s / std::sqrt(v) * std::exp(-(x - m) * (x - m) / (2 * v))));
    };
  }
  if (spec.reaction_type == "none" && spec.terminal_type == "linear" && spec.zero_drift) {
    const auto h = p.terminal;
    return [h](double, double x) { return h(x); };
  }
  if (spec.terminal_type == "constant") {
    const Vector h = spec.terminal_value;
    const Vector c = spec.reaction_type == "linear" ? spec.reaction_c : Vector::Zero(1);
    const bool linear = spec.reaction_type == "linear";
    const double T = p.horizon;
    return [=](double t, double) {
      return linear ? Vector(h * std::exp(occupation_integral(chain, t, T, c))) : h;
    };
  }
  return std::nullopt;
}

Plan plan_pde(ConfigObject& params, std::uint64_t seed) {
  const PdeSpec spec = read_pde_problem(params.object("problem"));
  const ChainPath chain = *read_single_chain(params, spec.problem.horizon, seed);
  check_chain_states(spec, chain, params.where("chain"));
  const Index export_every = read_count(params, "export_every", 10, 1);
  const Index export_stride = read_count(params, "export_stride", 1, 1);
  const bool has_tolerance = params.has("closed_form_tolerance");
  const double tolerance = params.positive("closed_form_tolerance", 1e-3);
  params.finish();

  return [=](Context& ctx) {
    const auto sol = solve_pde(spec.problem, chain);
    auto field = ctx.csv("field.csv", {"t", "x", "component", "value", "path_id"});
    for (std::size_t i = 0; i < sol.times.size(); ++i) {
      if (i % static_cast<std::size_t>(export_every) != 0 && i + 1 != sol.times.size()) continue;
      for (std::size_t j = 0; j < sol.xs.size(); j += static_cast<std::size_t>(export_stride))
        for (Index c = 0; c < sol.dim(); ++c) field.write({sol.times[i], sol.xs[j], I(c), sol.u[i](static_cast<Index>(j), c), 0LL});
    }
    ctx.results["levels"] = sol.times.size();
    ctx.results["space_points"] = sol.xs.size();
    ctx.results["u0_min"] = sol.u.front().minCoeff();
    ctx.results["u0_max"] = sol.u.front().maxCoeff();
    ctx.results["growth_ratio"] = growth_ratio(spec.problem, sol);

    if (const auto exact = pde_closed_form(spec, chain)) {
      // Integrating-factor solutions are exact up to rounding.
      const double tol = has_tolerance ? tolerance : (spec.terminal_type == "gaussian" ? 1e-3 : 1e-8);
      double worst = 0.0;
      for (std::size_t i = 0; i < sol.times.size(); ++i)
        for (std::size_t j = 0; j < sol.xs.size(); ++j) {
          const Vector want = (*exact)(sol.times[i], sol.xs[j]);
          for (Index c = 0; c < sol.dim(); ++c)
            worst = std::max(worst, std::abs(sol.u[i](static_cast<Index>(j), c) - want(c)) / std::max(1.0, std::abs(want(c))));
        }
      ctx.results["closed_form_max_error"] = worst;
      ctx.results["closed_form_tolerance"] = tol;
      ctx.verdict("closed_form", worst <= tol);
    }
  };
}

// ----------------------------------------------------------------- fk-check

Plan plan_fk_check(ConfigObject& params, std::uint64_t seed) {
  const PdeSpec spec = read_pde_problem(params.object("problem"));
  const ChainPath chain = *read_single_chain(params, spec.problem.horizon, seed);
  check_chain_states(spec, chain, params.where("chain"));
  const auto probes = read_probes(params, "probes");
  const Index n_mc = read_count(params, "n_mc", 10000, 10);
  FeynmanKacOptions opt;
  opt.steps = static_cast<std::size_t>(read_count(params, "steps", static_cast<Index>(opt.steps), 1));
  opt.relative_allowance = params.positive("relative_allowance", opt.relative_allowance);
  opt.z_threshold = params.positive("z_threshold", opt.z_threshold);
  opt.gradient_tolerance = params.positive("gradient_tolerance", opt.gradient_tolerance);
  opt.gradient_absolute = params.positive("gradient_absolute", opt.gradient_absolute);
  params.finish();

  return [=](Context& ctx) {
    const auto report = feynman_kac_check(spec.problem, chain, probes, n_mc, seed, opt);
    auto csv = ctx.csv("probes.csv", {"t", "x", "component", "pde", "bsde", "standard_error", "pde_gradient", "bsde_z",
                                      "value_ok", "gradient_ok"});
    Json list = Json::array();
    for (const auto& p : report.probes) {
      for (Index c = 0; c < p.pde.size(); ++c)
        csv.write({p.probe.t, p.probe.x, I(c), p.pde(c), p.bsde(c), p.standard_error(c), p.pde_gradient(c), p.bsde_z(c),
                   static_cast<long long>(p.value_ok), static_cast<long long>(p.gradient_ok)});
      list.push_back({{"t", p.probe.t}, {"x", p.probe.x}, {"pde", to_json(p.pde)}, {"bsde", to_json(p.bsde)},
                      {"standard_error", to_json(p.standard_error)}, {"pde_gradient", to_json(p.pde_gradient)},
                      {"bsde_z", to_json(p.bsde_z)}, {"value_ok", p.value_ok}, {"gradient_ok", p.gradient_ok}});
    }
    ctx.results["probes"] = list;
    ctx.results["growth_ratio"] = number_json(report.growth_ratio);
    ctx.verdict("feynman_kac", report.values_ok);
    ctx.verdict("gradient_identity", report.gradients_ok);
  };
}

// ---------------------------------------------------------------- sweep-pde

Plan plan_sweep_pde(ConfigObject& params, std::uint64_t seed) {
  const PdeSpec spec = read_pde_problem(params.object("problem"));
  const auto ts = read_two_scale(params.object("two_scale"));
  const auto epsilons = read_ladder(params);
  const Index n_paths = read_count(params, "n_chain_paths", 1000, 2);
  const auto probes = read_probes(params, "probes");
  PdeSweepOptions options;
  options.initial_state = params.integer("initial_state", 0);
  const Index m = ts.partition.state_count();
  if (options.initial_state < 0 || options.initial_state >= m) config_error(params.where("initial_state"), "not a chain state");
  options.max_expected_jumps = params.positive("max_expected_jumps", options.max_expected_jumps);
  const bool halving = params.boolean("require_ks_halving", false);
  const double oracle_tolerance = params.positive("oracle_tolerance", 1e-8);
  params.finish();
  if (spec.reaction_type == "linear" && spec.reaction_c.size() != m)
    config_error(params.where("problem.reaction.c"), "needs one rate per chain state (" + std::to_string(m) + ")");
  const bool oracle = spec.reaction_type == "linear" && spec.terminal_type == "constant";
  options.keep_chain_paths = oracle;

  return [=](Context& ctx) {
    const auto report = pde_homogenization_sweep(spec.problem, ts, epsilons, n_paths, probes, seed, options);
    const Index k = spec.problem.dim;
    const Index width = static_cast<Index>(probes.size()) * k;

    auto probe_csv = ctx.csv("probes.csv", {"component", "probe", "t", "x", "u_component"});
    for (std::size_t q = 0; q < probes.size(); ++q)
      for (Index c = 0; c < k; ++c) probe_csv.write({I(static_cast<Index>(q) * k + c), I(q), probes[q].t, probes[q].x, I(c)});
    auto csv = ctx.csv("sweep.csv", kSweepHeader);
    auto samples = ctx.csv("samples.csv", {"epsilon", "path_id", "component", "value"});
    for (Index p = 0; p < n_paths; ++p)
      for (Index c = 0; c < width; ++c) samples.write({0.0, I(p), I(c), report.limit_samples(p, c)});
    const Csv::Cell blank = std::string();
    Json levels = Json::array();
    std::vector<std::vector<double>> ks;
    for (const auto& level : report.levels) {
      for (Index c = 0; c < width; ++c)
        write_sweep_row(csv, level.epsilon, c, level.ks[static_cast<std::size_t>(c)], level.wasserstein[static_cast<std::size_t>(c)],
                        blank, blank, n_paths);
      for (Index p = 0; p < n_paths; ++p)
        for (Index c = 0; c < width; ++c) samples.write({level.epsilon, I(p), I(c), level.samples(p, c)});
      ks.push_back(level.ks);
      levels.push_back({{"epsilon", level.epsilon}, {"ks", to_json(level.ks)}, {"wasserstein", to_json(level.wasserstein)},
                        {"seconds", level.seconds}});
    }
    ctx.results["levels"] = levels;
    ctx.results["limit_seconds"] = report.limit_seconds;
    ctx.results["ks_noise_floor"] = report.ks_noise_floor;
    ks_verdicts(ctx, ks, report.ks_noise_floor, halving);

    if (oracle) {
      // u(t, x) = h exp(int_t^T c(alpha_s) ds) on every path.
      const auto nus = block_quasi_stationary(ts);
      Vector cbar(ts.partition.block_count());
      for (Index b = 0; b < cbar.size(); ++b) {
        cbar(b) = 0.0;
        for (Index j = 0; j < ts.partition.block_size(b); ++j)
          cbar(b) += nus[static_cast<std::size_t>(b)].nu(j) * spec.reaction_c(ts.partition.block(b)[static_cast<std::size_t>(j)]);
      }
      double worst = 0.0;
      auto compare = [&](const Matrix& values, const std::vector<ChainPath>& chains, const Vector& c) {
        for (std::size_t p = 0; p < chains.size(); ++p)
          for (std::size_t q = 0; q < probes.size(); ++q) {
            const double factor = std::exp(occupation_integral(chains[p], probes[q].t, spec.problem.horizon, c));
            for (Index j = 0; j < k; ++j) {
              const double exact = spec.terminal_value(j) * factor;
              const double got = values(static_cast<Index>(p), static_cast<Index>(q) * k + j);
              worst = std::max(worst, std::abs(got - exact) / std::max(1.0, std::abs(exact)));
            }
          }
      };
      compare(report.limit_samples, report.limit_chains, cbar);
      for (const auto& level : report.levels) compare(level.samples, level.chains, spec.reaction_c);
      ctx.results["oracle_max_relative_error"] = worst;
      ctx.verdict("integrating_factor_oracle", worst <= oracle_tolerance);
    }
  };
}

// ------------------------------------------------------------------ schemas

struct Kind {
  Planner plan;
  const char* schema;
};

const char* const kCommon = R"(Top level (all kinds):
  kind          string   required
  seed          integer  default 1; overridden by --seed
  output        string   default "mmbsde_out/<kind>"; overridden by --out
  description   string   optional free text
  params        object   required, kind-specific fields below

Shared blocks:
  two_scale     {fast: m x m, slow: m x m, partition: [[state, ...], ...], epsilon: 0.05}
                states are 0-based; Q = fast / epsilon + slow
  grid          {t0: 0, horizon: 1, steps: required}        time units
  driver        {type: zero | linear {lambda} | linear_per_state {c: per state}
                 | constant_per_state {c: per state, or k rows of per-state values}, dim}
  terminal      {type: constant {value: [k values]} | brownian_endpoint}
  chain         {type: constant {state: 0} | path {initial_state, jump_times, states}
                 | simulate {generator, initial_state: 0, count: 1}}
  problem(pde)  {x_lo, x_hi, horizon: 1, space_points: 201, time_steps: 200,
                 drift: 0, sigma: 1 (number or {polynomial: [c0, c1, ...]} in x),
                 sigma_min: 1e-8,
                 terminal: {type: constant {value} | linear {slope, intercept}
                           | gaussian {width: 1, center: 0, amplitude: [1]}},
                 reaction: {type: none | linear {c: per chain state}}}

)";

const std::map<std::string, Kind>& kinds() {
  static const std::map<std::string, Kind> table = {
      {"aggregate", {plan_aggregate, R"(aggregate: quasi-stationary weights, aggregated and composed generators
  two_scale     object   required (generator, partition, epsilon fields)
  generator     m x m    optional full generator checked against the split
  tolerance     number   default 1e-12, entrywise
  expect        object   optional {aggregate: matrix, composed: matrix, nus: [[...], ...]}
outputs: generators.csv (matrix,row,col,value), nus.csv (block,position,state,nu)
)"}},
      {"simulate-chain", {plan_simulate_chain, R"(simulate-chain: exact chain paths and occupation-measure rates
  generator     m x m    one of generator / two_scale
  two_scale     object   composed at its epsilon
  initial_state integer  default 0
  t0, horizon   number   default 0, 1
  n_paths       integer  default 100
  max_jumps     integer  default 10000000 per path
  occupation    object   optional {epsilons: [0.2, 0.1, 0.05, 0.025, 0.0125], n_paths: 2000,
                         beta: 1 (constant weight), start: t0, slope_min: 0.8}
outputs: chain_paths.csv (path_id,jump_time,new_state; first row per path is the initial state),
         occupation.csv (epsilon,block,position,state,mean,standard_error)
)"}},
      {"solve-bsde", {plan_solve_bsde, R"(solve-bsde: backward Euler regression solve per chain path
  grid          object   required
  n_paths       integer  default 1000 Brownian paths
  driver        object   required
  terminal      object   required
  chain         object   default {type: constant, state: 0}; simulate may use count > 1
  mode          string   regression | nested, default regression
  nested_inner_paths integer default 200
  export_paths  integer  default 10 paths written to solution.csv
  martingale_threshold number default 4 (z-score)
  occupation_tolerance number default 0.02 relative to max(|exact|, 1)
                         (constant_per_state driver, constant terminal)
  expect        object   optional {y0: [k values], relative_tolerance: 0.02 (of max(|y0|, 1)),
                         z: number, z_relative_rms: 0.05}
outputs: solution.csv (chain_id,path_id,t,y_*,z_*), y0.csv (chain_id,component,y0,reference)
)"}},
      {"picard", {plan_picard, R"(picard: Picard iteration in the beta-weighted norm
  grid, n_paths, driver, terminal, chain   as solve-bsde (single chain path)
  beta          number   default 2 mu + 2 mu^2 + 1
  max_iterations integer default 15
  tolerance     number   default 1e-8
outputs: picard.csv (iteration,difference,ratio)
)"}},
      {"lq", {plan_lq, R"(lq: coupled Riccati solve and optimality verification
  problem       object   required {horizon: 1, initial_state: [n], initial_regime: 0,
                         generator: l x l (default [[0]]),
                         regimes: [{a, b, c, d, r, n: matrix or {polynomial: [M0, M1, ...]} in t,
                                    q_terminal: matrix}]}
  riccati_steps integer  default 2000 RK4 steps
  simulation    object   {steps: 200, n_paths: 4}
  verification  object   {n_perturbations: 100, deltas: [0.5, 1], pieces: 4, z_threshold: 3}
  expect        object   optional {p0: matrix, tolerance: 1e-4}
  negative_control object optional {scale: 1.5}; verdict requires the scaled feedback to fail
  export_every  integer  default 20 Riccati nodes
outputs: riccati.csv (t,regime,row,col,value), perturbations.csv
)"}},
      {"sweep-bsde", {plan_sweep_bsde, R"(sweep-bsde: law of Y_0 over chain paths against the limit equation
  two_scale     object   required (its epsilon is ignored)
  epsilons      list     default [0.2, 0.1, 0.05, 0.025, 0.0125], strictly decreasing
  n_paths       integer  default 1000 chain paths per level
  grid          object   required
  driver        object   required, z-independent
  terminal      object   default {type: constant, value: [0]}
  n_brownian    integer  default 32 shared Brownian paths
  initial_state integer  default 0
  max_expected_jumps number default 1e6 per path
  bound_factor  number   default 1.5 (max/min of E sup|Y|^2 + int|Z|^2)
  require_ks_halving bool default false
  limit_oracle_tolerance number default 1e-10 (constant_per_state driver, constant terminal)
  expect_concentration object optional {relative_tolerance: 0.01, sd_reduction: 2, reference: number}
outputs: sweep.csv (epsilon,component,ks_distance,wasserstein,e_sup_y2,e_int_z2,n_paths),
         samples.csv (epsilon,path_id,component,y0; epsilon 0 is the limit sample)
)"}},
      {"pde", {plan_pde, R"(pde: semilinear PDE for one chain path
  problem       object   required
  chain         object   default {type: constant, state: 0}
  export_every  integer  default 10 time levels
  export_stride integer  default 1 space nodes
  closed_form_tolerance number default 1e-3 (Gaussian heat) or 1e-8 (integrating factor)
outputs: field.csv (t,x,component,value,path_id)
)"}},
      {"fk-check", {plan_fk_check, R"(fk-check: PDE values and gradients against FBSDE estimates
  problem       object   required
  chain         object   default {type: constant, state: 0}
  probes        list     required [[t, x], ...], at least 10% of the width from the boundary
  n_mc          integer  default 10000
  steps         integer  default 100 Euler steps from t to T
  relative_allowance number default 0.02
  z_threshold   number   default 3
  gradient_tolerance number default 0.1 relative
  gradient_absolute number default 5e-3
outputs: probes.csv (t,x,component,pde,bsde,standard_error,pde_gradient,bsde_z,value_ok,gradient_ok)
)"}},
      {"sweep-pde", {plan_sweep_pde, R"(sweep-pde: law of u(t, x) over chain paths against the averaged PDE
  problem       object   required, reaction must not use the gradient
  two_scale     object   required
  epsilons      list     default [0.2, 0.1, 0.05, 0.025, 0.0125]
  n_chain_paths integer  default 1000
  probes        list     required [[t, x], ...]
  initial_state integer  default 0
  max_expected_jumps number default 1e6
  require_ks_halving bool default false
  oracle_tolerance number default 1e-8 (linear reaction, constant terminal)
outputs: sweep.csv (as sweep-bsde; component = probe * k + u_component, a priori columns empty),
         probes.csv (component,probe,t,x,u_component), samples.csv (epsilon,path_id,component,value)
)"}},
  };
  return table;
}

const Kind& find_kind(const std::string& kind) {
  const auto& table = kinds();
  const auto it = table.find(kind);
  if (it == table.end()) {
    std::string known;
    for (const auto& name : experiment_kinds()) known += (known.empty() ? "" : ", ") + name;
    throw Error(ErrorCode::UnknownKind, "'" + kind + "' (known: " + known + ")");
  }
  return it->second;
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

const std::vector<std::string>& experiment_kinds() {
  static const std::vector<std::string> names = {"aggregate", "simulate-chain", "solve-bsde", "picard", "lq",
                                                 "sweep-bsde", "pde", "fk-check", "sweep-pde"};
  return names;
}

std::string describe_kind(const std::string& kind) { return std::string(kCommon) + find_kind(kind).schema; }

Json load_config(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(ErrorCode::ConfigInvalid, file.string() + ": cannot open");
  std::stringstream text;
  text << in.rdbuf();
  const std::string s = text.str();
  try {
    return Json::parse(s);
  } catch (const nlohmann::json::parse_error& e) {
    // Translate the byte offset into line and column.
    const std::size_t at = std::min<std::size_t>(e.byte, s.size());
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < at; ++i) {
      if (s[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw Error(ErrorCode::ConfigInvalid, file.string() + ":" + std::to_string(line) + ":" + std::to_string(col) +
                                              ": " + e.what());
  }
}

RunResult run_experiment(const Json& config, const RunOptions& options) {
  ConfigObject root(config, "");
  const std::string kind = root.string("kind");
  const Kind& entry = find_kind(kind);
  const std::uint64_t seed = options.seed ? *options.seed : root.unsigned_integer("seed", 1);
  const std::string configured_out = root.string("output", "mmbsde_out/" + kind);
  const fs::path out = options.output ? *options.output : fs::path(configured_out);
  root.string("description", "");
  ConfigObject params = root.object("params");
  root.finish();
  const Plan plan = entry.plan(params, seed);

  Json echo = config;
  echo["seed"] = seed;
  echo["output"] = out.string();

  Context ctx;
  ctx.seed = seed;
  ctx.out = out;
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw Error(ErrorCode::InvalidArgument, "cannot create " + out.string() + ": " + ec.message());
  const auto start = std::chrono::steady_clock::now();
  plan(ctx);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  bool passed = true;
  for (const auto& [name, value] : ctx.verdicts.items()) passed = passed && value.get<bool>();

  RunResult result;
  result.output = out;
  result.files = ctx.files;
  result.passed = passed;
  result.summary = {{"tool", "mmbsde"},
                    {"version", MMBSDE_VERSION},
                    {"timestamp", utc_timestamp()},
                    {"kind", kind},
                    {"seed", seed},
                    {"config", echo},
                    {"results", ctx.results},
                    {"verdicts", ctx.verdicts},
                    {"passed", passed},
                    {"seconds", seconds},
                    {"files", ctx.files}};
  std::ofstream summary(out / "summary.json", std::ios::binary);
  if (!summary) throw Error(ErrorCode::InvalidArgument, "cannot write " + (out / "summary.json").string());
  summary << result.summary.dump(2) << '\n';
  return result;
}

}  // namespace mmbsde
