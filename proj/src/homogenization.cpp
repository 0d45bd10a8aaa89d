#include "mmbsde/homogenization.hpp"

#include <algorithm>
#include <chrono>
#include <string>

#include "mmbsde/error.hpp"
#include "mmbsde/random.hpp"
#include "mmbsde/stats.hpp"

namespace mmbsde {

AveragedDriver build_averaged_driver(const Driver& f, const StatePartition& partition,
                                     const std::vector<QuasiStationaryDistribution<double>>& nus) {
  if (!f.z_independent)
    throw Error(ErrorCode::ZDependentDriver, "averaging needs a driver that does not depend on z");
  if (static_cast<Index>(nus.size()) != partition.block_count())
    throw Error(ErrorCode::DimensionMismatch, "need one quasi-stationary distribution per block");
  AveragedDriver out{f, partition, {}, {}};
  for (Index k = 0; k < partition.block_count(); ++k) {
    const Vector& nu = nus[static_cast<std::size_t>(k)].nu;
    if (nu.size() != partition.block_size(k))
      throw Error(ErrorCode::DimensionMismatch, "weights of block " + std::to_string(k) + " have wrong size");
    out.nus.push_back(nu);
  }
  auto base = f.f;
  auto weights = out.nus;
  out.averaged = f;
  out.averaged.f = [base, partition, weights](double t, const Vector& x, const Vector& y, const Matrix& z,
                                              Index block) {
    if (block < 0 || block >= partition.block_count())
      throw Error(ErrorCode::UnknownState, "block " + std::to_string(block));
    const auto& states = partition.block(block);
    const Vector& nu = weights[static_cast<std::size_t>(block)];
    Vector sum = nu(0) * base(t, x, y, z, states[0]);
    for (std::size_t j = 1; j < states.size(); ++j)
      sum += nu(static_cast<Index>(j)) * base(t, x, y, z, states[j]);
    return sum;
  };
  return out;
}

void sample_distances(const Matrix& a, const Matrix& b, std::vector<double>& ks,
                      std::vector<double>& wasserstein) {
  if (a.cols() != b.cols()) throw Error(ErrorCode::DimensionMismatch, "samples have different widths");
  ks.clear();
  wasserstein.clear();
  for (Index c = 0; c < a.cols(); ++c) {
    const std::vector<double> ca(a.col(c).data(), a.col(c).data() + a.rows());
    const std::vector<double> cb(b.col(c).data(), b.col(c).data() + b.rows());
    ks.push_back(ks_distance(ca, cb));
    wasserstein.push_back(wasserstein1(ca, cb));
  }
}

namespace {

struct EnsembleResult {
  Matrix y0;
  AprioriStats a_priori;
  double mean_jumps = 0.0;
};

// Solves conditionally on each chain path; the Y_0 of a chain path is the
// average over the shared Brownian ensemble.
EnsembleResult solve_over_chains(const BsdeSolver& solver, const Driver& driver,
                                 const TerminalCondition& xi, const std::vector<ChainPath>& chains) {
  const auto n = static_cast<Index>(chains.size());
  EnsembleResult out;
  out.y0.resize(n, xi.dim);
  std::vector<double> sup_y(chains.size()), int_z(chains.size()), both(chains.size());
  double jumps = 0.0;
  for (std::size_t p = 0; p < chains.size(); ++p) {
    const BsdeSolution sol = solver.solve(driver, xi, chains[p]);
    out.y0.row(static_cast<Index>(p)) = sol.initial_value().transpose();
    const AprioriStats s = a_priori_stats(sol);
    sup_y[p] = s.sup_y2.mean;
    int_z[p] = s.int_z2.mean;
    both[p] = s.combined.mean;
    jumps += static_cast<double>(chains[p].jump_count());
  }
  out.a_priori = {mean_estimate(sup_y), mean_estimate(int_z), mean_estimate(both)};
  out.mean_jumps = jumps / static_cast<double>(n);
  return out;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

EpsilonSweepReport epsilon_sweep(const TwoScaleGenerator<double>& two_scale, const Driver& driver,
                                 const TerminalCondition& xi, const TimeGrid& grid,
                                 const std::vector<double>& epsilons, Index n_paths,
                                 std::uint64_t seed, const SweepOptions& options) {
  if (!driver.z_independent)
    throw Error(ErrorCode::ZDependentDriver, "the sweep needs a driver that does not depend on z");
  if (epsilons.empty()) throw Error(ErrorCode::InvalidArgument, "empty epsilon ladder");
  for (std::size_t i = 0; i < epsilons.size(); ++i) {
    if (!(epsilons[i] > 0)) throw Error(ErrorCode::InvalidArgument, "epsilons must be positive");
    if (i > 0 && !(epsilons[i] < epsilons[i - 1]))
      throw Error(ErrorCode::InvalidArgument, "epsilon ladder must be strictly decreasing");
  }
  if (n_paths < 2) throw Error(ErrorCode::InvalidArgument, "need at least two chain paths");
  const StatePartition& partition = two_scale.partition;
  if (options.initial_state < 0 || options.initial_state >= partition.state_count())
    throw Error(ErrorCode::UnknownState, "initial state " + std::to_string(options.initial_state));

  const double t0 = grid.start();
  const double horizon = grid.horizon();
  const BrownianEnsemble brownian = sample_brownian(grid, 1, options.n_brownian, seed);
  const BsdeSolver solver(brownian_forward(brownian), brownian, options.solver);

  EpsilonSweepReport report;
  report.n_paths = n_paths;
  report.ks_noise_floor = ks_noise_floor(static_cast<std::size_t>(n_paths), static_cast<std::size_t>(n_paths));

  // Limit equation: aggregated chain and averaged driver.
  auto start = std::chrono::steady_clock::now();
  const auto nus = block_quasi_stationary(two_scale);
  const AveragedDriver averaged = build_averaged_driver(driver, partition, nus);
  const auto q_bar = aggregate_generator(two_scale.slow, partition, nus);
  report.limit_chains = simulate_chains(q_bar, partition.block_of(options.initial_state), t0, horizon,
                                        static_cast<std::size_t>(n_paths), derive_key(seed, "limit_chain"));
  const EnsembleResult limit = solve_over_chains(solver, averaged.averaged, xi, report.limit_chains);
  report.limit_y0 = limit.y0;
  report.limit_a_priori = limit.a_priori;
  report.limit_seconds = seconds_since(start);

  for (std::size_t level = 0; level < epsilons.size(); ++level) {
    start = std::chrono::steady_clock::now();
    const double eps = epsilons[level];
    const auto q = compose(two_scale.with_epsilon(eps));
    double max_exit = 0.0;
    for (Index i = 0; i < q.size(); ++i) max_exit = std::max(max_exit, q.exit_rate(i));
    if (max_exit * (horizon - t0) > options.max_expected_jumps)
      throw Error(ErrorCode::JumpBudgetExceeded,
                  "epsilon " + std::to_string(eps) + " implies about " +
                      std::to_string(max_exit * (horizon - t0)) + " jumps per path");
    auto chains = simulate_chains(q, options.initial_state, t0, horizon, static_cast<std::size_t>(n_paths),
                                  derive_key(seed, "sweep_chain", level),
                                  static_cast<std::size_t>(10 * options.max_expected_jumps));
    const EnsembleResult res = solve_over_chains(solver, driver, xi, chains);
    EpsilonResult out;
    out.epsilon = eps;
    out.y0 = res.y0;
    out.a_priori = res.a_priori;
    out.mean_jumps = res.mean_jumps;
    sample_distances(res.y0, report.limit_y0, out.ks, out.wasserstein);
    if (options.keep_chain_paths) out.chains = std::move(chains);
    out.seconds = seconds_since(start);
    report.levels.push_back(std::move(out));
  }
  return report;
}

BoundCheck uniform_bound_check(const EpsilonSweepReport& report, double factor) {
  BoundCheck check;
  check.factor = factor;
  for (const auto& level : report.levels) check.values.push_back(level.a_priori.combined.mean);
  if (check.values.empty()) return check;
  const auto [lo, hi] = std::minmax_element(check.values.begin(), check.values.end());
  check.ratio = *lo > 0 ? *hi / *lo : (*hi > 0 ? INFINITY : 1.0);
  check.passed = check.ratio <= factor;
  return check;
}

}  // namespace mmbsde
