#include "mmbsde/pde.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>

#include "mmbsde/error.hpp"
#include "mmbsde/random.hpp"
#include "mmbsde/stats.hpp"

namespace mmbsde {

PdeProblem heat_problem(double sigma, PdeProblem::Terminal terminal, Index dim) {
  PdeProblem p;
  p.drift = [](double) { return 0.0; };
  p.sigma = [sigma](double) { return sigma; };
  p.terminal = std::move(terminal);
  p.reaction = [dim](double, double, const Vector&, const Vector&, Index) { return Vector(Vector::Zero(dim)); };
  p.dim = dim;
  return p;
}

PdeProblem::Reaction linear_reaction(const Vector& c) {
  return [c](double, double, const Vector& u, const Vector&, Index state) {
    if (state < 0 || state >= c.size()) throw Error(ErrorCode::UnknownState, "state " + std::to_string(state));
    return Vector(c(state) * u);
  };
}

std::size_t PdeSolution::level_at(double t) const {
  for (std::size_t i = 0; i < times.size(); ++i)
    if (std::abs(times[i] - t) <= 1e-12 * std::max(1.0, std::abs(t))) return i;
  throw Error(ErrorCode::InvalidArgument, "no time level at t=" + std::to_string(t));
}

namespace {

// Index j with xs[j] <= x <= xs[j+1] and the weight of xs[j+1].
std::pair<std::size_t, double> bracket(const std::vector<double>& xs, double x) {
  if (x < xs.front() || x > xs.back())
    throw Error(ErrorCode::InvalidArgument, "x=" + std::to_string(x) + " outside the spatial domain");
  auto j = static_cast<std::size_t>(std::upper_bound(xs.begin(), xs.end(), x) - xs.begin());
  j = std::clamp<std::size_t>(j, 1, xs.size() - 1) - 1;
  return {j, (x - xs[j]) / (xs[j + 1] - xs[j])};
}

Vector level_value(const PdeSolution& s, std::size_t level, double x) {
  const auto [j, w] = bracket(s.xs, x);
  return (1 - w) * s.u[level].row(static_cast<Index>(j)).transpose() +
         w * s.u[level].row(static_cast<Index>(j + 1)).transpose();
}

// Central difference at interior nodes, one-sided at the ends.
Matrix node_gradient(const Matrix& u, double h) {
  const Index m = u.rows();
  Matrix g(m, u.cols());
  for (Index j = 1; j + 1 < m; ++j) g.row(j) = (u.row(j + 1) - u.row(j - 1)) / (2 * h);
  g.row(0) = (u.row(1) - u.row(0)) / h;
  g.row(m - 1) = (u.row(m - 1) - u.row(m - 2)) / h;
  return g;
}

Vector level_gradient(const PdeSolution& s, std::size_t level, double x) {
  const auto [j, w] = bracket(s.xs, x);
  const double h = s.xs[1] - s.xs[0];
  const Matrix g = node_gradient(s.u[level], h);
  return (1 - w) * g.row(static_cast<Index>(j)).transpose() + w * g.row(static_cast<Index>(j + 1)).transpose();
}

template <typename Fn>
Vector in_time(const PdeSolution& s, double t, Fn&& at_level) {
  if (t < s.times.front() - 1e-12 || t > s.times.back() + 1e-12)
    throw Error(ErrorCode::InvalidArgument, "t=" + std::to_string(t) + " outside the time grid");
  const auto hi = static_cast<std::size_t>(std::lower_bound(s.times.begin(), s.times.end(), t) - s.times.begin());
  if (hi < s.times.size() && std::abs(s.times[hi] - t) <= 1e-12) return at_level(hi);
  if (hi > 0 && std::abs(s.times[hi - 1] - t) <= 1e-12) return at_level(hi - 1);
  const double w = (t - s.times[hi - 1]) / (s.times[hi] - s.times[hi - 1]);
  return (1 - w) * at_level(hi - 1) + w * at_level(hi);
}

}  // namespace

Vector PdeSolution::value(double t, double x) const {
  return in_time(*this, t, [&](std::size_t level) { return level_value(*this, level, x); });
}

Vector PdeSolution::gradient(double t, double x) const {
  return in_time(*this, t, [&](std::size_t level) { return level_gradient(*this, level, x); });
}

std::vector<double> jump_aligned_grid(double t0, double horizon, std::size_t steps, const ChainPath& chain) {
  std::vector<double> nodes = TimeGrid::uniform(t0, horizon, steps).nodes();
  const double h = (horizon - t0) / static_cast<double>(steps);
  const double min_gap = 1e-12 * std::max(1.0, horizon - t0);
  // Jumps within rounding distance of an existing node are not inserted.
  std::vector<double> jumps;
  for (double tau : chain.jump_times()) {
    if (!(tau > t0 && tau < horizon)) continue;
    const auto k = static_cast<std::size_t>(std::llround((tau - t0) / h));
    if (std::abs(tau - nodes[std::min(k, steps)]) <= min_gap) continue;
    if (!jumps.empty() && tau - jumps.back() <= min_gap) continue;
    jumps.push_back(tau);
  }
  nodes.insert(nodes.end(), jumps.begin(), jumps.end());
  std::sort(nodes.begin(), nodes.end());
  return nodes;
}

namespace {

void validate_problem(const PdeProblem& p, const std::vector<double>& xs) {
  if (!p.drift || !p.sigma || !p.terminal || !p.reaction)
    throw Error(ErrorCode::InvalidArgument, "PDE problem has unset coefficient functions");
  if (!(p.x_hi > p.x_lo)) throw Error(ErrorCode::InvalidArgument, "empty spatial domain");
  if (p.space_points < 5) throw Error(ErrorCode::InvalidArgument, "need at least 5 space points");
  if (p.time_steps < 1) throw Error(ErrorCode::InvalidArgument, "need at least one time step");
  if (!(p.horizon > 0)) throw Error(ErrorCode::InvalidArgument, "horizon must be positive");
  for (double x : xs) {
    const double s = p.sigma(x), b = p.drift(x);
    if (!std::isfinite(s) || !std::isfinite(b))
      throw Error(ErrorCode::InvalidArgument, "coefficients not finite at x=" + std::to_string(x));
    if (s * s < p.sigma_min * p.sigma_min)
      throw Error(ErrorCode::NonEllipticSigma, "sigma(" + std::to_string(x) + ")^2 below sigma_min^2");
  }
}

struct Operator {
  Vector lower;  // coefficient of u_{j-1} - u_j
  Vector upper;  // coefficient of u_{j+1} - u_j
};

Operator build_operator(const PdeProblem& p, const std::vector<double>& xs) {
  const double h = xs[1] - xs[0];
  const auto m = static_cast<Index>(xs.size());
  Operator op{Vector::Zero(m), Vector::Zero(m)};
  for (Index j = 1; j + 1 < m; ++j) {
    const double s = p.sigma(xs[static_cast<std::size_t>(j)]);
    const double b = p.drift(xs[static_cast<std::size_t>(j)]);
    op.lower(j) = 0.5 * s * s / (h * h) - b / (2 * h);
    op.upper(j) = 0.5 * s * s / (h * h) + b / (2 * h);
  }
  return op;
}

// u <- u + dt L u by Crank-Nicolson in increment form, boundary rows fixed.
// A constant u gives L u = 0 exactly and hence no change.
void crank_nicolson(const Operator& op, double dt, Matrix& u) {
  const Index m = u.rows();
  const Index n = m - 2;
  Vector sub(n), diag(n), sup(n);
  for (Index i = 0; i < n; ++i) {
    const Index j = i + 1;
    sub(i) = -0.5 * dt * op.lower(j);
    sup(i) = -0.5 * dt * op.upper(j);
    diag(i) = 1.0 + 0.5 * dt * (op.lower(j) + op.upper(j));
  }
  // Thomas factorization shared by all components.
  Vector c_prime(n), d_inv(n);
  d_inv(0) = 1.0 / diag(0);
  c_prime(0) = sup(0) * d_inv(0);
  for (Index i = 1; i < n; ++i) {
    d_inv(i) = 1.0 / (diag(i) - sub(i) * c_prime(i - 1));
    c_prime(i) = sup(i) * d_inv(i);
  }
  Vector rhs(n), delta(n);
  for (Index k = 0; k < u.cols(); ++k) {
    for (Index i = 0; i < n; ++i) {
      const Index j = i + 1;
      rhs(i) = dt * (op.lower(j) * (u(j - 1, k) - u(j, k)) + op.upper(j) * (u(j + 1, k) - u(j, k)));
    }
    delta(0) = rhs(0) * d_inv(0);
    for (Index i = 1; i < n; ++i) delta(i) = (rhs(i) - sub(i) * delta(i - 1)) * d_inv(i);
    for (Index i = n - 1; i-- > 0;) delta(i) -= c_prime(i) * delta(i + 1);
    for (Index i = 0; i < n; ++i) u(i + 1, k) += delta(i);
  }
}

// Integrates du/ds = f(t_start - s, x, u, g, state) over s in [0, dt] by one
// RK4 step at every node, with g = u_x sigma frozen at the start.
void reaction_step(const PdeProblem& p, const std::vector<double>& xs, const Vector& sig, double t_start,
                   double dt, Index state, Matrix& u) {
  const Index m = u.rows();
  const double h = xs[1] - xs[0];
  Matrix grad;
  if (p.reaction_uses_gradient) grad = node_gradient(u, h);
  const Vector no_grad = Vector::Zero(u.cols());
  for (Index j = 0; j < m; ++j) {
    const double x = xs[static_cast<std::size_t>(j)];
    const Vector g = p.reaction_uses_gradient ? Vector(grad.row(j).transpose() * sig(j)) : no_grad;
    const Vector y = u.row(j).transpose();
    const Vector k1 = p.reaction(t_start, x, y, g, state);
    const Vector k2 = p.reaction(t_start - dt / 2, x, y + dt / 2 * k1, g, state);
    const Vector k3 = p.reaction(t_start - dt / 2, x, y + dt / 2 * k2, g, state);
    const Vector k4 = p.reaction(t_start - dt, x, y + dt * k3, g, state);
    u.row(j) = (y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)).transpose();
  }
}

}  // namespace

PdeSolution solve_pde(const PdeProblem& problem, const ChainPath& chain) {
  return solve_pde(problem, chain, jump_aligned_grid(0.0, problem.horizon, problem.time_steps, chain));
}

PdeSolution solve_pde(const PdeProblem& problem, const ChainPath& chain, std::vector<double> times) {
  std::vector<double> xs(static_cast<std::size_t>(problem.space_points));
  for (std::size_t j = 0; j < xs.size(); ++j)
    xs[j] = problem.x_lo + (problem.x_hi - problem.x_lo) * static_cast<double>(j) / static_cast<double>(xs.size() - 1);
  xs.back() = problem.x_hi;
  validate_problem(problem, xs);
  if (chain.start() > 0.0 || chain.horizon() < problem.horizon)
    throw Error(ErrorCode::InvalidArgument, "chain path does not cover [0, T]");

  if (times.empty() || times.front() != 0.0 || times.back() != problem.horizon)
    throw Error(ErrorCode::InvalidArgument, "PDE time grid must run from 0 to T");
  const TimeGrid grid(times);
  for (double tau : chain.jump_times()) {
    if (tau >= problem.horizon) continue;
    const auto it = std::lower_bound(times.begin(), times.end(), tau);
    const bool at_node = (it != times.end() && *it - tau <= 1e-12) ||
                         (it != times.begin() && tau - *(it - 1) <= 1e-12);
    if (!at_node) throw Error(ErrorCode::InvalidArgument, "time grid straddles the chain jump at " + std::to_string(tau));
  }

  PdeSolution sol{std::move(times), xs, {}, chain};
  if (grid.max_step() * problem.reaction_lipschitz >= 0.5)
    throw Error(ErrorCode::CflViolation, "time step " + std::to_string(grid.max_step()) +
                                             " times reaction Lipschitz constant " +
                                             std::to_string(problem.reaction_lipschitz) + " is not below 0.5");

  const auto m = static_cast<Index>(xs.size());
  Matrix u(m, problem.dim);
  for (Index j = 0; j < m; ++j) {
    const Vector h = problem.terminal(xs[static_cast<std::size_t>(j)]);
    if (h.size() != problem.dim) throw Error(ErrorCode::DimensionMismatch, "terminal data has wrong size");
    u.row(j) = h.transpose();
  }
  Vector sig(m);
  for (Index j = 0; j < m; ++j) sig(j) = problem.sigma(xs[static_cast<std::size_t>(j)]);
  const Operator op = build_operator(problem, xs);

  sol.u.assign(sol.times.size(), Matrix());
  sol.u.back() = u;
  for (std::size_t i = grid.steps(); i-- > 0;) {
    const double lo = grid.node(i), hi = grid.node(i + 1);
    const double dt = hi - lo;
    const Index state = chain.state_at(0.5 * (lo + hi));
    reaction_step(problem, xs, sig, hi, dt / 2, state, u);
    crank_nicolson(op, dt, u);
    reaction_step(problem, xs, sig, hi - dt / 2, dt / 2, state, u);
    if (!u.allFinite()) throw Error(ErrorCode::InvalidArgument, "PDE solution became non-finite");
    sol.u[i] = u;
  }
  return sol;
}

double growth_ratio(const PdeProblem& problem, const PdeSolution& solution) {
  const double h = solution.xs[1] - solution.xs[0];
  double worst = 0.0;
  for (const Matrix& level : solution.u) {
    const Matrix g = node_gradient(level, h);
    for (Index j = 1; j + 1 < level.rows(); ++j) {
      const double x = solution.xs[static_cast<std::size_t>(j)];
      const double num = level.row(j).norm() + g.row(j).norm() * std::abs(problem.sigma(x));
      worst = std::max(worst, num / (1 + std::abs(x)));
    }
  }
  return worst;
}

FeynmanKacReport feynman_kac_check(const PdeProblem& problem, const PdeSolution& solution,
                                   const std::vector<ProbePoint>& probes, Index n_mc, std::uint64_t seed,
                                   const FeynmanKacOptions& options) {
  const double width = problem.x_hi - problem.x_lo;
  FeynmanKacReport report;
  report.values_ok = true;
  report.gradients_ok = true;
  report.growth_ratio = growth_ratio(problem, solution);
  const ChainPath& chain = solution.chain;

  Driver driver;
  driver.dim = problem.dim;
  driver.lipschitz_mu = problem.reaction_lipschitz;
  driver.z_independent = !problem.reaction_uses_gradient;
  driver.x_independent = false;
  driver.f = [&problem](double t, const Vector& x, const Vector& y, const Matrix& z, Index state) {
    return problem.reaction(t, x(0), y, Vector(z.col(0)), state);
  };
  const TerminalCondition xi = endpoint_terminal([&problem](const Vector& x) { return problem.terminal(x(0)); },
                                                 problem.dim, "pde_terminal");
  const auto drift = [&problem](double, const Vector& x) { return Vector(Vector::Constant(1, problem.drift(x(0)))); };
  const auto diffusion = [&problem](double, const Vector& x) {
    return Matrix(Matrix::Constant(1, 1, problem.sigma(x(0))));
  };

  for (std::size_t q = 0; q < probes.size(); ++q) {
    const ProbePoint& probe = probes[q];
    if (probe.x < problem.x_lo + 0.1 * width || probe.x > problem.x_hi - 0.1 * width)
      throw Error(ErrorCode::InvalidArgument, "probe x=" + std::to_string(probe.x) +
                                                  " is within 10% of the domain boundary");
    if (!(probe.t >= 0.0 && probe.t < problem.horizon))
      throw Error(ErrorCode::InvalidArgument, "probe time must lie in [0, T)");

    const TimeGrid grid = TimeGrid::uniform(probe.t, problem.horizon, options.steps);
    const BrownianEnsemble bm = sample_brownian(grid, 1, n_mc, derive_key(seed, "feynman_kac", q));
    const ForwardEnsemble fwd = euler_maruyama(drift, diffusion, Vector::Constant(1, probe.x), bm);
    const BsdeSolver solver(fwd, bm, options.solver);
    const BsdeSolution sol = solver.solve(driver, xi, chain);

    // Pathwise xi + int f, whose mean is Y_t; its spread gives the MC error.
    const auto occupations = interval_occupations(grid, chain);
    std::vector<std::vector<double>> eta(static_cast<std::size_t>(problem.dim),
                                         std::vector<double>(static_cast<std::size_t>(n_mc)));
    for (Index p = 0; p < n_mc; ++p) {
      Vector acc = sol.y[grid.steps()].row(p).transpose();
      for (std::size_t i = 0; i < grid.steps(); ++i) {
        const Vector x = fwd.values[i].row(p).transpose();
        const Vector y = sol.y[i].row(p).transpose();
        const Matrix z = sol.z_at(i, p);
        for (const auto& [state, tau] : occupations[i]) acc += tau * driver(grid.node(i), x, y, z, state);
      }
      for (Index c = 0; c < problem.dim; ++c) eta[static_cast<std::size_t>(c)][static_cast<std::size_t>(p)] = acc(c);
    }

    ProbeComparison cmp;
    cmp.probe = probe;
    cmp.pde = solution.value(probe.t, probe.x);
    cmp.bsde = sol.initial_value();
    cmp.standard_error.resize(problem.dim);
    for (Index c = 0; c < problem.dim; ++c)
      cmp.standard_error(c) = mean_estimate(eta[static_cast<std::size_t>(c)]).standard_error;
    cmp.pde_gradient = solution.gradient(probe.t, probe.x) * problem.sigma(probe.x);
    cmp.bsde_z = sol.z[0].colwise().mean().transpose();

    cmp.value_ok = true;
    cmp.gradient_ok = true;
    for (Index c = 0; c < problem.dim; ++c) {
      const double allowed = options.z_threshold * cmp.standard_error(c) +
                             options.relative_allowance * std::abs(cmp.pde(c));
      cmp.value_ok = cmp.value_ok && std::abs(cmp.pde(c) - cmp.bsde(c)) <= allowed;
      const double g_allowed = options.gradient_tolerance * std::abs(cmp.pde_gradient(c)) + options.gradient_absolute;
      cmp.gradient_ok = cmp.gradient_ok && std::abs(cmp.pde_gradient(c) - cmp.bsde_z(c)) <= g_allowed;
    }
    report.values_ok = report.values_ok && cmp.value_ok;
    report.gradients_ok = report.gradients_ok && cmp.gradient_ok;
    report.probes.push_back(std::move(cmp));
  }
  return report;
}

FeynmanKacReport feynman_kac_check(const PdeProblem& problem, const ChainPath& chain,
                                   const std::vector<ProbePoint>& probes, Index n_mc, std::uint64_t seed,
                                   const FeynmanKacOptions& options) {
  return feynman_kac_check(problem, solve_pde(problem, chain), probes, n_mc, seed, options);
}

FeynmanKacReport gradient_identity_check(const PdeProblem& problem, const ChainPath& chain,
                                         const std::vector<ProbePoint>& probes, Index n_mc,
                                         std::uint64_t seed, const FeynmanKacOptions& options) {
  return feynman_kac_check(problem, chain, probes, n_mc, seed, options);
}

namespace {

Matrix probe_samples(const PdeProblem& problem, const std::vector<ChainPath>& chains,
                     const std::vector<ProbePoint>& probes) {
  const Index k = problem.dim;
  Matrix out(static_cast<Index>(chains.size()), static_cast<Index>(probes.size()) * k);
  for (std::size_t p = 0; p < chains.size(); ++p) {
    const PdeSolution sol = solve_pde(problem, chains[p]);
    for (std::size_t q = 0; q < probes.size(); ++q)
      out.row(static_cast<Index>(p)).segment(static_cast<Index>(q) * k, k) =
          sol.value(probes[q].t, probes[q].x).transpose();
  }
  return out;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

PdeSweepReport pde_homogenization_sweep(const PdeProblem& problem, const TwoScaleGenerator<double>& two_scale,
                                        const std::vector<double>& epsilons, Index n_chain_paths,
                                        const std::vector<ProbePoint>& probes, std::uint64_t seed,
                                        const PdeSweepOptions& options) {
  if (problem.reaction_uses_gradient)
    throw Error(ErrorCode::ZDependentDriver, "the PDE sweep needs a reaction without gradient argument");
  if (epsilons.empty()) throw Error(ErrorCode::InvalidArgument, "empty epsilon ladder");
  for (std::size_t i = 0; i < epsilons.size(); ++i) {
    if (!(epsilons[i] > 0)) throw Error(ErrorCode::InvalidArgument, "epsilons must be positive");
    if (i > 0 && !(epsilons[i] < epsilons[i - 1]))
      throw Error(ErrorCode::InvalidArgument, "epsilon ladder must be strictly decreasing");
  }
  if (n_chain_paths < 2) throw Error(ErrorCode::InvalidArgument, "need at least two chain paths");
  if (probes.empty()) throw Error(ErrorCode::InvalidArgument, "no probe points");
  const StatePartition& partition = two_scale.partition;
  if (options.initial_state < 0 || options.initial_state >= partition.state_count())
    throw Error(ErrorCode::UnknownState, "initial state " + std::to_string(options.initial_state));
  const auto n = static_cast<std::size_t>(n_chain_paths);

  PdeSweepReport report;
  report.ks_noise_floor = ks_noise_floor(n, n);

  auto start = std::chrono::steady_clock::now();
  const auto nus = block_quasi_stationary(two_scale);
  PdeProblem limit = problem;
  limit.reaction = [base = problem.reaction, partition, nus](double t, double x, const Vector& u, const Vector& g,
                                                            Index block) {
    const auto& states = partition.block(block);
    const Vector& nu = nus[static_cast<std::size_t>(block)].nu;
    Vector sum = nu(0) * base(t, x, u, g, states[0]);
    for (std::size_t j = 1; j < states.size(); ++j) sum += nu(static_cast<Index>(j)) * base(t, x, u, g, states[j]);
    return sum;
  };
  const auto q_bar = aggregate_generator(two_scale.slow, partition, nus);
  report.limit_chains = simulate_chains(q_bar, partition.block_of(options.initial_state), 0.0, problem.horizon, n,
                                        derive_key(seed, "pde_limit_chain"));
  report.limit_samples = probe_samples(limit, report.limit_chains, probes);
  report.limit_seconds = seconds_since(start);

  for (std::size_t level = 0; level < epsilons.size(); ++level) {
    start = std::chrono::steady_clock::now();
    const auto q = compose(two_scale.with_epsilon(epsilons[level]));
    double max_exit = 0.0;
    for (Index i = 0; i < q.size(); ++i) max_exit = std::max(max_exit, q.exit_rate(i));
    if (max_exit * problem.horizon > options.max_expected_jumps)
      throw Error(ErrorCode::JumpBudgetExceeded, "epsilon " + std::to_string(epsilons[level]) +
                                                     " implies about " + std::to_string(max_exit * problem.horizon) +
                                                     " jumps per path");
    auto chains = simulate_chains(q, options.initial_state, 0.0, problem.horizon, n,
                                  derive_key(seed, "pde_chain", level),
                                  static_cast<std::size_t>(10 * options.max_expected_jumps));
    PdeSweepLevel out;
    out.epsilon = epsilons[level];
    out.samples = probe_samples(problem, chains, probes);
    sample_distances(out.samples, report.limit_samples, out.ks, out.wasserstein);
    if (options.keep_chain_paths) out.chains = std::move(chains);
    out.seconds = seconds_since(start);
    report.levels.push_back(std::move(out));
  }
  return report;
}

}  // namespace mmbsde
