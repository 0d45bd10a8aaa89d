#include "mmbsde/bsde.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mmbsde/stats.hpp"

namespace mmbsde {

namespace {

Vector column_mean(const Matrix& target) {
  // Offsetting by the first row keeps the mean of a constant column exact.
  const Eigen::RowVectorXd base = target.row(0);
  return (base + (target.rowwise() - base).colwise().mean()).transpose();
}

}  // namespace

Driver zero_driver(Index k) {
  return {[k](double, const Vector&, const Vector&, const Matrix&, Index) { return Vector::Zero(k).eval(); },
          k, 0.0, true, true};
}

Driver constant_per_state_driver(const Matrix& values) {
  return {[values](double, const Vector&, const Vector&, const Matrix&, Index state) {
            return Vector(values.col(state));
          },
          values.rows(), 0.0, true, true};
}

Driver linear_per_state_driver(const Vector& coefficients, Index k) {
  return {[coefficients](double, const Vector&, const Vector& y, const Matrix&, Index state) {
            return Vector(coefficients(state) * y);
          },
          k, coefficients.cwiseAbs().maxCoeff(), true, true};
}

Driver linear_driver(double lambda, Index k) {
  return {[lambda](double, const Vector&, const Vector& y, const Matrix&, Index) { return Vector(lambda * y); },
          k, std::abs(lambda), true, true};
}

TerminalCondition constant_terminal(const Vector& value) {
  return {[value](const Matrix&) { return value; }, value.size(), "constant", true};
}

TerminalCondition endpoint_terminal(std::function<Vector(const Vector&)> g, Index k,
                                    std::string description) {
  return {[g = std::move(g)](const Matrix& path) { return g(path.row(path.rows() - 1).transpose()); }, k,
          std::move(description), false};
}

TerminalCondition brownian_endpoint_terminal(Index component) {
  return endpoint_terminal(
      [component](const Vector& x) { return Vector::Constant(1, x(component)); }, 1,
      "brownian_endpoint");
}

TimeGrid::TimeGrid(std::vector<double> nodes) : nodes_(std::move(nodes)) {
  if (nodes_.size() < 2) throw Error(ErrorCode::InvalidArgument, "time grid needs at least two nodes");
  for (std::size_t i = 0; i + 1 < nodes_.size(); ++i)
    if (!(nodes_[i + 1] > nodes_[i]))
      throw Error(ErrorCode::InvalidArgument, "time grid must be strictly increasing");
}

TimeGrid TimeGrid::uniform(double t0, double horizon, std::size_t steps) {
  if (steps == 0) throw Error(ErrorCode::InvalidArgument, "time grid needs at least one step");
  std::vector<double> nodes(steps + 1);
  for (std::size_t i = 0; i <= steps; ++i)
    nodes[i] = t0 + (horizon - t0) * static_cast<double>(i) / static_cast<double>(steps);
  nodes.back() = horizon;
  return TimeGrid(std::move(nodes));
}

double TimeGrid::max_step() const {
  double best = 0.0;
  for (std::size_t i = 0; i < steps(); ++i) best = std::max(best, step(i));
  return best;
}

Matrix BrownianEnsemble::position(std::size_t node) const {
  Matrix b = Matrix::Zero(n_paths, dim);
  for (std::size_t i = 0; i < node; ++i) b += increments.at(i);
  return b;
}

BrownianEnsemble sample_brownian(const TimeGrid& grid, Index d, Index n_paths, std::uint64_t seed) {
  if (n_paths < 1 || d < 1) throw Error(ErrorCode::InvalidArgument, "Brownian ensemble needs paths and dimension");
  BrownianEnsemble out{grid, n_paths, d, seed, {}};
  const std::size_t steps = grid.steps();
  out.increments.assign(steps, Matrix(n_paths, d));
  const std::uint64_t key = derive_key(seed, "brownian");
  for (Index p = 0; p < n_paths; ++p) {
    RandomStream rng(key, static_cast<std::uint64_t>(p));
    for (std::size_t i = 0; i < steps; ++i) {
      const double scale = std::sqrt(grid.step(i));
      for (Index c = 0; c < d; ++c) out.increments[i](p, c) = scale * rng.normal();
    }
  }
  return out;
}

Matrix ForwardEnsemble::path(Index p) const {
  Matrix out(static_cast<Index>(values.size()), state_dim());
  for (std::size_t i = 0; i < values.size(); ++i) out.row(static_cast<Index>(i)) = values[i].row(p);
  return out;
}

ForwardEnsemble brownian_forward(const BrownianEnsemble& brownian) {
  ForwardEnsemble fwd;
  fwd.values.reserve(brownian.grid.steps() + 1);
  fwd.values.push_back(Matrix::Zero(brownian.n_paths, brownian.dim));
  for (const auto& inc : brownian.increments) fwd.values.push_back(fwd.values.back() + inc);
  fwd.step = [](double, const Vector& x, const Vector& db, double) { return Vector(x + db); };
  return fwd;
}

ForwardEnsemble euler_maruyama(const std::function<Vector(double, const Vector&)>& drift,
                               const std::function<Matrix(double, const Vector&)>& diffusion,
                               const Vector& x0, const BrownianEnsemble& brownian) {
  ForwardEnsemble fwd;
  fwd.step = [drift, diffusion](double t, const Vector& x, const Vector& db, double dt) {
    return Vector(x + drift(t, x) * dt + diffusion(t, x) * db);
  };
  const Index n = brownian.n_paths;
  fwd.values.push_back(x0.transpose().replicate(n, 1));
  for (std::size_t i = 0; i < brownian.grid.steps(); ++i) {
    const Matrix& prev = fwd.values.back();
    Matrix next(n, x0.size());
    for (Index p = 0; p < n; ++p)
      next.row(p) = fwd.step(brownian.grid.node(i), prev.row(p).transpose(),
                             brownian.increments[i].row(p).transpose(), brownian.grid.step(i))
                        .transpose();
    fwd.values.push_back(std::move(next));
  }
  return fwd;
}

Matrix BsdeSolution::z_at(std::size_t node, Index path) const {
  Matrix out(k, d);
  for (Index r = 0; r < k; ++r)
    for (Index c = 0; c < d; ++c) out(r, c) = z.at(node)(path, r * d + c);
  return out;
}

Vector BsdeSolution::initial_value() const { return column_mean(y.front()); }

bool BsdeSolution::operator==(const BsdeSolution& other) const {
  if (!(grid == other.grid) || k != other.k || d != other.d || y.size() != other.y.size()) return false;
  for (std::size_t i = 0; i < y.size(); ++i)
    if (y[i] != other.y[i] || z[i] != other.z[i] || m[i] != other.m[i]) return false;
  return true;
}

Matrix polynomial_basis(const Matrix& state) {
  const Index n = state.rows();
  std::vector<Vector> coords;
  for (Index j = 0; j < state.cols(); ++j) {
    const Vector col = state.col(j);
    const double mean = col.mean();
    const double sd = std::sqrt((col.array() - mean).square().sum() / static_cast<double>(n));
    if (!(sd > 1e-12 * (1.0 + std::abs(mean)))) continue;
    coords.push_back(((col.array() - mean) / sd).matrix());
  }
  const Index a = static_cast<Index>(coords.size());
  Matrix basis(n, 3 * a + a * (a - 1) / 2);
  Index c = 0;
  for (const auto& u : coords) {
    basis.col(c++) = u;
    basis.col(c++) = u.array().square().matrix();
    basis.col(c++) = u.array().cube().matrix();
  }
  for (Index i = 0; i < a; ++i)
    for (Index j = i + 1; j < a; ++j)
      basis.col(c++) = coords[static_cast<std::size_t>(i)].cwiseProduct(coords[static_cast<std::size_t>(j)]);
  return basis;
}

/// Ridge-regularized least-squares projection onto span{1, basis}. The
/// intercept is not penalized, so constants are reproduced exactly.
struct BsdeSolver::Projector {
  Matrix centered;
  Eigen::LDLT<Matrix> gram;

  explicit Projector(const Matrix& state) {
    const Matrix basis = polynomial_basis(state);
    const Index n = basis.rows();
    const Index p = basis.cols();
    if (p == 0) return;
    if (n <= p + 1)
      throw Error(ErrorCode::RegressionSingular,
                  std::to_string(n) + " paths for " + std::to_string(p + 1) + " basis functions");
    centered = basis.rowwise() - basis.colwise().mean();
    Matrix g = centered.transpose() * centered / static_cast<double>(n);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(g, Eigen::EigenvaluesOnly);
    const auto& ev = eig.eigenvalues();
    if (!(ev.minCoeff() > 1e-12 * ev.maxCoeff()))
      throw Error(ErrorCode::RegressionSingular, "basis Gram matrix is rank deficient");
    g.diagonal().array() += 1e-10 * g.trace() / static_cast<double>(p);
    gram.compute(g);
  }

  Matrix fit(const Matrix& target) const {
    const Vector mean = column_mean(target);
    Matrix fitted = mean.transpose().replicate(target.rows(), 1);
    if (centered.cols() == 0) return fitted;
    const Matrix dev = target.rowwise() - mean.transpose();
    const Matrix coef = gram.solve(centered.transpose() * dev / static_cast<double>(target.rows()));
    fitted += centered * coef;
    return fitted;
  }
};

std::vector<std::vector<std::pair<Index, double>>> interval_occupations(const TimeGrid& grid,
                                                                        const ChainPath& chain) {
  if (chain.start() > grid.start() || chain.horizon() < grid.horizon())
    throw Error(ErrorCode::InvalidArgument, "chain path does not cover the time grid");
  std::vector<std::vector<std::pair<Index, double>>> out(grid.steps());
  for (std::size_t i = 0; i < grid.steps(); ++i) {
    auto& occ = out[i];
    chain.for_each_segment(grid.node(i), grid.node(i + 1), [&](double lo, double hi, Index s) {
      auto it = std::find_if(occ.begin(), occ.end(), [s](const auto& e) { return e.first == s; });
      if (it == occ.end())
        occ.emplace_back(s, hi - lo);
      else
        it->second += hi - lo;
    });
  }
  return out;
}

BsdeSolver::BsdeSolver(ForwardEnsemble forward, BrownianEnsemble brownian, SolverOptions options)
    : forward_(std::move(forward)), brownian_(std::move(brownian)), options_(options) {
  const std::size_t steps = brownian_.grid.steps();
  if (forward_.values.size() != steps + 1 || forward_.n_paths() != brownian_.n_paths)
    throw Error(ErrorCode::DimensionMismatch, "forward ensemble does not match the Brownian ensemble");
  if (options_.mode == ExpectationMode::NestedMonteCarlo) {
    if (steps > 10 || brownian_.n_paths > 500)
      throw Error(ErrorCode::InvalidArgument, "nested Monte Carlo mode is limited to N <= 10 and 500 paths");
    if (forward_.state_dim() != 1 || brownian_.dim != 1)
      throw Error(ErrorCode::InvalidArgument, "nested Monte Carlo mode needs a scalar forward state");
    return;
  }
  projectors_.reserve(steps);
  for (std::size_t i = 0; i < steps; ++i)
    projectors_.push_back(std::make_shared<const Projector>(forward_.values[i]));
}

Matrix BsdeSolver::terminal_values(const TerminalCondition& xi) const {
  const Index n = brownian_.n_paths;
  Matrix out(n, xi.dim);
  for (Index p = 0; p < n; ++p) {
    const Vector v = xi(forward_.path(p));
    if (v.size() != xi.dim) throw Error(ErrorCode::DimensionMismatch, "terminal condition has wrong size");
    out.row(p) = v.transpose();
  }
  return out;
}

void BsdeSolver::backward_step(std::size_t i, const Driver& driver,
                               const std::vector<std::pair<Index, double>>& occupation,
                               const Matrix& y_next, const Matrix* frozen_y, const Matrix* frozen_z,
                               Matrix& y_out, Matrix& z_out, int& inner_iterations,
                               double& residual_rms) const {
  const Index n = brownian_.n_paths;
  const Index k = y_next.cols();
  const Index d = brownian_.dim;
  const double dt = brownian_.grid.step(i);
  const double t = brownian_.grid.node(i);
  const Matrix& db = brownian_.increments[i];
  const Matrix& x = forward_.values[i];

  Matrix cond(n, k);
  z_out.resize(n, k * d);
  if (options_.mode == ExpectationMode::Regression) {
    const Projector& proj = *projectors_[i];
    cond = proj.fit(y_next);
    const Matrix dev = y_next - cond;
    Matrix target(n, k * d);
    for (Index r = 0; r < k; ++r)
      for (Index c = 0; c < d; ++c) target.col(r * d + c) = dev.col(r).cwiseProduct(db.col(c)) / dt;
    z_out = proj.fit(target);
  } else {
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    const Matrix& x_next = forward_.values[i + 1];
    std::sort(order.begin(), order.end(), [&](Index a, Index b) { return x_next(a, 0) < x_next(b, 0); });
    std::vector<double> xs(static_cast<std::size_t>(n));
    Matrix ys(n, k);
    for (Index q = 0; q < n; ++q) {
      xs[static_cast<std::size_t>(q)] = x_next(order[static_cast<std::size_t>(q)], 0);
      ys.row(q) = y_next.row(order[static_cast<std::size_t>(q)]);
    }
    auto interpolate = [&](double v) -> Vector {
      if (v <= xs.front()) return ys.row(0).transpose();
      if (v >= xs.back()) return ys.row(n - 1).transpose();
      const auto hi = static_cast<Index>(std::upper_bound(xs.begin(), xs.end(), v) - xs.begin());
      const Index lo = hi - 1;
      const double span = xs[static_cast<std::size_t>(hi)] - xs[static_cast<std::size_t>(lo)];
      const double w = span > 0 ? (v - xs[static_cast<std::size_t>(lo)]) / span : 0.0;
      return (ys.row(lo) + w * (ys.row(hi) - ys.row(lo))).transpose();
    };
    const int inner = options_.nested_inner_paths;
    const std::uint64_t key = derive_key(options_.nested_seed, "nested", i);
    for (Index p = 0; p < n; ++p) {
      RandomStream rng(key, static_cast<std::uint64_t>(p));
      Matrix samples(inner, k);
      Vector shocks(inner);
      const Vector xp = x.row(p).transpose();
      for (int s = 0; s < inner; ++s) {
        shocks(s) = std::sqrt(dt) * rng.normal();
        samples.row(s) = interpolate(forward_.step(t, xp, Vector::Constant(1, shocks(s)), dt)(0)).transpose();
      }
      const Vector mean = column_mean(samples);
      cond.row(p) = mean.transpose();
      for (Index r = 0; r < k; ++r)
        z_out(p, r) = (samples.col(r).array() - mean(r)).matrix().dot(shocks) / static_cast<double>(inner) / dt;
    }
  }

  Matrix zp(k, d);
  y_out.resize(n, k);
  inner_iterations = 0;
  for (Index p = 0; p < n; ++p) {
    for (Index r = 0; r < k; ++r)
      for (Index c = 0; c < d; ++c) zp(r, c) = z_out(p, r * d + c);
    const Vector xp = x.row(p).transpose();
    const Vector base = cond.row(p).transpose();
    auto integrated_driver = [&](const Vector& yv, const Matrix& zv) {
      Vector acc = Vector::Zero(k);
      for (const auto& [state, tau] : occupation) acc += tau * driver(t, xp, yv, zv, state);
      return acc;
    };
    Vector y;
    if (frozen_y != nullptr) {
      Matrix zf(k, d);
      for (Index r = 0; r < k; ++r)
        for (Index c = 0; c < d; ++c) zf(r, c) = (*frozen_z)(p, r * d + c);
      y = base + integrated_driver(frozen_y->row(p).transpose(), zf);
      inner_iterations = std::max(inner_iterations, 1);
    } else {
      y = base;
      int it = 0;
      while (it < options_.inner_max_iterations) {
        ++it;
        Vector next = base + integrated_driver(y, zp);
        const double change = (next - y).lpNorm<Eigen::Infinity>();
        y = std::move(next);
        if (change <= options_.inner_tolerance * (1.0 + y.lpNorm<Eigen::Infinity>())) break;
      }
      inner_iterations = std::max(inner_iterations, it);
    }
    y_out.row(p) = y.transpose();
  }

  double ss = 0.0;
  for (Index p = 0; p < n; ++p)
    for (Index r = 0; r < k; ++r) {
      double zdb = 0.0;
      for (Index c = 0; c < d; ++c) zdb += z_out(p, r * d + c) * db(p, c);
      const double e = y_next(p, r) - cond(p, r) - zdb;
      ss += e * e;
    }
  residual_rms = std::sqrt(ss / static_cast<double>(n));
}

namespace {

void check_step_bound(const Driver& driver, const TimeGrid& grid) {
  if (grid.max_step() * driver.lipschitz_mu >= 0.5)
    throw Error(ErrorCode::StepTooLarge, "max step " + std::to_string(grid.max_step()) +
                                              " violates dt * mu < 1/2 for mu = " +
                                              std::to_string(driver.lipschitz_mu));
}

void accumulate_martingale(BsdeSolution& sol, const BrownianEnsemble& brownian) {
  const Index n = brownian.n_paths;
  sol.m.assign(sol.y.size(), Matrix::Zero(n, sol.k));
  for (std::size_t i = 0; i + 1 < sol.y.size(); ++i) {
    Matrix inc = Matrix::Zero(n, sol.k);
    for (Index r = 0; r < sol.k; ++r)
      for (Index c = 0; c < sol.d; ++c)
        inc.col(r) += sol.z[i].col(r * sol.d + c).cwiseProduct(brownian.increments[i].col(c));
    sol.m[i + 1] = sol.m[i] + inc;
  }
}

}  // namespace

BsdeSolution BsdeSolver::solve(const Driver& driver, const TerminalCondition& xi,
                               const ChainPath& chain) const {
  const TimeGrid& grid = brownian_.grid;
  check_step_bound(driver, grid);
  if (driver.dim != xi.dim) throw Error(ErrorCode::DimensionMismatch, "driver and terminal dimensions differ");
  const auto occupations = interval_occupations(grid, chain);
  const std::size_t steps = grid.steps();
  BsdeSolution sol{grid, xi.dim, brownian_.dim, {}, {}, {}, {}};
  sol.y.resize(steps + 1);
  sol.z.resize(steps + 1);
  sol.y[steps] = terminal_values(xi);
  sol.z[steps] = Matrix::Zero(brownian_.n_paths, sol.k * sol.d);
  sol.diagnostics.regression_residual_rms.assign(steps, 0.0);
  sol.diagnostics.basis_size =
      projectors_.empty() ? 0 : static_cast<Index>(projectors_.back()->centered.cols() + 1);
  for (std::size_t i = steps; i-- > 0;) {
    int iterations = 0;
    backward_step(i, driver, occupations[i], sol.y[i + 1], nullptr, nullptr, sol.y[i], sol.z[i],
                  iterations, sol.diagnostics.regression_residual_rms[i]);
    sol.diagnostics.max_inner_iterations = std::max(sol.diagnostics.max_inner_iterations, iterations);
  }
  accumulate_martingale(sol, brownian_);
  return sol;
}

BsdeSolution solve_backward(const Driver& driver, const TerminalCondition& xi, const TimeGrid& grid,
                            const BrownianEnsemble& brownian, const ChainPath& chain,
                            const SolverOptions& options) {
  if (!(grid == brownian.grid)) throw Error(ErrorCode::DimensionMismatch, "grid differs from the Brownian grid");
  check_step_bound(driver, grid);
  return BsdeSolver(brownian_forward(brownian), brownian, options).solve(driver, xi, chain);
}

double default_picard_beta(double mu) { return 2.0 * mu + 2.0 * mu * mu + 1.0; }

double beta_norm_distance(const BsdeSolution& a, const BsdeSolution& b, double beta) {
  if (a.y.size() != b.y.size() || a.n_paths() != b.n_paths())
    throw Error(ErrorCode::DimensionMismatch, "solutions live on different grids");
  const Index n = a.n_paths();
  double total = 0.0;
  for (std::size_t i = 0; i < a.grid.steps(); ++i) {
    const double w = a.grid.step(i) * std::exp(beta * a.grid.node(i));
    total += w * ((a.y[i] - b.y[i]).squaredNorm() + (a.z[i] - b.z[i]).squaredNorm());
  }
  return std::sqrt(total / static_cast<double>(n));
}

PicardResult picard_solve(const Driver& driver, const TerminalCondition& xi, const TimeGrid& grid,
                          const BrownianEnsemble& brownian, const ChainPath& chain, double beta,
                          int max_iterations, double tolerance, const SolverOptions& options) {
  if (!(beta > 0)) throw Error(ErrorCode::InvalidArgument, "beta must be positive");
  if (!(grid == brownian.grid)) throw Error(ErrorCode::DimensionMismatch, "grid differs from the Brownian grid");
  check_step_bound(driver, grid);
  const BsdeSolver solver(brownian_forward(brownian), brownian, options);
  const auto occupations = interval_occupations(grid, chain);
  const std::size_t steps = grid.steps();
  const Index n = brownian.n_paths;

  BsdeSolution current{grid, xi.dim, brownian.dim, {}, {}, {}, {}};
  current.y.assign(steps + 1, Matrix::Zero(n, xi.dim));
  current.z.assign(steps + 1, Matrix::Zero(n, xi.dim * brownian.dim));
  const Matrix terminal = solver.terminal_values(xi);

  PicardReport report;
  report.beta = beta;
  int non_decreasing = 0;
  for (int iter = 0; iter < max_iterations; ++iter) {
    BsdeSolution next = current;
    next.y[steps] = terminal;
    next.diagnostics.regression_residual_rms.assign(steps, 0.0);
    for (std::size_t i = steps; i-- > 0;) {
      int iterations = 0;
      solver.backward_step(i, driver, occupations[i], next.y[i + 1], &current.y[i], &current.z[i],
                           next.y[i], next.z[i], iterations, next.diagnostics.regression_residual_rms[i]);
    }
    const double diff = beta_norm_distance(next, current, beta);
    report.differences.push_back(diff);
    if (report.differences.size() > 1) {
      const double prev = report.differences[report.differences.size() - 2];
      report.ratios.push_back(prev > 0 ? diff / prev : 0.0);
      non_decreasing = diff >= prev ? non_decreasing + 1 : 0;
    }
    current = std::move(next);
    if (diff < tolerance) {
      report.converged = true;
      report.iterations = iter;
      break;
    }
    if (non_decreasing >= 3)
      throw Error(ErrorCode::NoConvergence, "Picard differences did not decrease for 3 iterations");
  }
  if (!report.converged) report.iterations = max_iterations;
  accumulate_martingale(current, brownian);
  return {std::move(current), std::move(report)};
}

AprioriStats a_priori_stats(const BsdeSolution& solution) {
  const Index n = solution.n_paths();
  std::vector<double> sup_y(static_cast<std::size_t>(n), 0.0), int_z(static_cast<std::size_t>(n), 0.0),
      both(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < solution.y.size(); ++i) {
    const Vector y2 = solution.y[i].rowwise().squaredNorm();
    for (Index p = 0; p < n; ++p) sup_y[static_cast<std::size_t>(p)] = std::max(sup_y[static_cast<std::size_t>(p)], y2(p));
  }
  for (std::size_t i = 0; i < solution.grid.steps(); ++i) {
    const Vector z2 = solution.z[i].rowwise().squaredNorm();
    for (Index p = 0; p < n; ++p) int_z[static_cast<std::size_t>(p)] += solution.grid.step(i) * z2(p);
  }
  for (std::size_t p = 0; p < both.size(); ++p) both[p] = sup_y[p] + int_z[p];
  return {mean_estimate(sup_y), mean_estimate(int_z), mean_estimate(both)};
}

MartingaleReport martingale_residual_check(const BsdeSolution& solution, const Driver& driver,
                                           const ChainPath& chain, const ForwardEnsemble& forward,
                                           const BrownianEnsemble& brownian, double z_threshold) {
  const Index n = solution.n_paths();
  const Index k = solution.k;
  const Index d = solution.d;
  const TimeGrid& grid = solution.grid;
  const auto occupations = interval_occupations(grid, chain);

  // Per-path sums over nodes of (statistic x basis function). The tested
  // functions are the intercept and the first three standardized basis
  // columns (zero at nodes where the forward state is degenerate).
  //
  // In-sample projection ties the residual sums to other quantities: the
  // basis-weighted residual sum equals the basis-weighted increment sum, and
  // the dB-weighted residual sum equals sum phi Z (dB^2 - dt) when Z is the
  // fitted projection. Standard errors are taken from those null
  // fluctuations rather than from the (much smaller) residuals themselves.
  constexpr Index kTested = 4;
  std::vector<Matrix> inc_sum(kTested, Matrix::Zero(n, k));
  std::vector<Matrix> res_sum(kTested, Matrix::Zero(n, k));
  std::vector<Matrix> resdb_sum(kTested, Matrix::Zero(n, k * d));
  std::vector<Matrix> null_sum(kTested, Matrix::Zero(n, k * d));
  double ss = 0.0;
  for (std::size_t i = 0; i < grid.steps(); ++i) {
    const Matrix raw = polynomial_basis(forward.values[i]);
    Matrix basis = Matrix::Zero(n, kTested);
    basis.col(0).setOnes();
    const Index used = std::min<Index>(raw.cols(), kTested - 1);
    basis.middleCols(1, used) = raw.leftCols(used);
    const double t = grid.node(i);
    const double dt = grid.step(i);
    const Matrix& db = brownian.increments[i];
    for (Index p = 0; p < n; ++p) {
      const Vector xp = forward.values[i].row(p).transpose();
      const Vector yp = solution.y[i].row(p).transpose();
      const Matrix zp = solution.z_at(i, p);
      Vector drv = Vector::Zero(k);
      for (const auto& [state, tau] : occupations[i]) drv += tau * driver(t, xp, yp, zp, state);
      const Vector dm = zp * db.row(p).transpose();
      const Vector r = yp - solution.y[i + 1].row(p).transpose() - drv + dm;
      ss += r.squaredNorm();
      for (Index b = 0; b < kTested; ++b) {
        const double phi = basis(p, b);
        if (phi == 0.0) continue;
        inc_sum[static_cast<std::size_t>(b)].row(p) += phi * dm.transpose();
        res_sum[static_cast<std::size_t>(b)].row(p) += phi * r.transpose();
        for (Index rr = 0; rr < k; ++rr)
          for (Index c = 0; c < d; ++c) {
            resdb_sum[static_cast<std::size_t>(b)](p, rr * d + c) += phi * r(rr) * db(p, c);
            null_sum[static_cast<std::size_t>(b)](p, rr * d + c) +=
                phi * zp(rr, c) * (db(p, c) * db(p, c) - dt);
          }
      }
    }
  }

  auto column = [n](const Matrix& m, Index c) {
    return std::vector<double>(m.col(c).data(), m.col(c).data() + n);
  };
  // Rounding floor for the standard errors: when Y is deterministic the
  // sums are pure rounding and their spread says nothing.
  double y_scale = 0.0;
  for (const auto& level : solution.y) y_scale = std::max(y_scale, level.cwiseAbs().maxCoeff());
  const double floor = 1e3 * std::numeric_limits<double>::epsilon() * std::max(y_scale, 1.0) *
                       static_cast<double>(grid.steps());
  auto ratio = [floor](double mean, double se) { return mean / std::max(se, floor); };

  MartingaleReport report;
  report.residual_rms = std::sqrt(ss / static_cast<double>(n * static_cast<Index>(grid.steps())));
  for (Index b = 0; b < kTested; ++b) {
    const auto bi = static_cast<std::size_t>(b);
    for (Index c = 0; c < k; ++c) {
      const Estimate inc = mean_estimate(column(inc_sum[bi], c));
      const Estimate res = mean_estimate(column(res_sum[bi], c));
      report.increment_basis_z.push_back(ratio(inc.mean, inc.standard_error));
      report.residual_basis_z.push_back(ratio(res.mean, std::hypot(res.standard_error, inc.standard_error)));
    }
    for (Index c = 0; c < k * d; ++c) {
      const Estimate w = mean_estimate(column(resdb_sum[bi], c));
      const Estimate v = mean_estimate(column(null_sum[bi], c));
      report.residual_brownian_z.push_back(ratio(w.mean, std::hypot(w.standard_error, v.standard_error)));
    }
  }
  for (const auto* zs : {&report.increment_basis_z, &report.residual_basis_z, &report.residual_brownian_z})
    for (double zv : *zs) report.max_abs_z_score = std::max(report.max_abs_z_score, std::abs(zv));
  report.passed = report.max_abs_z_score <= z_threshold;
  return report;
}

MartingaleReport martingale_residual_check(const BsdeSolution& solution, const Driver& driver,
                                           const ChainPath& chain, const BrownianEnsemble& brownian,
                                           double z_threshold) {
  return martingale_residual_check(solution, driver, chain, brownian_forward(brownian), brownian,
                                   z_threshold);
}

}  // namespace mmbsde
