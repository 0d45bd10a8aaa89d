#include "mmbsde/lq_control.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mmbsde/error.hpp"
#include "mmbsde/random.hpp"
#include "mmbsde/stats.hpp"

namespace mmbsde {

Matrix MatrixPolynomial::operator()(double t) const {
  if (coefficients.empty()) throw Error(ErrorCode::InvalidArgument, "empty matrix polynomial");
  // Horner
  Matrix out = coefficients.back();
  for (auto it = coefficients.rbegin() + 1; it != coefficients.rend(); ++it) out = out * t + *it;
  return out;
}

namespace {

void require_shape(const MatrixPolynomial& p, Index rows, Index cols, const char* name, std::size_t regime) {
  if (p.coefficients.empty())
    throw Error(ErrorCode::InvalidArgument, std::string(name) + " has no coefficients");
  for (const auto& c : p.coefficients)
    if (c.rows() != rows || c.cols() != cols)
      throw Error(ErrorCode::DimensionMismatch,
                  std::string(name) + " of regime " + std::to_string(regime) + " must be " +
                      std::to_string(rows) + "x" + std::to_string(cols));
}

double min_symmetric_eigenvalue(const Matrix& m, const std::string& what) {
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
    throw Error(ErrorCode::InvalidArgument, what + " is not symmetric");
  return Eigen::SelfAdjointEigenSolver<Matrix>(m, Eigen::EigenvaluesOnly).eigenvalues().minCoeff();
}

}  // namespace

double validate_lq_problem(const LqProblem& problem) {
  if (problem.regimes.empty()) throw Error(ErrorCode::InvalidArgument, "LQ problem has no regimes");
  if (!(problem.horizon > 0)) throw Error(ErrorCode::InvalidArgument, "horizon must be positive");
  const Index m = problem.regime_count();
  const Index n = problem.state_dim();
  if (n == 0) throw Error(ErrorCode::InvalidArgument, "empty initial state");
  if (problem.initial_regime < 0 || problem.initial_regime >= m)
    throw Error(ErrorCode::UnknownState, "initial regime " + std::to_string(problem.initial_regime));
  validate_generator(problem.generator);
  if (problem.generator.rows() != m)
    throw Error(ErrorCode::DimensionMismatch, "generator size differs from regime count");

  const Index nu = problem.control_dim();
  double floor = INFINITY;
  for (std::size_t i = 0; i < problem.regimes.size(); ++i) {
    const auto& reg = problem.regimes[i];
    require_shape(reg.a, n, n, "A", i);
    require_shape(reg.b, n, nu, "B", i);
    require_shape(reg.c, n, n, "C", i);
    require_shape(reg.d, n, nu, "D", i);
    require_shape(reg.r, n, n, "R", i);
    require_shape(reg.n, nu, nu, "N", i);
    if (reg.q_terminal.rows() != n || reg.q_terminal.cols() != n)
      throw Error(ErrorCode::DimensionMismatch, "terminal weight of regime " + std::to_string(i));
    const std::string tag = " of regime " + std::to_string(i);
    if (min_symmetric_eigenvalue(reg.q_terminal, "terminal weight" + tag) < -1e-12)
      throw Error(ErrorCode::InvalidArgument, "terminal weight" + tag + " is not PSD");
    constexpr int kSamples = 33;
    for (int s = 0; s < kSamples; ++s) {
      const double t = problem.horizon * s / (kSamples - 1);
      if (min_symmetric_eigenvalue(reg.r(t), "R" + tag) < -1e-12)
        throw Error(ErrorCode::InvalidArgument, "R" + tag + " is not PSD at t=" + std::to_string(t));
      floor = std::min(floor, min_symmetric_eigenvalue(reg.n(t), "N" + tag));
    }
  }
  if (!(floor > 0))
    throw Error(ErrorCode::InvalidArgument, "control weight N is not positive definite");
  return floor;
}

ControlLaw zero_control(Index control_dim) {
  return [control_dim](double, const Vector&, Index) { return Vector::Zero(control_dim); };
}

FeedbackSolution::FeedbackSolution(LqProblem problem, std::vector<double> times,
                                   std::vector<std::vector<Matrix>> values)
    : problem_(std::move(problem)), times_(std::move(times)), values_(std::move(values)) {
  if (times_.size() < 2 || times_.size() != values_.size())
    throw Error(ErrorCode::InvalidArgument, "feedback needs matching time and value grids");
  gains_.resize(times_.size());
  for (std::size_t i = 0; i < times_.size(); ++i)
    for (Index r = 0; r < problem_.regime_count(); ++r) {
      const auto& reg = problem_.regimes[static_cast<std::size_t>(r)];
      const double t = times_[i];
      const Matrix& p = values_[i][static_cast<std::size_t>(r)];
      const Matrix b = reg.b(t), c = reg.c(t), d = reg.d(t);
      const Matrix lhs = reg.n(t) + d.transpose() * p * d;
      gains_[i].push_back(-lhs.ldlt().solve(Matrix(b.transpose() * p + d.transpose() * p * c)));
    }
}

namespace {

template <typename Field>
Matrix interpolate(const std::vector<double>& times, const Field& field, double t, Index regime) {
  const auto r = static_cast<std::size_t>(regime);
  if (t <= times.front()) return field.front()[r];
  if (t >= times.back()) return field.back()[r];
  const auto hi = static_cast<std::size_t>(std::upper_bound(times.begin(), times.end(), t) - times.begin());
  const std::size_t lo = hi - 1;
  const double w = (t - times[lo]) / (times[hi] - times[lo]);
  return (1 - w) * field[lo][r] + w * field[hi][r];
}

}  // namespace

Matrix FeedbackSolution::value_matrix(double t, Index regime) const {
  return interpolate(times_, values_, t, regime);
}

Matrix FeedbackSolution::gain(double t, Index regime) const { return interpolate(times_, gains_, t, regime); }

Vector FeedbackSolution::control(double t, const Vector& x, Index regime) const {
  return gain(t, regime) * x;
}

ControlLaw FeedbackSolution::law() const {
  return [self = *this](double t, const Vector& x, Index regime) { return self.control(t, x, regime); };
}

double FeedbackSolution::optimal_cost() const {
  const Vector& a = problem_.initial_state;
  return 0.5 * a.dot(values_.front()[static_cast<std::size_t>(problem_.initial_regime)] * a);
}

Vector FeedbackSolution::costate_y(double t, const Vector& x, Index regime) const {
  return value_matrix(t, regime) * x;
}

Vector FeedbackSolution::costate_z(double t, const Vector& x, const Vector& u, Index regime) const {
  const auto& reg = problem_.regimes[static_cast<std::size_t>(regime)];
  return value_matrix(t, regime) * (reg.c(t) * x + reg.d(t) * u);
}

FeedbackSolution FeedbackSolution::scaled(double factor) const {
  auto values = values_;
  for (auto& node : values)
    for (auto& p : node) p *= factor;
  return {problem_, times_, std::move(values)};
}

namespace {

// dP_i/ds with s = T - t, i.e. minus the time derivative.
std::vector<Matrix> riccati_rhs(const LqProblem& problem, double t, const std::vector<Matrix>& p) {
  const std::size_t m = p.size();
  std::vector<Matrix> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    const auto& reg = problem.regimes[i];
    const Matrix a = reg.a(t), b = reg.b(t), c = reg.c(t), d = reg.d(t);
    const Matrix& pi = p[i];
    const Matrix cross = pi * b + c.transpose() * pi * d;
    const Matrix weight = reg.n(t) + d.transpose() * pi * d;
    Matrix g = a.transpose() * pi + pi * a + c.transpose() * pi * c + reg.r(t) -
               cross * weight.ldlt().solve(cross.transpose());
    for (std::size_t j = 0; j < m; ++j) {
      const double q = problem.generator(static_cast<Index>(i), static_cast<Index>(j));
      if (q != 0.0) g += q * p[j];
    }
    out[i] = g;
  }
  return out;
}

std::vector<Matrix> axpy(const std::vector<Matrix>& x, double h, const std::vector<Matrix>& k) {
  std::vector<Matrix> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + h * k[i];
  return out;
}

}  // namespace

FeedbackSolution solve_optimal(const LqProblem& problem, const RiccatiOptions& options) {
  validate_lq_problem(problem);
  if (options.steps < 1) throw Error(ErrorCode::InvalidArgument, "Riccati needs at least one step");
  const std::size_t steps = options.steps;
  const double T = problem.horizon;
  const double h = T / static_cast<double>(steps);

  std::vector<double> times(steps + 1);
  for (std::size_t i = 0; i <= steps; ++i) times[i] = T * static_cast<double>(i) / static_cast<double>(steps);
  times.back() = T;
  std::vector<std::vector<Matrix>> values(steps + 1);

  std::vector<Matrix> p;
  for (const auto& reg : problem.regimes) p.push_back(reg.q_terminal);
  values[steps] = p;
  for (std::size_t s = steps; s-- > 0;) {
    const double t = times[s + 1];
    const auto k1 = riccati_rhs(problem, t, p);
    const auto k2 = riccati_rhs(problem, t - h / 2, axpy(p, h / 2, k1));
    const auto k3 = riccati_rhs(problem, t - h / 2, axpy(p, h / 2, k2));
    const auto k4 = riccati_rhs(problem, t - h, axpy(p, h, k3));
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] += h / 6 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
      p[i] = 0.5 * (p[i] + p[i].transpose()).eval();
      const double norm = p[i].norm();
      if (!std::isfinite(norm) || norm > options.blowup_norm)
        throw Error(ErrorCode::RiccatiBlowup,
                    "P of regime " + std::to_string(i) + " reached norm " + std::to_string(norm) +
                        " at t=" + std::to_string(times[s]));
      const double lowest =
          Eigen::SelfAdjointEigenSolver<Matrix>(p[i], Eigen::EigenvaluesOnly).eigenvalues().minCoeff();
      if (lowest < -1e-10 * std::max(1.0, norm))
        throw Error(ErrorCode::RiccatiBlowup,
                    "P of regime " + std::to_string(i) + " lost semidefiniteness at t=" +
                        std::to_string(times[s]));
    }
    values[s] = p;
  }
  return {problem, std::move(times), std::move(values)};
}

namespace {

const ChainPath& chain_for(const std::vector<ChainPath>& chains, Index path) {
  return chains.size() == 1 ? chains.front() : chains[static_cast<std::size_t>(path)];
}

void check_ensembles(const LqProblem& problem, const std::vector<ChainPath>& chains,
                     const BrownianEnsemble& brownian) {
  if (brownian.dim != 1) throw Error(ErrorCode::DimensionMismatch, "LQ dynamics use a scalar Brownian motion");
  if (chains.empty() || (chains.size() != 1 && static_cast<Index>(chains.size()) != brownian.n_paths))
    throw Error(ErrorCode::DimensionMismatch, "need one chain path or one per Brownian path");
  if (std::abs(brownian.grid.horizon() - problem.horizon) > 1e-12 || brownian.grid.start() != 0.0)
    throw Error(ErrorCode::InvalidArgument, "Brownian grid must cover [0, T]");
}

struct Coefficients {
  Matrix a, b, c, d, r, n;
};

// Coefficients evaluated once per (node, regime).
std::vector<std::vector<Coefficients>> tabulate(const LqProblem& problem, const TimeGrid& grid) {
  std::vector<std::vector<Coefficients>> out(grid.nodes().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double t = grid.node(i);
    for (const auto& reg : problem.regimes)
      out[i].push_back({reg.a(t), reg.b(t), reg.c(t), reg.d(t), reg.r(t), reg.n(t)});
  }
  return out;
}

using ControlAt = std::function<Vector(std::size_t node, Index path, double t, const Vector& x, Index regime)>;

LqTrajectories simulate(const LqProblem& problem, const ControlAt& control,
                        const std::vector<ChainPath>& chains, const BrownianEnsemble& brownian,
                        const std::vector<std::vector<Coefficients>>& table) {
  const TimeGrid& grid = brownian.grid;
  const Index n = brownian.n_paths;
  const std::size_t steps = grid.steps();

  LqTrajectories out;
  out.x.assign(steps + 1, Matrix(n, problem.state_dim()));
  out.u.assign(steps + 1, Matrix(n, problem.control_dim()));
  out.regime.assign(steps + 1, std::vector<Index>(static_cast<std::size_t>(n)));
  out.cost.assign(static_cast<std::size_t>(n), 0.0);

  for (Index p = 0; p < n; ++p) {
    const ChainPath& chain = chain_for(chains, p);
    Vector x = problem.initial_state;
    double running = 0.0;
    double previous = 0.0;
    for (std::size_t i = 0; i <= steps; ++i) {
      const double t = grid.node(i);
      const Index regime = chain.state_at(t);
      const Coefficients& k = table[i][static_cast<std::size_t>(regime)];
      const Vector u = control(i, p, t, x, regime);
      out.x[i].row(p) = x.transpose();
      out.u[i].row(p) = u.transpose();
      out.regime[i][static_cast<std::size_t>(p)] = regime;
      const double g = x.dot(k.r * x) + u.dot(k.n * u);
      if (i > 0) running += 0.5 * grid.step(i - 1) * (previous + g);
      previous = g;
      if (i == steps) {
        const auto& q = problem.regimes[static_cast<std::size_t>(regime)].q_terminal;
        out.cost[static_cast<std::size_t>(p)] = 0.5 * (running + x.dot(q * x));
        break;
      }
      x += (k.a * x + k.b * u) * grid.step(i) + (k.c * x + k.d * u) * brownian.increments[i](p, 0);
    }
  }
  return out;
}

}  // namespace

LqTrajectories simulate_lq(const LqProblem& problem, const ControlLaw& law,
                           const std::vector<ChainPath>& chains, const BrownianEnsemble& brownian) {
  check_ensembles(problem, chains, brownian);
  const ControlAt control = [&law](std::size_t, Index, double t, const Vector& x, Index regime) {
    return law(t, x, regime);
  };
  return simulate(problem, control, chains, brownian, tabulate(problem, brownian.grid));
}

Estimate evaluate_cost(const LqProblem& problem, const ControlLaw& law,
                       const std::vector<ChainPath>& chains, const BrownianEnsemble& brownian) {
  return mean_estimate(simulate_lq(problem, law, chains, brownian).cost);
}

Estimate evaluate_cost(const LqProblem& problem, const ControlLaw& law, const ChainPath& chain,
                       const BrownianEnsemble& brownian) {
  return evaluate_cost(problem, law, std::vector<ChainPath>{chain}, brownian);
}

std::function<Vector(double)> random_perturbation(Index control_dim, double horizon, int pieces,
                                                  std::uint64_t key, std::uint64_t index) {
  if (pieces < 1) throw Error(ErrorCode::InvalidArgument, "perturbation needs at least one piece");
  RandomStream rng(key, index);
  Matrix levels(pieces, control_dim);
  for (Index r = 0; r < levels.rows(); ++r)
    for (Index c = 0; c < control_dim; ++c) levels(r, c) = rng.uniform(-1.0, 1.0);
  return [levels, horizon, pieces](double t) -> Vector {
    const int piece = std::clamp(static_cast<int>(std::floor(t / horizon * pieces)), 0, pieces - 1);
    return levels.row(piece).transpose();
  };
}

OptimalityReport verify_optimality(const LqProblem& problem, const FeedbackSolution& feedback,
                                   const std::vector<ChainPath>& chains,
                                   const BrownianEnsemble& brownian, const OptimalityOptions& options) {
  OptimalityReport report;
  report.control_floor = validate_lq_problem(problem);
  check_ensembles(problem, chains, brownian);
  const TimeGrid& grid = brownian.grid;
  const Index n = brownian.n_paths;
  const std::size_t steps = grid.steps();
  const auto table = tabulate(problem, grid);

  const ControlAt candidate = [&feedback](std::size_t, Index, double t, const Vector& x, Index regime) {
    return feedback.control(t, x, regime);
  };
  const LqTrajectories base = simulate(problem, candidate, chains, brownian, table);
  report.optimal_cost = mean_estimate(base.cost);

  // Gradient of the Hamiltonian in u along the candidate, B'y + D'z + N u.
  std::vector<Matrix> grad(steps + 1, Matrix(n, problem.control_dim()));
  for (std::size_t i = 0; i <= steps; ++i)
    for (Index p = 0; p < n; ++p) {
      const double t = grid.node(i);
      const Index regime = base.regime[i][static_cast<std::size_t>(p)];
      const Coefficients& k = table[i][static_cast<std::size_t>(regime)];
      const Vector x = base.x[i].row(p).transpose();
      const Vector u = base.u[i].row(p).transpose();
      const Vector y = feedback.costate_y(t, x, regime);
      const Vector z = feedback.costate_z(t, x, u, regime);
      grad[i].row(p) = (k.b.transpose() * y + k.d.transpose() * z + k.n * u).transpose();
    }

  const std::uint64_t key = derive_key(options.seed, "lq_perturbation");
  report.stationarity_ok = true;
  report.dominance_ok = true;
  report.convexity_ok = true;
  std::vector<double> inner(static_cast<std::size_t>(n));
  std::vector<double> increase(static_cast<std::size_t>(n));
  std::vector<double> curvature(static_cast<std::size_t>(n));
  for (int k = 0; k < options.n_perturbations; ++k) {
    const auto v = random_perturbation(problem.control_dim(), problem.horizon, options.pieces, key,
                                       static_cast<std::uint64_t>(k));
    std::vector<Vector> v_nodes;
    for (std::size_t i = 0; i <= steps; ++i) v_nodes.push_back(v(grid.node(i)));

    for (Index p = 0; p < n; ++p) {
      double acc = 0.0;
      for (std::size_t i = 0; i < steps; ++i) acc += grid.step(i) * grad[i].row(p).dot(v_nodes[i]);
      inner[static_cast<std::size_t>(p)] = acc;
    }
    const Estimate st = mean_estimate(inner);
    const double st_z = st.standard_error > 0 ? std::abs(st.mean) / st.standard_error : 0.0;
    if (std::abs(st.mean) > options.z_threshold * st.standard_error + options.absolute_tolerance)
      report.stationarity_ok = false;
    if (k == 0 || std::abs(st.mean) > std::abs(report.stationarity.mean)) {
      report.stationarity = st;
      report.stationarity_z = st_z;
    }

    // Trapezoidal int |v|^2, matching the cost quadrature.
    double v_norm = 0.0;
    for (std::size_t i = 0; i < steps; ++i)
      v_norm += 0.5 * grid.step(i) * (v_nodes[i].squaredNorm() + v_nodes[i + 1].squaredNorm());

    for (double delta : options.deltas) {
      // The candidate's control process shifted by +-delta v (open loop).
      auto shifted = [&](double sign) {
        const ControlAt control = [&](std::size_t i, Index p, double, const Vector&, Index) {
          return Vector(base.u[i].row(p).transpose() + sign * delta * v_nodes[i]);
        };
        return simulate(problem, control, chains, brownian, table).cost;
      };
      const auto plus = shifted(1.0);
      const auto minus = shifted(-1.0);
      for (std::size_t p = 0; p < increase.size(); ++p) {
        increase[p] = plus[p] - base.cost[p];
        curvature[p] = 0.5 * (plus[p] + minus[p]) - base.cost[p];
      }
      PerturbationResult r;
      r.perturbation = k;
      r.delta = delta;
      r.cost_increase = mean_estimate(increase);
      r.curvature = mean_estimate(curvature);
      r.convexity_bound = 0.5 * delta * delta * report.control_floor * v_norm;
      r.dominance = r.cost_increase.mean >=
                    -(options.z_threshold * r.cost_increase.standard_error + options.absolute_tolerance);
      r.convexity = r.curvature.mean >= r.convexity_bound - (options.z_threshold * r.curvature.standard_error +
                                                             options.absolute_tolerance);
      report.dominance_passed += r.dominance;
      report.convexity_passed += r.convexity;
      report.dominance_ok = report.dominance_ok && r.dominance;
      report.convexity_ok = report.convexity_ok && r.convexity;
      report.perturbations.push_back(r);
    }
  }
  report.passed = report.dominance_ok && report.stationarity_ok && report.convexity_ok;
  if (!report.passed && options.throw_on_violation)
    throw Error(ErrorCode::OptimalityViolation,
                std::string("optimality check failed:") + (report.dominance_ok ? "" : " dominance") +
                    (report.stationarity_ok ? "" : " stationarity") +
                    (report.convexity_ok ? "" : " convexity"));
  return report;
}

}  // namespace mmbsde
