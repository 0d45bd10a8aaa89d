#pragma once

// Backward solver for Markov-chain-modulated BSDEs
//
//   Y_t = xi + int_t^T f(s, X_s, Y_s, Z_s, alpha_s) ds - int_t^T Z_s dB_s,
//
// conditioned on a full chain path. The Brownian-side conditional
// expectations are estimated by least-squares regression on polynomials of
// the current forward state (the Brownian motion itself, or X in FBSDE use).

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mmbsde/markov_chain.hpp"

namespace mmbsde {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Driver f(t, x, y, z, state) with values in R^k; z is k x d.
struct Driver {
  using Fn = std::function<Vector(double t, const Vector& x, const Vector& y, const Matrix& z,
                                  Index state)>;
  Fn f;
  Index dim = 1;
  double lipschitz_mu = 0.0;
  bool z_independent = true;
  bool x_independent = true;

  Vector operator()(double t, const Vector& x, const Vector& y, const Matrix& z, Index state) const {
    return f(t, x, y, z, state);
  }
};

Driver zero_driver(Index k = 1);
/// f(t, y, i) = values(:, i); values is k x m.
Driver constant_per_state_driver(const Matrix& values);
/// f(t, y, i) = c_i * y (componentwise scaling).
Driver linear_per_state_driver(const Vector& coefficients, Index k = 1);
/// f(t, y) = lambda * y in every state.
Driver linear_driver(double lambda, Index k = 1);

struct TerminalCondition {
  /// Receives the forward path, one row per grid node.
  std::function<Vector(const Matrix& forward_path)> xi;
  Index dim = 1;
  std::string description;
  bool deterministic = false;

  Vector operator()(const Matrix& forward_path) const { return xi(forward_path); }
};

TerminalCondition constant_terminal(const Vector& value);
/// xi = g(x_T), with x_T the last forward state.
TerminalCondition endpoint_terminal(std::function<Vector(const Vector&)> g, Index k,
                                    std::string description);
/// xi = B_T (component `component` of the forward endpoint).
TerminalCondition brownian_endpoint_terminal(Index component = 0);

class TimeGrid {
public:
  explicit TimeGrid(std::vector<double> nodes);
  static TimeGrid uniform(double t0, double horizon, std::size_t steps);

  const std::vector<double>& nodes() const noexcept { return nodes_; }
  std::size_t steps() const noexcept { return nodes_.size() - 1; }
  double node(std::size_t i) const { return nodes_.at(i); }
  double step(std::size_t i) const { return nodes_.at(i + 1) - nodes_.at(i); }
  double max_step() const;
  double start() const { return nodes_.front(); }
  double horizon() const { return nodes_.back(); }

  bool operator==(const TimeGrid&) const = default;

private:
  std::vector<double> nodes_;
};

/// Gaussian increments per path and interval; path p uses stream p of the
/// key derived from the seed.
struct BrownianEnsemble {
  TimeGrid grid;
  Index n_paths = 0;
  Index dim = 1;
  std::uint64_t seed = 0;
  std::vector<Matrix> increments;  // one n_paths x dim block per interval

  /// B at node i (B_{t_0} = 0), n_paths x dim.
  Matrix position(std::size_t node) const;
};

BrownianEnsemble sample_brownian(const TimeGrid& grid, Index d, Index n_paths, std::uint64_t seed);

/// Forward state on the grid together with its one-step transition, which
/// the nested Monte Carlo mode uses to resimulate from a node.
struct ForwardEnsemble {
  using Step = std::function<Vector(double t, const Vector& x, const Vector& dB, double dt)>;
  std::vector<Matrix> values;  // n_paths x state_dim per node
  Step step;

  Index n_paths() const { return values.front().rows(); }
  Index state_dim() const { return values.front().cols(); }
  Matrix path(Index p) const;
};

/// The Brownian motion itself as forward process.
ForwardEnsemble brownian_forward(const BrownianEnsemble& brownian);

/// Euler-Maruyama for dX = b(t, X) dt + sigma(t, X) dB started at x0.
ForwardEnsemble euler_maruyama(
    const std::function<Vector(double, const Vector&)>& drift,
    const std::function<Matrix(double, const Vector&)>& diffusion, const Vector& x0,
    const BrownianEnsemble& brownian);

enum class ExpectationMode { Regression, NestedMonteCarlo };

struct SolverOptions {
  ExpectationMode mode = ExpectationMode::Regression;
  int nested_inner_paths = 200;
  std::uint64_t nested_seed = 0x5EED;
  double inner_tolerance = 1e-12;
  int inner_max_iterations = 50;
};

struct SolverDiagnostics {
  int max_inner_iterations = 0;
  std::vector<double> regression_residual_rms;  // per interval
  Index basis_size = 0;
};

/// Per-path fields on the grid. y[i] is n x k; z[i] is n x (k d) holding
/// Z(r, c) at column r * d + c (z at the terminal node is zero); m[i] is the
/// accumulated stochastic integral sum_{j < i} Z_j dB_j.
struct BsdeSolution {
  TimeGrid grid;
  Index k = 1;
  Index d = 1;
  std::vector<Matrix> y;
  std::vector<Matrix> z;
  std::vector<Matrix> m;
  SolverDiagnostics diagnostics;

  Index n_paths() const { return y.front().rows(); }
  Matrix z_at(std::size_t node, Index path) const;
  /// Ensemble average of Y at the first node.
  Vector initial_value() const;

  bool operator==(const BsdeSolution& other) const;
};

/// Occupation time of each chain state on [t_i, t_{i+1}], as (state, time)
/// pairs with positive time.
std::vector<std::vector<std::pair<Index, double>>> interval_occupations(const TimeGrid& grid,
                                                                        const ChainPath& chain);

/// Reusable backward solver for one forward ensemble; the regression
/// projectors are factored once and shared by every solve.
class BsdeSolver {
public:
  BsdeSolver(ForwardEnsemble forward, BrownianEnsemble brownian, SolverOptions options = {});

  BsdeSolution solve(const Driver& driver, const TerminalCondition& xi, const ChainPath& chain) const;

  const TimeGrid& grid() const { return brownian_.grid; }
  const ForwardEnsemble& forward() const { return forward_; }
  const BrownianEnsemble& brownian() const { return brownian_; }
  const SolverOptions& options() const { return options_; }

  struct Projector;
  /// Applies the one-step map: given Y_{i+1} (and optionally frozen driver
  /// arguments) returns (Y_i, Z_i).
  void backward_step(std::size_t i, const Driver& driver,
                     const std::vector<std::pair<Index, double>>& occupation, const Matrix& y_next,
                     const Matrix* frozen_y, const Matrix* frozen_z, Matrix& y_out, Matrix& z_out,
                     int& inner_iterations, double& residual_rms) const;

  Matrix terminal_values(const TerminalCondition& xi) const;

private:
  ForwardEnsemble forward_;
  BrownianEnsemble brownian_;
  SolverOptions options_;
  std::vector<std::shared_ptr<const Projector>> projectors_;
};

/// Solves the BSDE with the Brownian motion as forward state.
BsdeSolution solve_backward(const Driver& driver, const TerminalCondition& xi, const TimeGrid& grid,
                            const BrownianEnsemble& brownian, const ChainPath& chain,
                            const SolverOptions& options = {});

/// Default weight for the Picard norm, 2 mu + 2 mu^2 + 1.
double default_picard_beta(double mu);

struct PicardReport {
  std::vector<double> differences;  // D_n = ||(Y,Z)_{n+1} - (Y,Z)_n||_beta
  std::vector<double> ratios;       // D_{n+1} / D_n
  int iterations = 0;
  bool converged = false;
  double beta = 0.0;
};

struct PicardResult {
  BsdeSolution solution;
  PicardReport report;
};

/// Iterates (y, z) -> (Y, Z) where (Y, Z) solves the BSDE whose driver is
/// frozen at (y, z), starting from zero.
PicardResult picard_solve(const Driver& driver, const TerminalCondition& xi, const TimeGrid& grid,
                          const BrownianEnsemble& brownian, const ChainPath& chain, double beta,
                          int max_iterations, double tolerance = 1e-8,
                          const SolverOptions& options = {});

/// beta-weighted distance (E sum_i dt_i e^{beta t_i} (|dY_i|^2 + |dZ_i|^2))^{1/2}.
double beta_norm_distance(const BsdeSolution& a, const BsdeSolution& b, double beta);

struct AprioriStats {
  Estimate sup_y2;    // E sup_t |Y_t|^2
  Estimate int_z2;    // E int_0^T |Z_t|^2 dt
  Estimate combined;  // E (sup_t |Y_t|^2 + int_0^T |Z_t|^2 dt)
};

AprioriStats a_priori_stats(const BsdeSolution& solution);

struct MartingaleReport {
  double residual_rms = 0.0;
  double max_abs_z_score = 0.0;
  std::vector<double> increment_basis_z;   // M increments against basis
  std::vector<double> residual_basis_z;    // residual against basis
  std::vector<double> residual_brownian_z; // residual times dB against basis
  bool passed = false;
};

/// Checks the discrete identity Y_i - Y_{i+1} - int f + Z_i dB_i ~ residual
/// and that martingale increments and residuals are orthogonal to the
/// regression basis (|z| <= threshold per basis function).
MartingaleReport martingale_residual_check(const BsdeSolution& solution, const Driver& driver,
                                           const ChainPath& chain, const ForwardEnsemble& forward,
                                           const BrownianEnsemble& brownian,
                                           double z_threshold = 4.0);

MartingaleReport martingale_residual_check(const BsdeSolution& solution, const Driver& driver,
                                           const ChainPath& chain, const BrownianEnsemble& brownian,
                                           double z_threshold = 4.0);

/// Standardized polynomial basis (degree 3 per coordinate, pairwise cross
/// terms) evaluated on an n x dim state sample; degenerate coordinates are
/// dropped. The intercept is not included.
Matrix polynomial_basis(const Matrix& state);

}  // namespace mmbsde
