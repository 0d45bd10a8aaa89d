#pragma once

// Regime-switching linear-quadratic control with a scalar Brownian motion:
//
//   dx = (A x + B v) dt + (C x + D v) dB,   x_0 = a,
//   J(v) = 1/2 E( int_0^T (x'R x + v'N v) dt + x_T' Q x_T ),
//
// all coefficients depending on t and the current chain regime.

#include <functional>
#include <vector>

#include "mmbsde/bsde.hpp"

namespace mmbsde {

/// sum_k coefficients[k] t^k.
struct MatrixPolynomial {
  std::vector<Matrix> coefficients;

  static MatrixPolynomial constant(const Matrix& m) { return {{m}}; }
  Matrix operator()(double t) const;
  Index rows() const { return coefficients.front().rows(); }
  Index cols() const { return coefficients.front().cols(); }
};

struct LqRegime {
  MatrixPolynomial a, b, c, d, r, n;
  Matrix q_terminal;
};

struct LqProblem {
  std::vector<LqRegime> regimes;
  Matrix generator;  // chain generator over the regimes
  double horizon = 1.0;
  Vector initial_state;
  Index initial_regime = 0;

  Index state_dim() const { return initial_state.size(); }
  Index control_dim() const { return regimes.front().n.rows(); }
  Index regime_count() const { return static_cast<Index>(regimes.size()); }
};

/// Checks shapes, symmetry and definiteness on a sample of times; returns the
/// smallest eigenvalue of N seen (the control-weight floor).
double validate_lq_problem(const LqProblem& problem);

using ControlLaw = std::function<Vector(double t, const Vector& x, Index regime)>;

ControlLaw zero_control(Index control_dim);

/// Riccati matrices P_i(t) on a uniform grid with the induced feedback.
class FeedbackSolution {
public:
  FeedbackSolution(LqProblem problem, std::vector<double> times,
                   std::vector<std::vector<Matrix>> values);

  /// P_i(t), linearly interpolated in t.
  Matrix value_matrix(double t, Index regime) const;
  /// K_i(t) = -(N + D'PD)^{-1}(B'P + D'PC), computed on the Riccati grid
  /// and interpolated linearly.
  Matrix gain(double t, Index regime) const;
  Vector control(double t, const Vector& x, Index regime) const;
  ControlLaw law() const;
  /// 1/2 a' P(0, alpha_0) a.
  double optimal_cost() const;

  /// Costate pair y = P x, z = P(C x + D u) along a state.
  Vector costate_y(double t, const Vector& x, Index regime) const;
  Vector costate_z(double t, const Vector& x, const Vector& u, Index regime) const;

  /// Copy with every P_i(t) multiplied by `factor`.
  FeedbackSolution scaled(double factor) const;

  const LqProblem& problem() const { return problem_; }
  const std::vector<double>& times() const { return times_; }
  const std::vector<std::vector<Matrix>>& values() const { return values_; }

private:
  LqProblem problem_;
  std::vector<double> times_;
  std::vector<std::vector<Matrix>> values_;  // [node][regime]
  std::vector<std::vector<Matrix>> gains_;
};

struct RiccatiOptions {
  std::size_t steps = 2000;
  double blowup_norm = 1e8;
};

/// Integrates the coupled Riccati system backward from P_i(T) = Q_i with
/// classical RK4.
FeedbackSolution solve_optimal(const LqProblem& problem, const RiccatiOptions& options = {});

struct LqTrajectories {
  std::vector<Matrix> x;        // n_paths x state_dim per node
  std::vector<Matrix> u;        // n_paths x control_dim per node
  std::vector<double> cost;     // per path
  std::vector<std::vector<Index>> regime;  // [node][path]
};

/// Euler-Maruyama on the Brownian grid. `chains` holds one path per Brownian
/// path, or a single path shared by all.
LqTrajectories simulate_lq(const LqProblem& problem, const ControlLaw& law,
                           const std::vector<ChainPath>& chains, const BrownianEnsemble& brownian);

/// Mean and standard error of J over the ensemble (trapezoidal running cost).
Estimate evaluate_cost(const LqProblem& problem, const ControlLaw& law,
                       const std::vector<ChainPath>& chains, const BrownianEnsemble& brownian);
Estimate evaluate_cost(const LqProblem& problem, const ControlLaw& law, const ChainPath& chain,
                       const BrownianEnsemble& brownian);

struct OptimalityOptions {
  int n_perturbations = 100;
  std::vector<double> deltas = {0.5, 1.0};
  /// Perturbations are constant on this many equal pieces of [0, T].
  int pieces = 4;
  std::uint64_t seed = 1;
  double z_threshold = 3.0;
  double absolute_tolerance = 1e-9;
  bool throw_on_violation = true;
};

struct PerturbationResult {
  int perturbation = 0;
  double delta = 0.0;
  Estimate cost_increase;  // J(u + delta v) - J(u), common random numbers
  /// (J(u + delta v) + J(u - delta v)) / 2 - J(u): the second-order part of
  /// the increase, free of the first-order discretization residue.
  Estimate curvature;
  double convexity_bound = 0.0;  // (delta^2 / 2) delta_N int |v|^2 dt
  bool dominance = false;
  bool convexity = false;
};

struct OptimalityReport {
  Estimate optimal_cost;
  double control_floor = 0.0;
  std::vector<PerturbationResult> perturbations;
  int dominance_passed = 0;
  int convexity_passed = 0;
  Estimate stationarity;  // worst |E int (y'B + z'D + u'N) v dt| over perturbations
  double stationarity_z = 0.0;
  bool dominance_ok = false;
  bool stationarity_ok = false;
  bool convexity_ok = false;
  bool passed = false;
};

/// Piecewise-constant perturbation with i.i.d. Uniform[-1, 1] entries.
std::function<Vector(double)> random_perturbation(Index control_dim, double horizon, int pieces,
                                                  std::uint64_t key, std::uint64_t index);

/// Perturbations shift the candidate's realized control process by delta v
/// (open loop), so the control difference is exactly delta v.
OptimalityReport verify_optimality(const LqProblem& problem, const FeedbackSolution& feedback,
                                   const std::vector<ChainPath>& chains,
                                   const BrownianEnsemble& brownian,
                                   const OptimalityOptions& options = {});

}  // namespace mmbsde
