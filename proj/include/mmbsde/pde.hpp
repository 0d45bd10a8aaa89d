#pragma once

// One-dimensional semilinear parabolic systems with a chain-modulated
// reaction term, solved backward from t = T for one chain path:
//
//   -du/dt = 1/2 sigma(x)^2 u_xx + b(x) u_x + f(t, x, u, u_x sigma, alpha_t),
//   u(T, x) = h(x),
//
// on a truncated interval [x_lo, x_hi].

#include <functional>
#include <vector>

#include "mmbsde/bsde.hpp"
#include "mmbsde/homogenization.hpp"

namespace mmbsde {

struct PdeProblem {
  using Coefficient = std::function<double(double x)>;
  using Terminal = std::function<Vector(double x)>;
  /// (t, x, u, u_x sigma, state) -> k-vector.
  using Reaction = std::function<Vector(double t, double x, const Vector& u, const Vector& grad_sigma, Index state)>;

  Coefficient drift;
  Coefficient sigma;
  Terminal terminal;
  Reaction reaction;
  Index dim = 1;
  double reaction_lipschitz = 0.0;
  bool reaction_uses_gradient = false;
  double horizon = 1.0;
  double x_lo = -1.0;
  double x_hi = 1.0;
  Index space_points = 201;
  std::size_t time_steps = 200;
  double sigma_min = 1e-8;
};

/// b = 0 and constant sigma.
PdeProblem heat_problem(double sigma, PdeProblem::Terminal terminal, Index dim = 1);
/// f(t, x, u, g, i) = c_i u.
PdeProblem::Reaction linear_reaction(const Vector& c);

struct PdeSolution {
  std::vector<double> times;  // increasing, last = T
  std::vector<double> xs;
  std::vector<Matrix> u;      // per time level, space_points x k
  ChainPath chain;

  Index dim() const { return u.front().cols(); }
  std::size_t level_at(double t) const;  // exact time level, throws if absent
  /// Linear interpolation in x (and in t between levels).
  Vector value(double t, double x) const;
  /// Central-difference u_x, interpolated linearly in x.
  Vector gradient(double t, double x) const;
};

/// Strang splitting per step: half reaction step (RK4, gradient argument
/// frozen), Crank-Nicolson step for the linear part with Dirichlet
/// boundaries, half reaction step. Steps are split at chain jumps.
PdeSolution solve_pde(const PdeProblem& problem, const ChainPath& chain);
/// Same on a caller-supplied time grid, which must contain every jump time.
PdeSolution solve_pde(const PdeProblem& problem, const ChainPath& chain, std::vector<double> times);

/// Base uniform grid merged with the chain's jump times in (0, T).
std::vector<double> jump_aligned_grid(double t0, double horizon, std::size_t steps, const ChainPath& chain);

struct ProbePoint {
  double t = 0.0;
  double x = 0.0;
};

struct FeynmanKacOptions {
  std::size_t steps = 100;        // Euler steps from t to T
  double relative_allowance = 2e-2;
  double z_threshold = 3.0;
  double gradient_tolerance = 0.1;     // relative
  double gradient_absolute = 5e-3;
  SolverOptions solver;
};

struct ProbeComparison {
  ProbePoint probe;
  Vector pde;           // u(t, x)
  Vector bsde;          // Y_t^{t,x}
  Vector standard_error;
  Vector pde_gradient;  // u_x(t, x) sigma(x)
  Vector bsde_z;        // Z_t^{t,x}
  bool value_ok = false;
  bool gradient_ok = false;
};

struct FeynmanKacReport {
  std::vector<ProbeComparison> probes;
  double growth_ratio = 0.0;  // max (|u| + |u_x sigma|) / (1 + |x|) over the grid
  bool values_ok = false;
  bool gradients_ok = false;
};

/// Compares solve_pde with the FBSDE estimate at each probe; `solution`
/// must come from the same problem and chain.
FeynmanKacReport feynman_kac_check(const PdeProblem& problem, const PdeSolution& solution,
                                   const std::vector<ProbePoint>& probes, Index n_mc, std::uint64_t seed,
                                   const FeynmanKacOptions& options = {});

/// Solves the PDE for `chain` first.
FeynmanKacReport feynman_kac_check(const PdeProblem& problem, const ChainPath& chain,
                                   const std::vector<ProbePoint>& probes, Index n_mc, std::uint64_t seed,
                                   const FeynmanKacOptions& options = {});

/// Gradient identity and growth diagnostic, reusing a Feynman-Kac run.
FeynmanKacReport gradient_identity_check(const PdeProblem& problem, const ChainPath& chain,
                                         const std::vector<ProbePoint>& probes, Index n_mc,
                                         std::uint64_t seed, const FeynmanKacOptions& options = {});

double growth_ratio(const PdeProblem& problem, const PdeSolution& solution);

struct PdeSweepLevel {
  double epsilon = 0.0;
  Matrix samples;                       // n_paths x (probes * k)
  std::vector<double> ks;               // per probe and component
  std::vector<double> wasserstein;
  double seconds = 0.0;
  std::vector<ChainPath> chains;        // only with keep_chain_paths
};

struct PdeSweepReport {
  std::vector<PdeSweepLevel> levels;
  Matrix limit_samples;
  std::vector<ChainPath> limit_chains;
  double ks_noise_floor = 0.0;
  double limit_seconds = 0.0;
};

struct PdeSweepOptions {
  Index initial_state = 0;
  double max_expected_jumps = 1e6;
  bool keep_chain_paths = false;
};

/// Chains per level use derive_key(seed, "pde_chain", level); the limit uses
/// derive_key(seed, "pde_limit_chain") with the averaged reaction.
PdeSweepReport pde_homogenization_sweep(const PdeProblem& problem, const TwoScaleGenerator<double>& two_scale,
                                        const std::vector<double>& epsilons, Index n_chain_paths,
                                        const std::vector<ProbePoint>& probes, std::uint64_t seed,
                                        const PdeSweepOptions& options = {});

}  // namespace mmbsde
