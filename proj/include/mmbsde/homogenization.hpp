#pragma once

// Epsilon sweeps for BSDEs driven by a singularly perturbed chain: the law of
// Y_0^eps, taken over chain paths, against the law of Y_0 for the limit
// equation with the aggregated chain and the averaged driver.

#include <vector>

#include "mmbsde/bsde.hpp"

namespace mmbsde {

struct AveragedDriver {
  Driver base;
  StatePartition partition;
  std::vector<Vector> nus;  // one weight vector per block
  Driver averaged;          // over block labels 0..l-1
};

/// fbar(t, x, y, z, k) = sum_j nu^k_j f(t, x, y, z, s_kj). Requires a
/// z-independent driver.
AveragedDriver build_averaged_driver(const Driver& f, const StatePartition& partition,
                                     const std::vector<QuasiStationaryDistribution<double>>& nus);

struct SweepOptions {
  Index n_brownian = 32;   // Brownian paths shared by every chain-path solve
  Index initial_state = 0;
  double max_expected_jumps = 1e6;
  bool keep_chain_paths = false;
  SolverOptions solver;
};

struct EpsilonResult {
  double epsilon = 0.0;
  Matrix y0;                        // n_paths x k, one row per chain path
  AprioriStats a_priori;            // over chain and Brownian paths
  std::vector<double> ks;           // per component, against the limit sample
  std::vector<double> wasserstein;  // per component
  double mean_jumps = 0.0;
  double seconds = 0.0;
  std::vector<ChainPath> chains;    // only with keep_chain_paths
};

struct EpsilonSweepReport {
  std::vector<EpsilonResult> levels;
  Matrix limit_y0;
  AprioriStats limit_a_priori;
  std::vector<ChainPath> limit_chains;
  double limit_seconds = 0.0;
  Index n_paths = 0;
  double ks_noise_floor = 0.0;
};

/// Per epsilon, chain path p uses stream p of derive_key(seed, "sweep_chain",
/// level); the limit chains use derive_key(seed, "limit_chain"). The
/// Brownian ensemble is derive_key(seed, "brownian")-based and shared by all
/// levels.
EpsilonSweepReport epsilon_sweep(const TwoScaleGenerator<double>& two_scale, const Driver& driver,
                                 const TerminalCondition& xi, const TimeGrid& grid,
                                 const std::vector<double>& epsilons, Index n_paths,
                                 std::uint64_t seed, const SweepOptions& options = {});

struct BoundCheck {
  std::vector<double> values;  // E(sup |Y|^2 + int |Z|^2) per level
  double ratio = 0.0;          // max / min
  double factor = 1.5;
  bool passed = false;
};

BoundCheck uniform_bound_check(const EpsilonSweepReport& report, double factor = 1.5);

/// Per-component KS and W1 distances between two samples (rows are draws).
void sample_distances(const Matrix& a, const Matrix& b, std::vector<double>& ks,
                      std::vector<double>& wasserstein);

}  // namespace mmbsde
