#pragma once

// Continuous-time Markov chains: generator validation, exact path
// simulation, quasi-stationary distributions and two-time-scale aggregation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include "mmbsde/error.hpp"
#include "mmbsde/quadrature.hpp"
#include "mmbsde/random.hpp"

namespace mmbsde {

using Eigen::Index;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

inline constexpr double kGeneratorTolerance = 1e-9;

/// Transition-rate matrix of a finite continuous-time Markov chain. Only
/// obtainable through validate_generator(), so every instance satisfies
/// q_ij >= 0 (i != j) and q_ii = -sum_{j != i} q_ij.
template <typename Scalar = double>
class GeneratorMatrix {
public:
  using Matrix = MatrixX<Scalar>;

  Index size() const noexcept { return rates_.rows(); }
  const Matrix& rates() const noexcept { return rates_; }
  Scalar rate(Index i, Index j) const { return rates_(i, j); }
  Scalar exit_rate(Index i) const { return -rates_(i, i); }
  bool is_absorbing(Index i) const { return rates_(i, i) == Scalar(0); }
  const std::vector<std::string>& labels() const noexcept { return labels_; }

  template <typename Derived>
  friend GeneratorMatrix<typename Derived::Scalar> validate_generator(
      const Eigen::MatrixBase<Derived>& matrix, double tol, std::vector<std::string> labels);

private:
  GeneratorMatrix(Matrix rates, std::vector<std::string> labels)
      : rates_(std::move(rates)), labels_(std::move(labels)) {}

  Matrix rates_;
  std::vector<std::string> labels_;
};

/// Checks the generator axioms and returns a copy whose diagonal is
/// recomputed from the off-diagonal rates (tiny negative rates within `tol`
/// are clamped to zero).
template <typename Derived>
GeneratorMatrix<typename Derived::Scalar> validate_generator(
    const Eigen::MatrixBase<Derived>& matrix, double tol = kGeneratorTolerance,
    std::vector<std::string> labels = {}) {
  using Scalar = typename Derived::Scalar;
  const Index m = matrix.rows();
  if (m != matrix.cols()) throw Error(ErrorCode::NotSquare, "generator must be square");
  if (m < 1) throw Error(ErrorCode::InvalidArgument, "generator needs at least one state");
  if (!labels.empty() && static_cast<Index>(labels.size()) != m)
    throw Error(ErrorCode::DimensionMismatch, "label count differs from state count");
  MatrixX<Scalar> q = matrix;
  if (!q.allFinite()) throw Error(ErrorCode::InvalidArgument, "generator has non-finite entries");
  for (Index i = 0; i < m; ++i) {
    Scalar off = 0;
    for (Index j = 0; j < m; ++j) {
      if (i == j) continue;
      if (q(i, j) < -Scalar(tol))
        throw Error(ErrorCode::NegativeRate, "q(" + std::to_string(i) + "," + std::to_string(j) +
                                                 ") = " + std::to_string(double(q(i, j))));
      if (q(i, j) < 0) q(i, j) = 0;
      off += q(i, j);
    }
    const Scalar row_sum = q.row(i).sum();
    if (std::abs(row_sum) > Scalar(tol))
      throw Error(ErrorCode::RowSumViolation,
                  "row " + std::to_string(i) + " sums to " + std::to_string(double(row_sum)));
    q(i, i) = -off;
  }
  return GeneratorMatrix<Scalar>(std::move(q), std::move(labels));
}

/// Number of singular values above `rel_tol` times the largest one.
template <typename Derived>
Index numerical_rank(const Eigen::MatrixBase<Derived>& a, double rel_tol = 1e-10) {
  using Scalar = typename Derived::Scalar;
  Eigen::JacobiSVD<MatrixX<Scalar>> svd(a.derived());
  const auto& s = svd.singularValues();
  if (s.size() == 0 || s(0) == Scalar(0)) return 0;
  return (s.array() > Scalar(rel_tol) * s(0)).count();
}

/// Disjoint blocks M_1..M_l covering the state indices {0..m-1}.
class StatePartition {
public:
  StatePartition(Index m, std::vector<std::vector<Index>> blocks)
      : blocks_(std::move(blocks)), block_of_(static_cast<std::size_t>(m), -1),
        position_(static_cast<std::size_t>(m), -1) {
    if (m < 1) throw Error(ErrorCode::InvalidArgument, "partition of an empty state space");
    for (std::size_t k = 0; k < blocks_.size(); ++k) {
      if (blocks_[k].empty())
        throw Error(ErrorCode::InvalidArgument, "block " + std::to_string(k) + " is empty");
      for (std::size_t j = 0; j < blocks_[k].size(); ++j) {
        const Index s = blocks_[k][j];
        if (s < 0 || s >= m) throw Error(ErrorCode::UnknownState, "state " + std::to_string(s));
        auto& owner = block_of_[static_cast<std::size_t>(s)];
        if (owner != -1)
          throw Error(ErrorCode::InvalidArgument, "state " + std::to_string(s) + " in two blocks");
        owner = static_cast<Index>(k);
        position_[static_cast<std::size_t>(s)] = static_cast<Index>(j);
      }
    }
    for (Index s = 0; s < m; ++s)
      if (block_of_[static_cast<std::size_t>(s)] == -1)
        throw Error(ErrorCode::InvalidArgument, "state " + std::to_string(s) + " not covered");
  }

  static StatePartition singletons(Index m) {
    std::vector<std::vector<Index>> blocks;
    for (Index s = 0; s < m; ++s) blocks.push_back({s});
    return {m, std::move(blocks)};
  }

  static StatePartition single_block(Index m) {
    std::vector<Index> all(static_cast<std::size_t>(m));
    for (Index s = 0; s < m; ++s) all[static_cast<std::size_t>(s)] = s;
    return {m, {std::move(all)}};
  }

  Index state_count() const noexcept { return static_cast<Index>(block_of_.size()); }
  Index block_count() const noexcept { return static_cast<Index>(blocks_.size()); }
  const std::vector<Index>& block(Index k) const { return blocks_.at(static_cast<std::size_t>(k)); }
  Index block_size(Index k) const { return static_cast<Index>(block(k).size()); }
  const std::vector<std::vector<Index>>& blocks() const noexcept { return blocks_; }

  Index block_of(Index state) const {
    if (state < 0 || state >= state_count())
      throw Error(ErrorCode::UnknownState, "state " + std::to_string(state));
    return block_of_[static_cast<std::size_t>(state)];
  }

  Index position_in_block(Index state) const {
    block_of(state);
    return position_[static_cast<std::size_t>(state)];
  }

private:
  std::vector<std::vector<Index>> blocks_;
  std::vector<Index> block_of_;
  std::vector<Index> position_;
};

template <typename Scalar = double>
struct QuasiStationaryDistribution {
  VectorX<Scalar> nu;

  Index size() const noexcept { return nu.size(); }
  Scalar operator[](Index j) const { return nu(j); }
};

/// Unique nonnegative solution of nu Q = 0, sum(nu) = 1, obtained as the
/// least-squares solution of the stacked system [Q^T; 1^T] nu = [0; 1].
template <typename Scalar>
QuasiStationaryDistribution<Scalar> quasi_stationary(const GeneratorMatrix<Scalar>& generator) {
  const Index m = generator.size();
  const MatrixX<Scalar>& q = generator.rates();
  if (numerical_rank(q.transpose()) != m - 1)
    throw Error(ErrorCode::NotWeaklyIrreducible, "null space of Q^T is not one-dimensional");

  MatrixX<Scalar> stacked(m + 1, m);
  stacked.topRows(m) = q.transpose();
  stacked.row(m).setOnes();
  VectorX<Scalar> rhs = VectorX<Scalar>::Zero(m + 1);
  rhs(m) = 1;
  VectorX<Scalar> nu = stacked.colPivHouseholderQr().solve(rhs);

  if ((stacked * nu - rhs).template lpNorm<Eigen::Infinity>() > Scalar(1e-8))
    throw Error(ErrorCode::NotWeaklyIrreducible, "stationarity residual too large");
  if (nu.minCoeff() < Scalar(-1e-10))
    throw Error(ErrorCode::NotWeaklyIrreducible, "stationary solution has negative mass");
  nu = nu.cwiseMax(Scalar(0));
  nu /= nu.sum();
  return {std::move(nu)};
}

/// Q^eps = (1/eps) Q_fast + Q_slow with Q_fast block diagonal w.r.t. the
/// partition and each fast block weakly irreducible.
template <typename Scalar = double>
struct TwoScaleGenerator {
  GeneratorMatrix<Scalar> fast;
  GeneratorMatrix<Scalar> slow;
  Scalar epsilon;
  StatePartition partition;

  TwoScaleGenerator with_epsilon(Scalar eps) const {
    return make_two_scale(fast, slow, eps, partition);
  }

  template <typename S>
  friend TwoScaleGenerator<S> make_two_scale(GeneratorMatrix<S>, GeneratorMatrix<S>, S,
                                             StatePartition);

private:
  TwoScaleGenerator(GeneratorMatrix<Scalar> f, GeneratorMatrix<Scalar> s, Scalar eps,
                    StatePartition p)
      : fast(std::move(f)), slow(std::move(s)), epsilon(eps), partition(std::move(p)) {}
};

template <typename Scalar>
MatrixX<Scalar> block_of_matrix(const MatrixX<Scalar>& q, const std::vector<Index>& rows,
                                const std::vector<Index>& cols) {
  MatrixX<Scalar> out(static_cast<Index>(rows.size()), static_cast<Index>(cols.size()));
  for (std::size_t a = 0; a < rows.size(); ++a)
    for (std::size_t b = 0; b < cols.size(); ++b)
      out(static_cast<Index>(a), static_cast<Index>(b)) = q(rows[a], cols[b]);
  return out;
}

/// Lists every violated two-scale invariant; empty means valid.
template <typename Scalar>
std::vector<std::string> two_scale_violations(const GeneratorMatrix<Scalar>& fast,
                                              const GeneratorMatrix<Scalar>& slow, Scalar epsilon,
                                              const StatePartition& partition) {
  std::vector<std::string> issues;
  const Index m = fast.size();
  if (slow.size() != m || partition.state_count() != m) {
    issues.push_back("dimension mismatch between fast, slow and partition");
    return issues;
  }
  if (!(epsilon > Scalar(0))) issues.push_back("epsilon must be positive");
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < m; ++j)
      if (partition.block_of(i) != partition.block_of(j) && fast.rate(i, j) != Scalar(0))
        issues.push_back("fast generator couples states " + std::to_string(i) + " and " +
                         std::to_string(j) + " across blocks");
  for (Index k = 0; k < partition.block_count(); ++k) {
    const auto& states = partition.block(k);
    const MatrixX<Scalar> sub = block_of_matrix(fast.rates(), states, states);
    if (states.size() > 1) {
      for (Index s : states)
        if (fast.is_absorbing(s))
          issues.push_back("fast block " + std::to_string(k) + " has absorbing state " +
                           std::to_string(s));
    }
    try {
      quasi_stationary(validate_generator(sub));
    } catch (const Error& e) {
      issues.push_back("fast block " + std::to_string(k) + ": " + e.what());
    }
  }
  return issues;
}

template <typename Scalar>
TwoScaleGenerator<Scalar> make_two_scale(GeneratorMatrix<Scalar> fast, GeneratorMatrix<Scalar> slow,
                                         Scalar epsilon, StatePartition partition) {
  if (fast.size() != slow.size() || fast.size() != partition.state_count())
    throw Error(ErrorCode::DimensionMismatch, "fast, slow and partition sizes differ");
  auto issues = two_scale_violations(fast, slow, epsilon, partition);
  if (!issues.empty()) {
    const ErrorCode code = issues.front().find("NotWeaklyIrreducible") != std::string::npos
                               ? ErrorCode::NotWeaklyIrreducible
                               : ErrorCode::InvalidArgument;
    throw Error(code, issues.front());
  }
  return TwoScaleGenerator<Scalar>(std::move(fast), std::move(slow), epsilon, std::move(partition));
}

template <typename Scalar>
GeneratorMatrix<Scalar> compose(const TwoScaleGenerator<Scalar>& ts) {
  return validate_generator((ts.fast.rates() / ts.epsilon + ts.slow.rates()).eval());
}

/// Quasi-stationary distribution of every fast block, in block order.
template <typename Scalar>
std::vector<QuasiStationaryDistribution<Scalar>> block_quasi_stationary(
    const TwoScaleGenerator<Scalar>& ts) {
  std::vector<QuasiStationaryDistribution<Scalar>> nus;
  for (Index k = 0; k < ts.partition.block_count(); ++k) {
    const auto& states = ts.partition.block(k);
    nus.push_back(quasi_stationary(validate_generator(block_of_matrix(ts.fast.rates(), states, states))));
  }
  return nus;
}

struct DecompositionReport {
  bool passed = false;
  double max_residual = 0.0;
  std::vector<std::string> issues;
};

/// Checks that Q equals (1/eps) Q_fast + Q_slow within `tol` entrywise and
/// that the split still satisfies every two-scale invariant.
template <typename Scalar>
DecompositionReport verify_decomposition(const GeneratorMatrix<Scalar>& q,
                                         const TwoScaleGenerator<Scalar>& ts,
                                         double tol = kGeneratorTolerance) {
  if (q.size() != ts.fast.size())
    throw Error(ErrorCode::DimensionMismatch, "generator and decomposition sizes differ");
  DecompositionReport report;
  report.issues = two_scale_violations(ts.fast, ts.slow, ts.epsilon, ts.partition);
  const MatrixX<Scalar> composed = ts.fast.rates() / ts.epsilon + ts.slow.rates();
  report.max_residual = double((q.rates() - composed).cwiseAbs().maxCoeff());
  if (report.max_residual > tol)
    report.issues.push_back("max residual " + std::to_string(report.max_residual) +
                            " exceeds tolerance");
  report.passed = report.issues.empty();
  return report;
}

/// Generator of the aggregated chain:
/// Qbar = diag(nu^1..nu^l) Q_slow diag(1_{m_1}..1_{m_l}).
template <typename Scalar>
GeneratorMatrix<Scalar> aggregate_generator(const GeneratorMatrix<Scalar>& slow,
                                            const StatePartition& partition,
                                            const std::vector<QuasiStationaryDistribution<Scalar>>& nus) {
  const Index l = partition.block_count();
  if (slow.size() != partition.state_count() || static_cast<Index>(nus.size()) != l)
    throw Error(ErrorCode::DimensionMismatch, "aggregation inputs do not match the partition");
  for (Index k = 0; k < l; ++k)
    if (nus[static_cast<std::size_t>(k)].size() != partition.block_size(k))
      throw Error(ErrorCode::DimensionMismatch,
                  "quasi-stationary distribution " + std::to_string(k) + " has wrong length");
  MatrixX<Scalar> qbar = MatrixX<Scalar>::Zero(l, l);
  for (Index k = 0; k < l; ++k) {
    const auto& rows = partition.block(k);
    const auto& nu = nus[static_cast<std::size_t>(k)].nu;
    for (Index j = 0; j < l; ++j) {
      const auto& cols = partition.block(j);
      Scalar acc = 0;
      for (std::size_t a = 0; a < rows.size(); ++a) {
        Scalar row_mass = 0;
        for (Index c : cols) row_mass += slow.rate(rows[a], c);
        acc += nu(static_cast<Index>(a)) * row_mass;
      }
      qbar(k, j) = acc;
    }
  }
  return validate_generator(qbar);
}

/// exp(Q t), computed by Pade scaling-and-squaring.
template <typename Scalar>
MatrixX<Scalar> transition_matrix(const GeneratorMatrix<Scalar>& q, double t) {
  if (t < 0) throw Error(ErrorCode::InvalidArgument, "transition time must be nonnegative");
  if (t == 0) return MatrixX<Scalar>::Identity(q.size(), q.size());
  MatrixX<Scalar> scaled = q.rates() * Scalar(t);
  return scaled.exp();
}

/// Right-continuous piecewise-constant trajectory on [t0, T].
class ChainPath {
public:
  ChainPath(double t0, double horizon, Index initial_state, std::vector<double> jump_times = {},
            std::vector<Index> post_jump_states = {})
      : t0_(t0), horizon_(horizon), initial_(initial_state), jumps_(std::move(jump_times)),
        states_(std::move(post_jump_states)) {
    if (!(horizon_ > t0_)) throw Error(ErrorCode::InvalidArgument, "chain path needs T > t0");
    if (jumps_.size() != states_.size())
      throw Error(ErrorCode::DimensionMismatch, "jump times and states differ in length");
    Index prev = initial_;
    double last = t0_;
    for (std::size_t n = 0; n < jumps_.size(); ++n) {
      if (!(jumps_[n] > last) || jumps_[n] > horizon_)
        throw Error(ErrorCode::InvalidArgument, "jump times must increase inside (t0, T]");
      if (states_[n] == prev)
        throw Error(ErrorCode::InvalidArgument, "consecutive states must differ");
      last = jumps_[n];
      prev = states_[n];
    }
  }

  /// A path that never leaves `state`.
  static ChainPath constant(double t0, double horizon, Index state) {
    return {t0, horizon, state};
  }

  double start() const noexcept { return t0_; }
  double horizon() const noexcept { return horizon_; }
  Index initial_state() const noexcept { return initial_; }
  const std::vector<double>& jump_times() const noexcept { return jumps_; }
  const std::vector<Index>& post_jump_states() const noexcept { return states_; }
  std::size_t jump_count() const noexcept { return jumps_.size(); }

  Index state_at(double t) const {
    const auto it = std::upper_bound(jumps_.begin(), jumps_.end(), t);
    if (it == jumps_.begin()) return initial_;
    return states_[static_cast<std::size_t>(it - jumps_.begin()) - 1];
  }

  Index terminal_state() const { return states_.empty() ? initial_ : states_.back(); }

  /// Calls fn(lo, hi, state) for each maximal constant piece of [a, b].
  template <typename Fn>
  void for_each_segment(double a, double b, Fn&& fn) const {
    if (!(b > a)) return;
    auto it = std::upper_bound(jumps_.begin(), jumps_.end(), a);
    Index state = state_at(a);
    double lo = a;
    for (; it != jumps_.end() && *it < b; ++it) {
      fn(lo, *it, state);
      lo = *it;
      state = states_[static_cast<std::size_t>(it - jumps_.begin())];
    }
    fn(lo, b, state);
  }

  /// Time spent in each state over [a, b].
  std::vector<double> occupation_times(double a, double b, Index state_count) const {
    std::vector<double> occ(static_cast<std::size_t>(state_count), 0.0);
    for_each_segment(a, b, [&](double lo, double hi, Index s) {
      occ.at(static_cast<std::size_t>(s)) += hi - lo;
    });
    return occ;
  }

  /// The same trajectory viewed on the sub-window [a, b].
  ChainPath restrict(double a, double b) const {
    std::vector<double> times;
    std::vector<Index> states;
    for (std::size_t n = 0; n < jumps_.size(); ++n)
      if (jumps_[n] > a && jumps_[n] <= b) {
        times.push_back(jumps_[n]);
        states.push_back(states_[n]);
      }
    return {a, b, state_at(a), std::move(times), std::move(states)};
  }

  bool operator==(const ChainPath&) const = default;

private:
  double t0_;
  double horizon_;
  Index initial_;
  std::vector<double> jumps_;
  std::vector<Index> states_;
};

/// Exact event-driven sample: Exponential(-q_ii) holding times, then a jump
/// to j with probability q_ij / (-q_ii). Absorbing states are held until T.
template <typename Scalar>
ChainPath simulate_chain(const GeneratorMatrix<Scalar>& q, Index initial_state, double t0,
                         double horizon, RandomStream& rng,
                         std::size_t max_jumps = static_cast<std::size_t>(-1)) {
  if (initial_state < 0 || initial_state >= q.size())
    throw Error(ErrorCode::UnknownState, "initial state " + std::to_string(initial_state));
  if (!(horizon > t0)) throw Error(ErrorCode::InvalidArgument, "chain path needs T > t0");
  std::vector<double> times;
  std::vector<Index> states;
  Index state = initial_state;
  double t = t0;
  while (true) {
    const double rate = double(q.exit_rate(state));
    if (rate <= 0.0) break;
    t += rng.exponential(rate);
    if (t > horizon) break;
    double target = rng.uniform() * rate;
    Index next = -1;
    for (Index j = 0; j < q.size(); ++j) {
      if (j == state) continue;
      const double r = double(q.rate(state, j));
      if (r <= 0.0) continue;
      next = j;
      target -= r;
      if (target < 0.0) break;
    }
    if (times.size() >= max_jumps)
      throw Error(ErrorCode::JumpBudgetExceeded,
                  "chain path exceeded " + std::to_string(max_jumps) + " jumps");
    times.push_back(t);
    states.push_back(next);
    state = next;
  }
  return {t0, horizon, initial_state, std::move(times), std::move(states)};
}

/// n independent paths; path p uses stream p of `key`.
template <typename Scalar>
std::vector<ChainPath> simulate_chains(const GeneratorMatrix<Scalar>& q, Index initial_state,
                                       double t0, double horizon, std::size_t n, std::uint64_t key,
                                       std::size_t max_jumps = static_cast<std::size_t>(-1)) {
  std::vector<ChainPath> paths;
  paths.reserve(n);
  for (std::size_t p = 0; p < n; ++p) {
    RandomStream rng(key, p);
    paths.push_back(simulate_chain(q, initial_state, t0, horizon, rng, max_jumps));
  }
  return paths;
}

/// Maps a path onto block labels, erasing jumps that stay inside a block.
inline ChainPath aggregate_path(const ChainPath& path, const StatePartition& partition) {
  const Index initial = partition.block_of(path.initial_state());
  std::vector<double> times;
  std::vector<Index> blocks;
  Index current = initial;
  for (std::size_t n = 0; n < path.jump_count(); ++n) {
    const Index b = partition.block_of(path.post_jump_states()[n]);
    if (b != current) {
      times.push_back(path.jump_times()[n]);
      blocks.push_back(b);
      current = b;
    }
  }
  return {path.start(), path.horizon(), initial, std::move(times), std::move(blocks)};
}

struct Estimate {
  double mean = 0.0;
  double standard_error = 0.0;
};

/// Monte Carlo estimates of
///   E( int_s^T (1{alpha = s_kj} - nu^k_j 1{alphabar = k}) beta(t) dt )^2
/// for every block k and position j, indexed as estimates[k][j].
struct OccupationDeviation {
  std::vector<std::vector<Estimate>> estimates;
  std::size_t n_paths = 0;
};

template <typename Scalar>
OccupationDeviation occupation_deviation(const TwoScaleGenerator<Scalar>& ts,
                                         const std::function<double(double)>& beta, double start,
                                         double horizon, std::size_t n_paths, std::uint64_t seed,
                                         Index initial_state = 0) {
  if (n_paths < 100) throw Error(ErrorCode::InvalidArgument, "occupation_deviation needs >= 100 paths");
  const auto q = compose(ts);
  const auto nus = block_quasi_stationary(ts);
  const auto& partition = ts.partition;
  const Index l = partition.block_count();

  std::vector<std::vector<double>> sum(static_cast<std::size_t>(l)), sum_sq(static_cast<std::size_t>(l));
  for (Index k = 0; k < l; ++k) {
    sum[static_cast<std::size_t>(k)].assign(static_cast<std::size_t>(partition.block_size(k)), 0.0);
    sum_sq[static_cast<std::size_t>(k)] = sum[static_cast<std::size_t>(k)];
  }

  const std::uint64_t key = derive_key(seed, "occupation_deviation");
  std::vector<std::vector<double>> acc = sum;
  for (std::size_t p = 0; p < n_paths; ++p) {
    RandomStream rng(key, p);
    const ChainPath path = simulate_chain(q, initial_state, 0.0, horizon, rng);
    for (auto& block : acc) std::fill(block.begin(), block.end(), 0.0);
    path.for_each_segment(start, horizon, [&](double lo, double hi, Index s) {
      const double w = integrate_adaptive(beta, lo, hi);
      const Index k = partition.block_of(s);
      const Index pos = partition.position_in_block(s);
      auto& block = acc[static_cast<std::size_t>(k)];
      const auto& nu = nus[static_cast<std::size_t>(k)].nu;
      for (std::size_t j = 0; j < block.size(); ++j) {
        const double indicator = static_cast<Index>(j) == pos ? 1.0 : 0.0;
        block[j] += (indicator - double(nu(static_cast<Index>(j)))) * w;
      }
    });
    for (Index k = 0; k < l; ++k)
      for (std::size_t j = 0; j < acc[static_cast<std::size_t>(k)].size(); ++j) {
        const double sq = acc[static_cast<std::size_t>(k)][j] * acc[static_cast<std::size_t>(k)][j];
        sum[static_cast<std::size_t>(k)][j] += sq;
        sum_sq[static_cast<std::size_t>(k)][j] += sq * sq;
      }
  }

  OccupationDeviation out;
  out.n_paths = n_paths;
  const double n = static_cast<double>(n_paths);
  for (Index k = 0; k < l; ++k) {
    std::vector<Estimate> row;
    for (std::size_t j = 0; j < sum[static_cast<std::size_t>(k)].size(); ++j) {
      const double mean = sum[static_cast<std::size_t>(k)][j] / n;
      const double var = std::max(0.0, sum_sq[static_cast<std::size_t>(k)][j] / n - mean * mean);
      row.push_back({mean, std::sqrt(var * n / (n - 1.0) / n)});
    }
    out.estimates.push_back(std::move(row));
  }
  return out;
}

}  // namespace mmbsde
