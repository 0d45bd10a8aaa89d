#include <doctest.h>

#include <cmath>

#include "mmbsde/pde.hpp"
#include "mmbsde/random.hpp"
#include "mmbsde/stats.hpp"
#include "test_support.hpp"

using namespace mmbsde;
using testing::example_two_scale;

namespace {

Vector scalar(double v) { return Vector::Constant(1, v); }

// Heat equation with sigma, bump h = exp(-x^2 / (2 s^2)):
// u(t, x) = s / sqrt(s^2 + sigma^2 tau) exp(-x^2 / (2 (s^2 + sigma^2 tau))).
double heat_bump(double s, double sigma, double tau, double x) {
  const double v = s * s + sigma * sigma * tau;
  return s / std::sqrt(v) * std::exp(-x * x / (2 * v));
}

PdeProblem bump_problem(Index space_points, std::size_t steps) {
  auto p = heat_problem(1.0, [](double x) { return scalar(std::exp(-x * x / 2)); });
  p.x_lo = -8;
  p.x_hi = 8;
  p.space_points = space_points;
  p.time_steps = steps;
  return p;
}

double bump_error(const PdeProblem& p) {
  const auto sol = solve_pde(p, ChainPath::constant(0, 1, 0));
  double worst = 0.0;
  for (std::size_t i = 0; i < sol.times.size(); ++i)
    for (std::size_t j = 0; j < sol.xs.size(); ++j)
      worst = std::max(worst, std::abs(sol.u[i](static_cast<Index>(j), 0) -
                                       heat_bump(1.0, 1.0, 1.0 - sol.times[i], sol.xs[j])));
  return worst;
}

double occupation_integral(const ChainPath& path, double a, double b, const Vector& c) {
  double sum = 0.0;
  path.for_each_segment(a, b, [&](double lo, double hi, Index s) { sum += (hi - lo) * c(s); });
  return sum;
}

ChainPath fixed_chain() { return ChainPath(0.0, 1.0, 0, {0.137, 0.4, 0.71}, {2, 1, 0}); }

PdeProblem linear_problem(const Vector& c) {
  auto p = heat_problem(0.8, [](double) { return scalar(1.0); });
  p.reaction = linear_reaction(c);
  p.reaction_lipschitz = c.cwiseAbs().maxCoeff();
  p.x_lo = -4;
  p.x_hi = 4;
  p.space_points = 81;
  p.time_steps = 100;
  return p;
}

}  // namespace

TEST_CASE("Linear terminal data is invariant") {
  auto p = heat_problem(1.3, [](double x) { return scalar(x); });
  p.x_lo = -3;
  p.x_hi = 5;
  p.space_points = 101;
  p.time_steps = 50;
  const auto sol = solve_pde(p, ChainPath::constant(0, 1, 0));
  for (const auto& level : sol.u)
    for (std::size_t j = 0; j < sol.xs.size(); ++j) CHECK(level(static_cast<Index>(j), 0) == doctest::Approx(sol.xs[j]).epsilon(1e-12));
  CHECK(sol.value(0.0, 0.3)(0) == doctest::Approx(0.3));
  CHECK(sol.gradient(0.5, 1.1)(0) == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("Terminal level equals h exactly") {
  const auto p = bump_problem(101, 20);
  const auto sol = solve_pde(p, ChainPath::constant(0, 1, 0));
  for (std::size_t j = 0; j < sol.xs.size(); ++j) CHECK(sol.u.back()(static_cast<Index>(j), 0) == p.terminal(sol.xs[j])(0));
}

TEST_CASE("Heat equation with a Gaussian bump") {
  CHECK(bump_error(bump_problem(400, 400)) < 1e-3);

  // Second order in space and time: halving both cuts the error by 4.
  const double coarse = bump_error(bump_problem(101, 25));
  const double fine = bump_error(bump_problem(201, 50));
  CHECK(coarse / fine >= 3.0);

  // Discrete maximum principle.
  const auto sol = solve_pde(bump_problem(201, 50), ChainPath::constant(0, 1, 0));
  for (const auto& level : sol.u) {
    CHECK(level.minCoeff() >= 0.0 - 1e-14);
    CHECK(level.maxCoeff() <= 1.0 + 1e-14);
  }
}

TEST_CASE("Linear reaction: u = exp(int_t^T c) and constant in space") {
  const Vector c = (Vector(3) << 0.7, -0.4, 1.1).finished();
  const auto p = linear_problem(c);
  const ChainPath chain = fixed_chain();
  const auto sol = solve_pde(p, chain);
  for (double tau : chain.jump_times()) CHECK_NOTHROW(sol.level_at(tau));
  double worst = 0.0;
  for (std::size_t i = 0; i < sol.times.size(); ++i) {
    const Matrix& level = sol.u[i];
    CHECK((level.array() == level(0, 0)).all());
    worst = std::max(worst, std::abs(level(0, 0) - std::exp(occupation_integral(chain, sol.times[i], 1.0, c))));
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("Constants are preserved with drift and variable sigma") {
  auto p = linear_problem((Vector(3) << 0.2, 0.2, 0.2).finished());
  p.drift = [](double x) { return std::sin(x); };
  p.sigma = [](double x) { return 1.0 + 0.3 * std::cos(x); };
  const auto sol = solve_pde(p, fixed_chain());
  for (const auto& level : sol.u) CHECK((level.array() == level(0, 0)).all());
  CHECK(sol.u.front()(0, 0) == doctest::Approx(std::exp(0.2)).epsilon(1e-12));
}

TEST_CASE("Extra grid points where the chain does not jump change nothing") {
  const Vector c = (Vector(3) << 0.7, -0.4, 1.1).finished();
  const auto p = linear_problem(c);
  const ChainPath chain = fixed_chain();
  const auto base_grid = jump_aligned_grid(0.0, 1.0, p.time_steps, chain);
  auto refined = base_grid;
  for (double t : {0.0333, 0.25501, 0.6013, 0.9044}) refined.push_back(t);
  std::sort(refined.begin(), refined.end());
  const auto a = solve_pde(p, chain, base_grid);
  const auto b = solve_pde(p, chain, refined);
  for (std::size_t i = 0; i < a.times.size(); ++i)
    CHECK((a.u[i] - b.u[b.level_at(a.times[i])]).cwiseAbs().maxCoeff() < 1e-12);

  auto straddling = base_grid;
  straddling.erase(std::find(straddling.begin(), straddling.end(), 0.4));
  CHECK_THROWS_AS(solve_pde(p, chain, straddling), Error);
}

TEST_CASE("Two-component system decouples") {
  auto p = heat_problem(1.0, [](double x) { return Vector((Vector(2) << std::exp(-x * x / 2), 1.0).finished()); }, 2);
  p.x_lo = -8;
  p.x_hi = 8;
  p.space_points = 201;
  p.time_steps = 50;
  const auto sol = solve_pde(p, ChainPath::constant(0, 1, 0));
  CHECK(sol.value(0.0, 0.5)(0) == doctest::Approx(heat_bump(1, 1, 1, 0.5)).epsilon(1e-3));
  CHECK(sol.value(0.0, 0.5)(1) == 1.0);
}

TEST_CASE("Solver preconditions") {
  auto p = linear_problem((Vector(3) << 0.7, -0.4, 60.0).finished());
  try {
    solve_pde(p, fixed_chain());
    FAIL("expected CflViolation");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::CflViolation);
  }
  auto flat = heat_problem(0.0, [](double) { return scalar(1.0); });
  try {
    solve_pde(flat, ChainPath::constant(0, 1, 0));
    FAIL("expected NonEllipticSigma");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NonEllipticSigma);
  }
  auto bad = heat_problem(1.0, [](double) { return scalar(1.0); });
  bad.sigma = [](double x) { return x; };
  CHECK_THROWS_AS(solve_pde(bad, ChainPath::constant(0, 1, 0)), Error);
  CHECK_THROWS_AS(solve_pde(heat_problem(1.0, [](double) { return scalar(1.0); }), ChainPath::constant(0, 0.5, 0)),
                  Error);
}

TEST_CASE("Feynman-Kac: linear terminal data") {
  auto p = heat_problem(1.0, [](double x) { return scalar(x); });
  p.x_lo = -6;
  p.x_hi = 6;
  p.space_points = 121;
  p.time_steps = 50;
  const std::vector<ProbePoint> probes = {{0.0, -1.0}, {0.5, 0.3}, {0.2, 2.0}};
  const auto report = feynman_kac_check(p, ChainPath::constant(0, 1, 0), probes, 2000, 3);
  CHECK(report.values_ok);
  CHECK(report.gradients_ok);
  for (const auto& probe : report.probes) {
    CHECK(probe.bsde(0) == doctest::Approx(probe.probe.x).epsilon(0.05));
    CHECK(probe.bsde_z(0) == doctest::Approx(1.0).epsilon(0.05));
    CHECK(probe.pde_gradient(0) == doctest::Approx(1.0).epsilon(1e-10));
  }
  CHECK(report.growth_ratio <= 1.0 + 1e-12 + 1.0);
}

TEST_CASE("Feynman-Kac and gradient identity: heat bump and linear reaction") {
  const std::vector<ProbePoint> probes = {{0.0, -1.5}, {0.0, 0.6}, {0.25, 1.2}, {0.5, -0.8}, {0.75, 1.6}};

  auto heat = bump_problem(321, 200);
  const auto heat_report = feynman_kac_check(heat, ChainPath::constant(0, 1, 0), probes, 10000, 7);
  CHECK(heat_report.values_ok);
  CHECK(heat_report.gradients_ok);
  for (const auto& probe : heat_report.probes) {
    const double tau = 1.0 - probe.probe.t;
    const double exact = heat_bump(1, 1, tau, probe.probe.x);
    CHECK(probe.pde(0) == doctest::Approx(exact).epsilon(1e-3));
    CHECK(probe.pde_gradient(0) == doctest::Approx(-probe.probe.x / (1 + tau) * exact).epsilon(1e-2));
  }

  const Vector c = (Vector(3) << 0.7, -0.4, 1.1).finished();
  auto reaction = bump_problem(321, 200);
  reaction.reaction = linear_reaction(c);
  reaction.reaction_lipschitz = 1.1;
  const auto report = feynman_kac_check(reaction, fixed_chain(), probes, 10000, 8);
  CHECK(report.values_ok);
  CHECK(report.gradients_ok);
  CHECK(std::isfinite(report.growth_ratio));

  // Corrupted PDE output must be rejected.
  auto corrupted = solve_pde(reaction, fixed_chain());
  for (auto& level : corrupted.u) level *= 1.1;
  CHECK_FALSE(feynman_kac_check(reaction, corrupted, probes, 10000, 8).values_ok);
}

TEST_CASE("Feynman-Kac: space-constant solution has zero gradient") {
  const Vector c = (Vector(3) << 0.7, -0.4, 1.1).finished();
  const auto p = linear_problem(c);
  const std::vector<ProbePoint> probes = {{0.0, 0.0}, {0.3, 1.0}};
  const auto report = gradient_identity_check(p, fixed_chain(), probes, 1000, 4);
  CHECK(report.values_ok);
  CHECK(report.gradients_ok);
  for (const auto& probe : report.probes) {
    CHECK(probe.pde_gradient(0) == 0.0);
    CHECK(std::abs(probe.bsde_z(0)) < 1e-10);
    CHECK(probe.bsde(0) == doctest::Approx(probe.pde(0)).epsilon(1e-2));
  }
  CHECK_THROWS_AS(feynman_kac_check(p, fixed_chain(), {{0.0, 3.9}}, 100, 1), Error);
}

TEST_CASE("PDE homogenization sweep") {
  const Vector c = (Vector(3) << 1.0, 0.5, -1.0).finished();
  auto p = linear_problem(c);
  p.space_points = 21;
  p.time_steps = 20;
  const std::vector<ProbePoint> probes = {{0.0, 0.0}, {0.5, 1.0}};
  PdeSweepOptions opts;
  opts.keep_chain_paths = true;
  const auto report = pde_homogenization_sweep(p, example_two_scale(), {0.2, 0.05, 0.0125}, 600, probes, 3, opts);

  const Vector c_bar = (Vector(2) << 2.0 / 3.0 * 1.0 + 1.0 / 3.0 * 0.5, -1.0).finished();
  double worst = 0.0;
  for (std::size_t q = 0; q < probes.size(); ++q)
    for (std::size_t n = 0; n < report.limit_chains.size(); ++n) {
      const double exact = std::exp(occupation_integral(report.limit_chains[n], probes[q].t, 1.0, c_bar));
      worst = std::max(worst, std::abs(report.limit_samples(static_cast<Index>(n), static_cast<Index>(q)) - exact) / exact);
    }
  for (const auto& level : report.levels)
    for (std::size_t q = 0; q < probes.size(); ++q)
      for (std::size_t n = 0; n < level.chains.size(); ++n) {
        const double exact = std::exp(occupation_integral(level.chains[n], probes[q].t, 1.0, c));
        worst = std::max(worst, std::abs(level.samples(static_cast<Index>(n), static_cast<Index>(q)) - exact) / exact);
      }
  CHECK(worst < 1e-8);
  for (std::size_t q = 0; q < probes.size(); ++q)
    CHECK(report.levels.back().ks[q] <= report.levels.front().ks[q] + 3 * report.ks_noise_floor);

  // State-independent reaction: the chain is irrelevant. Averaging may move
  // the last bits and grids differ per path, so ties are compared through W1
  // rather than KS.
  auto flat = linear_problem((Vector(3) << 0.3, 0.3, 0.3).finished());
  flat.space_points = 11;
  flat.time_steps = 10;
  const auto flat_report = pde_homogenization_sweep(flat, example_two_scale(), {0.2, 0.05}, 200, probes, 4);
  for (const auto& level : flat_report.levels)
    for (double w : level.wasserstein) CHECK(w < 1e-9);

  auto gradient = p;
  gradient.reaction_uses_gradient = true;
  CHECK_THROWS_AS(pde_homogenization_sweep(gradient, example_two_scale(), {0.1}, 10, probes, 1), Error);
}

TEST_CASE("Sweep at one level equals direct solves") {
  const Vector c = (Vector(3) << 1.0, 0.5, -1.0).finished();
  auto p = linear_problem(c);
  p.space_points = 21;
  p.time_steps = 20;
  const std::vector<ProbePoint> probes = {{0.0, 0.5}};
  PdeSweepOptions opts;
  opts.keep_chain_paths = true;
  const auto report = pde_homogenization_sweep(p, example_two_scale(), {0.1}, 50, probes, 12, opts);
  for (std::size_t n = 0; n < 50; ++n)
    CHECK(report.levels[0].samples(static_cast<Index>(n), 0) ==
          solve_pde(p, report.levels[0].chains[n]).value(0.0, 0.5)(0));
}
