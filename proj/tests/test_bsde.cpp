#include <doctest.h>

#include <cmath>
#include <numbers>

#include "mmbsde/bsde.hpp"
#include "test_support.hpp"

using namespace mmbsde;

namespace {

constexpr double kCatalan = 0.915965594177219015;

Vector scalar(double v) { return Vector::Constant(1, v); }

ChainPath fixed_chain() { return ChainPath(0.0, 1.0, 0, {0.13, 0.41, 0.77}, {2, 1, 0}); }

}  // namespace

TEST_CASE("TimeGrid validation") {
  CHECK_THROWS_AS(TimeGrid({0.0}), Error);
  CHECK_THROWS_AS(TimeGrid({0.0, 0.5, 0.5}), Error);
  const auto g = TimeGrid::uniform(0.0, 2.0, 4);
  CHECK(g.steps() == 4);
  CHECK(g.step(3) == doctest::Approx(0.5));
  CHECK(g.horizon() == 2.0);
}

TEST_CASE("sample_brownian") {
  const auto one = sample_brownian(TimeGrid::uniform(0.0, 0.25, 1), 1, 1, 7);
  CHECK(one.increments.size() == 1);
  CHECK(one.increments[0].size() == 1);

  const auto grid = TimeGrid::uniform(0.0, 1.0, 4);
  CHECK(sample_brownian(grid, 2, 100, 3).increments == sample_brownian(grid, 2, 100, 3).increments);
  CHECK(sample_brownian(grid, 1, 100, 3).increments != sample_brownian(grid, 1, 100, 4).increments);

  const Index n = 100000;
  const auto big = sample_brownian(grid, 1, n, 12);
  const Matrix bt = big.position(4);
  CHECK(std::abs(bt.mean()) < 4.0 * std::sqrt(1.0 / n));
  for (const auto& inc : big.increments) {
    const double var = inc.squaredNorm() / n;
    // Var of the sample variance of N(0, 0.25) is 2 * 0.25^2 / n.
    CHECK(std::abs(var - 0.25) < 4.0 * std::sqrt(2.0 / n) * 0.25);
  }
  const auto two = sample_brownian(grid, 2, n, 5);
  const double cov = two.increments[1].col(0).dot(two.increments[1].col(1)) / n;
  CHECK(std::abs(cov) < 4.0 * 0.25 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("zero driver with constant terminal value is solved exactly") {
  const auto grid = TimeGrid::uniform(0.0, 1.0, 20);
  const auto bm = sample_brownian(grid, 2, 500, 1);
  const auto sol = solve_backward(zero_driver(2), constant_terminal(Vector::Constant(2, 1.5)), grid, bm,
                                  fixed_chain());
  for (std::size_t i = 0; i <= grid.steps(); ++i) {
    CHECK((sol.y[i].array() == 1.5).all());
    CHECK((sol.z[i].array() == 0.0).all());
    CHECK((sol.m[i].array() == 0.0).all());
  }
  const auto stats = a_priori_stats(sol);
  CHECK(stats.sup_y2.mean == doctest::Approx(2 * 1.5 * 1.5).epsilon(1e-14));
  CHECK(stats.int_z2.mean == 0.0);

  const auto report = martingale_residual_check(sol, zero_driver(2), fixed_chain(), bm);
  CHECK(report.residual_rms == 0.0);
  CHECK(report.max_abs_z_score == 0.0);
  CHECK(report.passed);
}

TEST_CASE("state-dependent constant driver integrates the chain occupation exactly") {
  const auto chain = fixed_chain();
  const Eigen::RowVector3d a(1.0, -2.0, 0.5);
  const double c = 0.3;
  const auto grid = TimeGrid::uniform(0.0, 1.0, 50);
  const auto bm = sample_brownian(grid, 1, 200, 2);
  const auto sol = solve_backward(constant_per_state_driver(a), constant_terminal(scalar(c)), grid, bm, chain);
  for (std::size_t i = 0; i <= grid.steps(); ++i) {
    const auto occ = chain.occupation_times(grid.node(i), 1.0, 3);
    double exact = c;
    for (Index s = 0; s < 3; ++s) exact += a(s) * occ[static_cast<std::size_t>(s)];
    CHECK((sol.y[i].array() - exact).abs().maxCoeff() < 1e-12);
    CHECK(sol.z[i].cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("linear driver matches the exponential and converges at first order") {
  const double lambda = 1.0, c = 1.0;
  const auto chain = ChainPath::constant(0.0, 1.0, 0);
  auto error_at = [&](std::size_t steps) {
    const auto grid = TimeGrid::uniform(0.0, 1.0, steps);
    const auto bm = sample_brownian(grid, 1, 64, 3);
    const auto sol = solve_backward(linear_driver(lambda), constant_terminal(scalar(c)), grid, bm, chain);
    return std::abs(sol.initial_value()(0) - c * std::exp(lambda)) / std::exp(lambda);
  };
  const double e200 = error_at(200);
  CHECK(e200 < 0.02);
  for (std::size_t n : {25, 50, 100, 200}) {
    const double ratio = error_at(n) / error_at(2 * n);
    CHECK(ratio > 2.0 * 0.7);
    CHECK(ratio < 2.0 * 1.3);
  }
}

TEST_CASE("deterministic problems have vanishing Z") {
  const auto grid = TimeGrid::uniform(0.0, 1.0, 40);
  const auto bm = sample_brownian(grid, 1, 10000, 4);
  const auto sol = solve_backward(linear_per_state_driver(Eigen::Vector3d(1.0, -0.5, 0.2)),
                                  constant_terminal(scalar(2.0)), grid, bm, fixed_chain());
  double ss = 0;
  for (std::size_t i = 0; i < grid.steps(); ++i) ss += sol.z[i].squaredNorm();
  CHECK(std::sqrt(ss / (10000.0 * 40)) < 1e-3);
}

TEST_CASE("Brownian terminal value: Y = B and Z = 1") {
  const auto grid = TimeGrid::uniform(0.0, 1.0, 100);
  const Index n = 10000;
  const auto bm = sample_brownian(grid, 1, n, 5);
  const auto chain = ChainPath::constant(0.0, 1.0, 0);
  const auto sol = solve_backward(zero_driver(), brownian_endpoint_terminal(), grid, bm, chain);
  double z_ss = 0, y_ss = 0;
  for (std::size_t i = 0; i < grid.steps(); ++i) {
    z_ss += (sol.z[i].array() - 1.0).square().sum();
    y_ss += (sol.y[i] - bm.position(i)).squaredNorm();
  }
  CHECK(std::sqrt(z_ss / (n * 100.0)) < 0.05);
  CHECK(std::sqrt(y_ss / (n * 100.0)) < 0.02);
  CHECK(sol.y.back() == bm.position(100));

  const auto stats = a_priori_stats(sol);
  CHECK(stats.int_z2.mean == doctest::Approx(1.0).epsilon(0.05));
  // E sup_{t<=1} |B_t|^2 = 2G (Catalan); discrete monitoring on 100 steps
  // lowers the running max by about 0.5826 sqrt(dt), and E sup |B_t| = sqrt(pi/2).
  const double shift = 0.5826 * std::sqrt(0.01);
  const double discrete = 2 * kCatalan - 2 * shift * std::sqrt(std::numbers::pi / 2) + shift * shift;
  CHECK(std::abs(stats.sup_y2.mean - discrete) < 4 * stats.sup_y2.standard_error + 0.02);

  const auto report = martingale_residual_check(sol, zero_driver(), chain, bm);
  CHECK(report.passed);
  CHECK(report.max_abs_z_score <= 4.0);

  BsdeSolution corrupted = sol;
  for (std::size_t i = 0; i < grid.steps(); ++i) corrupted.z[i].array() += 0.5;
  CHECK_FALSE(martingale_residual_check(corrupted, zero_driver(), chain, bm).passed);
}

TEST_CASE("solver preconditions") {
  const auto grid = TimeGrid::uniform(0.0, 1.0, 4);
  const auto bm = sample_brownian(grid, 1, 100, 1);
  try {
    solve_backward(linear_driver(3.0), constant_terminal(scalar(1.0)), grid, bm, fixed_chain());
    FAIL("expected StepTooLarge");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::StepTooLarge);
  }
  const auto few = sample_brownian(grid, 1, 4, 1);
  try {
    solve_backward(zero_driver(), brownian_endpoint_terminal(), grid, few, fixed_chain());
    FAIL("expected RegressionSingular");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::RegressionSingular);
  }
  const ChainPath short_chain(0.0, 0.5, 0);
  CHECK_THROWS_AS(solve_backward(zero_driver(), brownian_endpoint_terminal(), grid, bm, short_chain), Error);
}

TEST_CASE("nested Monte Carlo mode") {
  const auto grid = TimeGrid::uniform(0.0, 1.0, 8);
  const auto bm = sample_brownian(grid, 1, 400, 6);
  SolverOptions nested;
  nested.mode = ExpectationMode::NestedMonteCarlo;
  const auto det = solve_backward(linear_per_state_driver(Eigen::Vector3d(0.5, -1.0, 0.3)),
                                  constant_terminal(scalar(1.0)), grid, bm, fixed_chain(), nested);
  for (std::size_t i = 0; i < grid.steps(); ++i) CHECK((det.z[i].array() == 0.0).all());

  const auto reg = solve_backward(linear_per_state_driver(Eigen::Vector3d(0.5, -1.0, 0.3)),
                                  constant_terminal(scalar(1.0)), grid, bm, fixed_chain());
  CHECK(det.initial_value()(0) == doctest::Approx(reg.initial_value()(0)).epsilon(1e-12));

  const auto bt = solve_backward(zero_driver(), brownian_endpoint_terminal(), grid, bm,
                                 ChainPath::constant(0.0, 1.0, 0), nested);
  CHECK(bt.z[0].mean() == doctest::Approx(1.0).epsilon(0.15));

  const auto big = sample_brownian(TimeGrid::uniform(0.0, 1.0, 20), 1, 100, 1);
  CHECK_THROWS_AS(solve_backward(zero_driver(), brownian_endpoint_terminal(), big.grid, big,
                                 ChainPath::constant(0.0, 1.0, 0), nested),
                  Error);
}

TEST_CASE("Picard iteration") {
  const auto chain = fixed_chain();
  const auto grid = TimeGrid::uniform(0.0, 1.0, 50);
  const auto bm = sample_brownian(grid, 1, 256, 8);

  SUBCASE("driver independent of (y, z) converges after one map application") {
    const auto r = picard_solve(constant_per_state_driver(Eigen::RowVector3d(1, 2, 3)),
                                constant_terminal(scalar(0.5)), grid, bm, chain, 3.0, 10);
    CHECK(r.report.converged);
    CHECK(r.report.iterations == 1);
    CHECK(r.report.differences.at(1) == 0.0);
  }

  SUBCASE("linear driver contracts and reaches the direct solution") {
    const auto driver = linear_driver(1.0);
    const auto xi = constant_terminal(scalar(1.0));
    const auto r = picard_solve(driver, xi, grid, bm, chain, 8.0, 40);
    REQUIRE(r.report.converged);
    for (double ratio : r.report.ratios) CHECK(ratio < 1.0);
    const auto direct = solve_backward(driver, xi, grid, bm, chain);
    CHECK(beta_norm_distance(r.solution, direct, 8.0) < 1e-6);
    CHECK(r.solution.initial_value()(0) == doctest::Approx(std::exp(1.0)).epsilon(0.02));
  }

  SUBCASE("Brownian terminal value agrees with the direct solver") {
    const auto driver = linear_driver(0.5);
    const auto xi = brownian_endpoint_terminal();
    const auto r = picard_solve(driver, xi, grid, bm, chain, default_picard_beta(0.5), 40);
    REQUIRE(r.report.converged);
    const auto direct = solve_backward(driver, xi, grid, bm, chain);
    CHECK(beta_norm_distance(r.solution, direct, default_picard_beta(0.5)) < 1e-6);
  }

  CHECK(default_picard_beta(1.0) == 5.0);
  CHECK_THROWS_AS(picard_solve(linear_driver(1.0), constant_terminal(scalar(1.0)), grid, bm, chain, 0.0, 5),
                  Error);
}

TEST_CASE("Picard reports non-convergence for an expanding map") {
  // A driver whose declared constant understates its true growth makes the
  // frozen-driver map expand.
  Driver wild = linear_driver(1.0);
  wild.f = [](double, const Vector&, const Vector& y, const Matrix&, Index) { return Vector(60.0 * y); };
  const auto grid = TimeGrid::uniform(0.0, 1.0, 10);
  const auto bm = sample_brownian(grid, 1, 64, 8);
  try {
    picard_solve(wild, constant_terminal(scalar(1.0)), grid, bm, ChainPath::constant(0.0, 1.0, 0), 1.0, 50);
    FAIL("expected NoConvergence");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NoConvergence);
  }
}

TEST_CASE("drivers satisfy their declared Lipschitz bound") {
  RandomStream rng(derive_key(1, "lipschitz"), 0);
  const std::vector<Driver> drivers = {zero_driver(), linear_driver(-1.7),
                                       linear_per_state_driver(Eigen::Vector3d(0.4, -2.0, 1.0)),
                                       constant_per_state_driver(Eigen::RowVector3d(1, -1, 0.5))};
  const Matrix z = Matrix::Zero(1, 1);
  for (const auto& drv : drivers)
    for (int s = 0; s < 200; ++s) {
      const Vector x = scalar(rng.uniform(-3, 3));
      const Vector y1 = scalar(rng.uniform(-5, 5)), y2 = scalar(rng.uniform(-5, 5));
      const Index state = static_cast<Index>(rng.next_u64() % 3);
      const double lhs = (drv(0.3, x, y1, z, state) - drv(0.3, x, y2, z, state)).norm();
      CHECK(lhs <= drv.lipschitz_mu * (y1 - y2).norm() + 1e-12);
    }
}

TEST_CASE("solutions are bit-reproducible") {
  const auto grid = TimeGrid::uniform(0.0, 1.0, 30);
  const auto chain = fixed_chain();
  auto run = [&] {
    return solve_backward(linear_driver(0.7), brownian_endpoint_terminal(), grid,
                          sample_brownian(grid, 1, 500, 77), chain);
  };
  CHECK(run() == run());
}

TEST_CASE("FBSDE mode with an Euler-Maruyama forward state") {
  // dX = 0.5 dB from x0 = 1, xi = X_T: Y_t = X_t and Z = 0.5.
  const auto grid = TimeGrid::uniform(0.0, 1.0, 50);
  const auto bm = sample_brownian(grid, 1, 5000, 9);
  const auto fwd = euler_maruyama([](double, const Vector&) { return scalar(0.0); },
                                  [](double, const Vector&) { return Matrix::Constant(1, 1, 0.5); },
                                  scalar(1.0), bm);
  const BsdeSolver solver(fwd, bm);
  const auto sol = solver.solve(zero_driver(), endpoint_terminal([](const Vector& x) { return x; }, 1, "x_T"),
                                ChainPath::constant(0.0, 1.0, 0));
  CHECK(sol.initial_value()(0) == doctest::Approx(1.0).epsilon(0.02));
  CHECK(sol.z[0].mean() == doctest::Approx(0.5).epsilon(0.05));
  CHECK(sol.z[25].mean() == doctest::Approx(0.5).epsilon(0.05));
}
