#include <doctest.h>

#include <cmath>

#include "mmbsde/markov_chain.hpp"
#include "test_support.hpp"

using namespace mmbsde;
using mmbsde::testing::example_fast;
using mmbsde::testing::example_generator;
using mmbsde::testing::example_partition;
using mmbsde::testing::example_slow;
using mmbsde::testing::random_generator;

namespace {

// Independent oracle: normalized kernel of Q^T from a full-pivot LU.
Eigen::VectorXd kernel_stationary(const Eigen::MatrixXd& q) {
  Eigen::FullPivLU<Eigen::MatrixXd> lu(q.transpose());
  Eigen::VectorXd v = lu.kernel().col(0);
  return v / v.sum();
}

}  // namespace

TEST_CASE("validate_generator accepts the three-state example and recomputes the diagonal") {
  const auto q = example_generator();
  CHECK(q.size() == 3);
  CHECK(q.rate(0, 0) == -22.0);
  CHECK(q.rate(1, 1) == -42.0);
  CHECK(q.rate(2, 2) == -3.0);

  Eigen::Matrix2d near;
  near << -1.0 - 5e-10, 1.0, 2.0, -2.0;
  const auto fixed = validate_generator(near);
  CHECK(fixed.rate(0, 0) == -1.0);
}

TEST_CASE("validate_generator edge cases") {
  const auto zero = validate_generator(Eigen::Matrix3d::Zero().eval());
  for (Index i = 0; i < 3; ++i) CHECK(zero.is_absorbing(i));

  Eigen::Matrix2d bad_row;
  bad_row << -1, 2, 1, -1;
  CHECK_THROWS_WITH_AS(validate_generator(bad_row), doctest::Contains("RowSumViolation"), Error);

  Eigen::Matrix2d negative;
  negative << 1, -1, 0, 0;
  try {
    validate_generator(negative);
    FAIL("expected NegativeRate");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NegativeRate);
  }

  Eigen::MatrixXd rect(2, 3);
  rect.setZero();
  CHECK_THROWS_AS(validate_generator(rect), Error);
}

TEST_CASE("quasi_stationary closed forms") {
  Eigen::Matrix2d fast_block;
  fast_block << -1, 1, 2, -2;
  const auto nu = quasi_stationary(validate_generator(fast_block));
  CHECK(nu[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(nu[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

  Eigen::Matrix<double, 1, 1> single;
  single << 0.0;
  CHECK(quasi_stationary(validate_generator(single))[0] == 1.0);

  for (double a : {0.1, 1.0, 37.0}) {
    Eigen::Matrix2d sym;
    sym << -a, a, a, -a;
    const auto s = quasi_stationary(validate_generator(sym));
    CHECK(s[0] == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(s[1] == doctest::Approx(0.5).epsilon(1e-14));
  }
}

TEST_CASE("quasi_stationary matches an independent null-space solve on random generators") {
  RandomStream rng(derive_key(11, "qsd"), 0);
  for (int trial = 0; trial < 20; ++trial) {
    const auto q = random_generator(4, rng);
    const auto nu = quasi_stationary(q);
    const Eigen::VectorXd oracle = kernel_stationary(q.rates());
    CHECK((nu.nu - oracle).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(std::abs(nu.nu.sum() - 1.0) < 1e-12);
    CHECK(nu.nu.minCoeff() >= 0.0);
    CHECK((nu.nu.transpose() * q.rates()).cwiseAbs().maxCoeff() < 1e-10);
    for (double t : {0.1, 1.0, 10.0}) {
      const Eigen::RowVectorXd moved = nu.nu.transpose() * transition_matrix(q, t);
      CHECK((moved - nu.nu.transpose()).cwiseAbs().maxCoeff() < 1e-8);
    }
  }
}

TEST_CASE("quasi_stationary rejects reducible generators") {
  Eigen::Matrix3d two_classes;
  two_classes << -1, 1, 0, 1, -1, 0, 0, 0, 0;
  try {
    quasi_stationary(validate_generator(two_classes));
    FAIL("expected NotWeaklyIrreducible");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NotWeaklyIrreducible);
  }
  CHECK_THROWS_AS(quasi_stationary(validate_generator(Eigen::Matrix2d::Zero().eval())), Error);
}

TEST_CASE("quasi_stationary works for other scalar types") {
  Eigen::Matrix<long double, 2, 2> q;
  q << -1, 1, 2, -2;
  const auto nu = quasi_stationary(validate_generator(q));
  CHECK(std::abs(static_cast<double>(nu[0]) - 2.0 / 3.0) < 1e-15);

  Eigen::Matrix2f qf;
  qf << -3, 3, 1, -1;
  const auto nuf = quasi_stationary(validate_generator(qf, 1e-6));
  CHECK(nuf[0] == doctest::Approx(0.25f).epsilon(1e-6));
}

TEST_CASE("compose reproduces the printed three-state generator") {
  const auto ts = make_two_scale(example_fast(), example_slow(), 0.05, example_partition());
  const auto q = compose(ts);
  CHECK((q.rates() - example_generator().rates()).cwiseAbs().maxCoeff() < 1e-12);

  const auto slow_only = make_two_scale(validate_generator(Eigen::Matrix3d::Zero().eval()),
                                        example_slow(), 0.3, StatePartition::singletons(3));
  CHECK(compose(slow_only).rates() == example_slow().rates());

  const auto unit = ts.with_epsilon(1.0);
  CHECK((compose(unit).rates() - (example_fast().rates() + example_slow().rates())).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("make_two_scale enforces block structure and irreducibility") {
  Eigen::Matrix3d coupled;
  coupled << -1, 0, 1, 0, 0, 0, 1, 0, -1;
  CHECK_THROWS_AS(make_two_scale(validate_generator(coupled), example_slow(), 0.1, example_partition()),
                  Error);

  Eigen::Matrix3d absorbing_block;
  absorbing_block << 0, 0, 0, 1, -1, 0, 0, 0, 0;
  CHECK_THROWS_AS(
      make_two_scale(validate_generator(absorbing_block), example_slow(), 0.1, example_partition()), Error);

  CHECK_THROWS_AS(make_two_scale(example_fast(), example_slow(), 0.0, example_partition()), Error);
}

TEST_CASE("verify_decomposition") {
  const auto ts = make_two_scale(example_fast(), example_slow(), 0.05, example_partition());
  const auto exact = verify_decomposition(example_generator(), ts);
  CHECK(exact.passed);
  CHECK(exact.max_residual == 0.0);

  const auto roundtrip = verify_decomposition(compose(ts.with_epsilon(0.37)), ts.with_epsilon(0.37));
  CHECK(roundtrip.passed);
  CHECK(roundtrip.max_residual == 0.0);

  CHECK_FALSE(verify_decomposition(example_generator(), ts.with_epsilon(0.025)).passed);

  Eigen::Matrix3d perturbed = example_slow().rates();
  perturbed(0, 2) += 1e-3;
  perturbed(0, 0) -= 1e-3;
  const auto moved = make_two_scale(example_fast(), validate_generator(perturbed), 0.05, example_partition());
  const auto report = verify_decomposition(example_generator(), moved, 1e-6);
  CHECK_FALSE(report.passed);
  CHECK(report.max_residual == doctest::Approx(1e-3).epsilon(1e-9));

  const auto small = validate_generator(Eigen::Matrix2d::Zero().eval());
  CHECK_THROWS_AS(verify_decomposition(small, ts), Error);
}

TEST_CASE("aggregate_generator") {
  const auto ts = make_two_scale(example_fast(), example_slow(), 0.05, example_partition());
  const auto nus = block_quasi_stationary(ts);
  const auto qbar = aggregate_generator(ts.slow, ts.partition, nus);
  Eigen::Matrix2d expected;
  expected << -5.0 / 3.0, 5.0 / 3.0, 3.0, -3.0;
  CHECK((qbar.rates() - expected).cwiseAbs().maxCoeff() < 1e-12);

  std::vector<QuasiStationaryDistribution<double>> ones(3, {Eigen::VectorXd::Ones(1)});
  const auto same = aggregate_generator(example_slow(), StatePartition::singletons(3), ones);
  CHECK(same.rates() == example_slow().rates());

  const auto lumped = aggregate_generator(example_slow(), StatePartition::single_block(3),
                                          {quasi_stationary(example_generator())});
  CHECK(lumped.size() == 1);
  CHECK(std::abs(lumped.rate(0, 0)) < 1e-15);

  CHECK_THROWS_AS(aggregate_generator(example_slow(), example_partition(), {nus[0]}), Error);
}

TEST_CASE("aggregate_generator output is always a valid generator") {
  RandomStream rng(derive_key(5, "aggregate"), 0);
  const StatePartition partition(5, {{0, 3}, {1}, {2, 4}});
  for (int trial = 0; trial < 25; ++trial) {
    const auto slow = random_generator(5, rng);
    std::vector<QuasiStationaryDistribution<double>> nus;
    for (Index k = 0; k < partition.block_count(); ++k) {
      Eigen::VectorXd w(partition.block_size(k));
      for (Index j = 0; j < w.size(); ++j) w(j) = rng.uniform();
      nus.push_back({w / w.sum()});
    }
    const auto qbar = aggregate_generator(slow, partition, nus);
    CHECK(qbar.rates().rowwise().sum().cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("transition_matrix") {
  const auto q = example_generator();
  CHECK(transition_matrix(q, 0.0) == Eigen::Matrix3d::Identity());
  const auto zero = validate_generator(Eigen::Matrix3d::Zero().eval());
  CHECK((transition_matrix(zero, 5.0) - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() == 0.0);
  for (double t : {0.01, 0.3, 2.0}) {
    const Eigen::MatrixXd p = transition_matrix(q, t);
    CHECK((p.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-10);
    CHECK(p.minCoeff() >= -1e-14);
  }

  const double a = 0.7, b = 2.3, t = 0.9;
  Eigen::Matrix2d two;
  two << -a, a, b, -b;
  const double e = std::exp(-(a + b) * t);
  Eigen::Matrix2d closed;
  closed << b + a * e, a - a * e, b - b * e, a + b * e;
  closed /= (a + b);
  CHECK((transition_matrix(validate_generator(two), t) - closed).cwiseAbs().maxCoeff() < 1e-13);
  CHECK_THROWS_AS(transition_matrix(q, -1.0), Error);
}

TEST_CASE("ChainPath invariants and queries") {
  const ChainPath path(0.0, 1.0, 0, {0.2, 0.5, 0.7}, {1, 2, 0});
  CHECK(path.state_at(0.0) == 0);
  CHECK(path.state_at(0.2) == 1);
  CHECK(path.state_at(0.19999) == 0);
  CHECK(path.state_at(0.6) == 2);
  CHECK(path.state_at(1.0) == 0);
  const auto occ = path.occupation_times(0.0, 1.0, 3);
  CHECK(occ[0] == doctest::Approx(0.5));
  CHECK(occ[1] == doctest::Approx(0.3));
  CHECK(occ[2] == doctest::Approx(0.2));

  const auto sub = path.restrict(0.3, 0.8);
  CHECK(sub.initial_state() == 1);
  CHECK(sub.jump_count() == 2);

  CHECK_THROWS_AS(ChainPath(0.0, 1.0, 0, {0.5, 0.4}, {1, 2}), Error);
  CHECK_THROWS_AS(ChainPath(0.0, 1.0, 0, {0.5}, {0}), Error);
  CHECK_THROWS_AS(ChainPath(0.0, 1.0, 0, {1.5}, {1}), Error);
}

TEST_CASE("simulate_chain basics") {
  const auto zero = validate_generator(Eigen::Matrix3d::Zero().eval());
  RandomStream rng(1, 0);
  const auto still = simulate_chain(zero, 2, 0.0, 10.0, rng);
  CHECK(still.jump_count() == 0);
  CHECK(still.state_at(7.0) == 2);

  RandomStream a(derive_key(3, "repro"), 4), b(derive_key(3, "repro"), 4);
  CHECK(simulate_chain(example_generator(), 0, 0.0, 2.0, a) == simulate_chain(example_generator(), 0, 0.0, 2.0, b));

  RandomStream c(derive_key(3, "budget"), 0);
  CHECK_THROWS_AS(simulate_chain(example_generator(), 0, 0.0, 100.0, c, 10), Error);
}

TEST_CASE("simulate_chain marginals match exp(Qt)") {
  const auto q = example_generator();
  const double t = 0.4;
  const Eigen::MatrixXd exact = transition_matrix(q, t);
  const std::size_t n = 20000;
  for (Index i = 0; i < 3; ++i) {
    Eigen::Vector3d counts = Eigen::Vector3d::Zero();
    const auto key = derive_key(99, "marginals", static_cast<std::uint64_t>(i));
    for (std::size_t p = 0; p < n; ++p) {
      RandomStream rng(key, p);
      counts(simulate_chain(q, i, 0.0, t, rng).state_at(t)) += 1.0;
    }
    for (Index j = 0; j < 3; ++j) {
      const double prob = exact(i, j);
      const double se = std::sqrt(prob * (1 - prob) / static_cast<double>(n));
      CHECK(std::abs(counts(j) / static_cast<double>(n) - prob) <= 3.0 * se + 1e-12);
    }
  }
}

TEST_CASE("simulate_chain absorption time has mean 1 for unit rate") {
  Eigen::Matrix2d q;
  q << -1, 1, 0, 0;
  const auto gen = validate_generator(q);
  const std::size_t n = 20000;
  double sum = 0, sum_sq = 0;
  for (std::size_t p = 0; p < n; ++p) {
    RandomStream rng(derive_key(8, "absorb"), p);
    const auto path = simulate_chain(gen, 0, 0.0, 1e6, rng);
    REQUIRE(path.jump_count() == 1);
    sum += path.jump_times()[0];
    sum_sq += path.jump_times()[0] * path.jump_times()[0];
  }
  const double mean = sum / n;
  const double se = std::sqrt((sum_sq / n - mean * mean) / n);
  CHECK(std::abs(mean - 1.0) < 4.0 * se);
}

TEST_CASE("aggregate_path") {
  const auto partition = example_partition();
  const ChainPath inside(0.0, 1.0, 0, {0.1, 0.4}, {1, 0});
  const auto flat = aggregate_path(inside, partition);
  CHECK(flat.jump_count() == 0);
  CHECK(flat.initial_state() == 0);

  const ChainPath tour(0.0, 1.0, 0, {0.2, 0.5, 0.8}, {1, 2, 0});
  const auto agg = aggregate_path(tour, partition);
  CHECK(agg.initial_state() == 0);
  CHECK(agg.jump_times() == std::vector<double>{0.5, 0.8});
  CHECK(agg.post_jump_states() == std::vector<Index>{1, 0});

  const ChainPath unknown(0.0, 1.0, 5);
  CHECK_THROWS_AS(aggregate_path(unknown, partition), Error);
}

TEST_CASE("aggregate_path agrees with the pointwise block map") {
  const auto q = example_generator();
  const auto partition = example_partition();
  for (std::uint64_t p = 0; p < 20; ++p) {
    RandomStream rng(derive_key(17, "aggpath"), p);
    const auto path = simulate_chain(q, static_cast<Index>(p % 3), 0.0, 3.0, rng);
    const auto agg = aggregate_path(path, partition);
    for (int s = 0; s <= 1000; ++s) {
      const double t = 3.0 * s / 1000.0;
      CHECK(agg.state_at(t) == partition.block_of(path.state_at(t)));
    }
  }
}

TEST_CASE("occupation_deviation") {
  const auto singletons = make_two_scale(validate_generator(Eigen::Matrix3d::Zero().eval()),
                                         example_slow(), 0.1, StatePartition::singletons(3));
  const auto zero = occupation_deviation(singletons, [](double t) { return std::sin(3 * t); }, 0.0, 1.0, 200, 3);
  for (const auto& row : zero.estimates)
    for (const auto& e : row) {
      CHECK(e.mean == 0.0);
      CHECK(e.standard_error == 0.0);
    }

  const auto ts = make_two_scale(example_fast(), example_slow(), 0.05, example_partition());
  const auto dev = occupation_deviation(ts, [](double) { return 1.0; }, 0.0, 1.0, 1000, 21);
  const auto& e11 = dev.estimates[0][0];
  CHECK(e11.mean > 0.0);
  CHECK(std::isfinite(e11.mean));
  CHECK(e11.standard_error > 0.0);
  CHECK(e11.standard_error < e11.mean);
  // The two within-block indicators sum to the block indicator, so their
  // deviations are exact negatives.
  CHECK(dev.estimates[0][1].mean == doctest::Approx(e11.mean).epsilon(1e-9));
  CHECK(dev.estimates[1][0].mean == 0.0);

  CHECK_THROWS_AS(occupation_deviation(ts, [](double) { return 1.0; }, 0.0, 1.0, 50, 1), Error);
}
