#pragma once

#include <span>
#include <vector>

#include "mmbsde/markov_chain.hpp"

namespace mmbsde {

/// Sample mean and standard error of the mean.
Estimate mean_estimate(std::span<const double> values);

double sample_stddev(std::span<const double> values);

/// Two-sample Kolmogorov-Smirnov statistic sup |F_a - F_b|.
double ks_distance(std::span<const double> a, std::span<const double> b);

/// 1-Wasserstein distance between empirical laws, int |F_a - F_b| dx.
double wasserstein1(std::span<const double> a, std::span<const double> b);

/// 95% critical value of the two-sample KS statistic, 1.358 sqrt((n+m)/(nm)).
double ks_noise_floor(std::size_t n, std::size_t m);

/// Least-squares slope of log(y) against log(x).
double log_log_slope(std::span<const double> x, std::span<const double> y);

}  // namespace mmbsde
