#include "mmbsde/stats.hpp"

#include <algorithm>
#include <cmath>

namespace mmbsde {

Estimate mean_estimate(std::span<const double> values) {
  if (values.empty()) throw Error(ErrorCode::InvalidArgument, "mean of an empty sample");
  const double n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  if (values.size() < 2) return {mean, 0.0};
  return {mean, sample_stddev(values) / std::sqrt(n)};
}

double sample_stddev(std::span<const double> values) {
  if (values.size() < 2) return 0.0;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

double ks_distance(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw Error(ErrorCode::InvalidArgument, "KS distance of an empty sample");
  std::vector<double> x(a.begin(), a.end());
  std::vector<double> y(b.begin(), b.end());
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  const double nx = static_cast<double>(x.size());
  const double ny = static_cast<double>(y.size());
  std::size_t i = 0, j = 0;
  double best = 0.0;
  while (i < x.size() && j < y.size()) {
    const double v = std::min(x[i], y[j]);
    while (i < x.size() && x[i] == v) ++i;
    while (j < y.size() && y[j] == v) ++j;
    best = std::max(best, std::abs(static_cast<double>(i) / nx - static_cast<double>(j) / ny));
  }
  return best;
}

double wasserstein1(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw Error(ErrorCode::InvalidArgument, "Wasserstein of an empty sample");
  std::vector<double> x(a.begin(), a.end());
  std::vector<double> y(b.begin(), b.end());
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  std::vector<double> all;
  all.reserve(x.size() + y.size());
  std::merge(x.begin(), x.end(), y.begin(), y.end(), std::back_inserter(all));
  const double nx = static_cast<double>(x.size());
  const double ny = static_cast<double>(y.size());
  double total = 0.0;
  std::size_t i = 0, j = 0;
  for (std::size_t n = 0; n + 1 < all.size(); ++n) {
    while (i < x.size() && x[i] <= all[n]) ++i;
    while (j < y.size() && y[j] <= all[n]) ++j;
    total += std::abs(static_cast<double>(i) / nx - static_cast<double>(j) / ny) * (all[n + 1] - all[n]);
  }
  return total;
}

double ks_noise_floor(std::size_t n, std::size_t m) {
  const double a = static_cast<double>(n);
  const double b = static_cast<double>(m);
  return 1.358 * std::sqrt((a + b) / (a * b));
}

double log_log_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2)
    throw Error(ErrorCode::InvalidArgument, "log-log regression needs matching samples of size >= 2");
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0) || !(y[i] > 0))
      throw Error(ErrorCode::InvalidArgument, "log-log regression needs positive values");
    const double lx = std::log(x[i]);
    const double ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace mmbsde
