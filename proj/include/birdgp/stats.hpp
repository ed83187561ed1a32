#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "birdgp/errors.hpp"

namespace birdgp {

inline double mean(std::span<const double> v) {
  if (v.empty()) throw InvalidInput("mean: empty vector");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Unbiased sample variance (n-1 denominator).
inline double variance(std::span<const double> v) {
  if (v.size() < 2) throw InvalidInput("variance: need at least 2 values");
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

inline double stddev(std::span<const double> v) { return std::sqrt(variance(v)); }

// Pearson correlation. Throws DegenerateCorrelation when either argument has
// zero variance; the caller decides how to handle that case.
inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("pearson: length mismatch");
  if (a.size() < 2) throw InvalidInput("pearson: need at least 2 values");
  const double n = static_cast<double>(a.size());
  const double ma = mean(a), mb = mean(b);
  double saa = 0.0, sbb = 0.0, sab = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    saa += da * da;
    sbb += db * db;
    sab += da * db;
  }
  (void)n;
  if (saa == 0.0 || sbb == 0.0)
    throw DegenerateCorrelation("pearson: zero variance argument");
  const double r = sab / std::sqrt(saa * sbb);
  return std::clamp(r, -1.0, 1.0);
}

// Quantile with linear interpolation between the closest order statistics.
// This convention is used for every quantile in the library: credible
// intervals, top-5% activation thresholds, and quartile splits.
inline double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw InvalidInput("quantile: empty vector");
  if (!(q >= 0.0 && q <= 1.0)) throw InvalidInput("quantile: q outside [0,1]");
  const double h = q * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = h - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

inline double quantile(std::span<const double> v, double q) {
  std::vector<double> sorted(v.begin(), v.end());
  std::sort(sorted.begin(), sorted.end());
  return quantile_sorted(sorted, q);
}

inline double median(std::span<const double> v) { return quantile(v, 0.5); }

}  // namespace birdgp
