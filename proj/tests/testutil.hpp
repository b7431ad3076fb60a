#pragma once

// Shared helpers for the test suites. Oracles here are kept independent of
// the library's implementation path: finite differences, brute-force
// enumeration, direct formula evaluation.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "lce/rng.hpp"
#include "lce/tensor.hpp"

namespace testutil {

// Central finite difference of a scalar-valued rebuildable computation with
// respect to one storage element.
inline double central_diff(std::vector<double>& storage, std::size_t i,
                           const std::function<double()>& forward, double step = 1e-4) {
  const double saved = storage[i];
  storage[i] = saved + step;
  const double up = forward();
  storage[i] = saved - step;
  const double down = forward();
  storage[i] = saved;
  return (up - down) / (2.0 * step);
}

// Relative error with an absolute floor, for comparing gradients near zero.
inline double rel_err(double a, double b, double floor = 1e-8) {
  const double denom = std::max({std::fabs(a), std::fabs(b), floor});
  return std::fabs(a - b) / denom;
}

// Checks every element of `storage` against finite differences of `forward`;
// returns the worst relative error. `analytic` holds the gradients under
// test, aligned with `storage`.
inline double max_grad_rel_err(std::vector<double>& storage, const std::vector<double>& analytic,
                               const std::function<double()>& forward, double step = 1e-4) {
  double worst = 0.0;
  for (std::size_t i = 0; i < storage.size(); ++i) {
    const double fd = central_diff(storage, i, forward, step);
    worst = std::max(worst, rel_err(analytic[i], fd));
  }
  return worst;
}

inline std::vector<double> random_vec(std::size_t n, std::uint64_t key, double scl = 1.0) {
  lce::Rng rng(key);
  std::vector<double> v(n);
  for (auto& x : v) x = scl * (2.0 * rng.uniform() - 1.0);
  return v;
}

}  // namespace testutil
