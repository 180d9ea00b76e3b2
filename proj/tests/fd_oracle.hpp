#pragma once

// Central-difference gradient oracle shared by the unit suites. It only ever
// calls the scalar function it is given, so it stays independent of the
// backward rules it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "hagd/tensor.hpp"

namespace hagd::testing {

inline ad::Tensor central_difference(const std::function<double(const ad::Tensor&)>& f, const ad::Tensor& x,
                                     double step = 1e-6) {
  ad::Tensor g(x.shape(), 0.0);
  ad::Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = f(probe);
    probe[i] = orig - step;
    const double down = f(probe);
    probe[i] = orig;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
inline double max_relative_error(const ad::Tensor& a, const ad::Tensor& b, double floor = 1e-3) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

inline ad::Tensor random_tensor(ad::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  ad::Tensor t(std::move(shape));
  for (double& v : t.data()) v = u(rng);
  return t;
}

}  // namespace hagd::testing
