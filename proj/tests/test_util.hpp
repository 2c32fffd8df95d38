#pragma once

// Shared helpers for the unit and acceptance suites.

#include <cmath>
#include <string>
#include <vector>

#include "spotter/diff/parameters.hpp"
#include "spotter/random.hpp"

namespace spotter::testing {

template <typename T>
diff::Tensor<T> random_tensor(const diff::Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                              bool requires_grad = false) {
  std::vector<T> v(diff::numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return diff::Tensor<T>::from_values(shape, std::move(v), requires_grad);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename T>
std::vector<double> as_doubles(const diff::Tensor<T>& t) {
  return {t.values().begin(), t.values().end()};
}

}  // namespace spotter::testing
