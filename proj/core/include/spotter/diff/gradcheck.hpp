#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "spotter/diff/parameters.hpp"

namespace spotter::diff {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t coordinates_checked = 0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  /// Empty on success; otherwise names the probe that went non-finite.
  std::string failure;

  bool ok(double tolerance) const { return failure.empty() && max_relative_error < tolerance; }
};

/// Compares backward() gradients of a scalar loss against central
/// differences (f(x+eps) - f(x-eps)) / 2eps at `samples` random coordinates
/// drawn across `params` (every coordinate when samples covers them all).
/// Error per coordinate is |a - n| / max(1e-8, |a| + |n|).
///
/// `loss_fn` must be deterministic and rebuild its graph on each call.
/// Throws std::invalid_argument if eps is outside [1e-7, 1e-4].
GradCheckReport finite_difference_check(const std::function<Tensor<double>()>& loss_fn,
                                        std::span<Parameter<double>> params, double eps,
                                        std::size_t samples, std::uint64_t seed = 0);

}  // namespace spotter::diff
