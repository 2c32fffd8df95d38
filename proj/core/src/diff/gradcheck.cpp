#include "spotter/diff/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <utility>
#include <vector>

#include "spotter/random.hpp"

namespace spotter::diff {

GradCheckReport finite_difference_check(const std::function<Tensor<double>()>& loss_fn,
                                        std::span<Parameter<double>> params, double eps,
                                        std::size_t samples, std::uint64_t seed) {
  if (!(eps >= 1e-7 && eps <= 1e-4)) {
    throw std::invalid_argument("finite_difference_check: eps must lie in [1e-7, 1e-4]");
  }
  GradCheckReport report;

  for (auto& p : params) p.tensor.zero_grad();
  {
    Tensor<double> loss = loss_fn();
    if (!std::isfinite(loss.item())) {
      report.failure = "loss is non-finite at the base point";
      return report;
    }
    loss.backward();
  }

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t pi = 0; pi < params.size(); ++pi)
    for (std::size_t i = 0; i < params[pi].tensor.size(); ++i) coords.emplace_back(pi, i);
  if (samples < coords.size()) {
    Rng rng(seed);
    // Partial Fisher-Yates.
    for (std::size_t i = 0; i < samples; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.next() % (coords.size() - i));
      std::swap(coords[i], coords[j]);
    }
    coords.resize(samples);
  }

  NoGradGuard no_grad;
  for (const auto& [pi, i] : coords) {
    auto& tensor = params[pi].tensor;
    const double analytic = tensor.has_grad() ? tensor.grad()[i] : 0.0;
    auto values = tensor.mutable_values();
    const double saved = values[i];
    values[i] = saved + eps;
    const double up = loss_fn().item();
    values[i] = saved - eps;
    const double down = loss_fn().item();
    values[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      report.failure = "non-finite loss probing " + params[pi].name + "[" + std::to_string(i) + "]";
      return report;
    }
    const double numeric = (up - down) / (2.0 * eps);
    const double err = std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
    ++report.coordinates_checked;
    if (err > report.max_relative_error || report.worst_parameter.empty()) {
      if (err >= report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_parameter = params[pi].name;
        report.worst_index = i;
        report.worst_analytic = analytic;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace spotter::diff
