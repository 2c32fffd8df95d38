#include "spotter/diff/parameters.hpp"

#include <cmath>
#include <stdexcept>

#include "spotter/random.hpp"

namespace spotter::diff {

template <typename T>
Tensor<T> ParameterSet<T>::create(const std::string& name, Shape shape, Init init, Rng& rng, int fan_in,
                                  int fan_out) {
  if (find(name) != nullptr) throw std::invalid_argument("duplicate parameter name: " + name);
  const std::size_t n = numel(shape);
  std::vector<T> values(n, T(0));
  switch (init) {
    case Init::kZeros:
      break;
    case Init::kOnes:
      std::fill(values.begin(), values.end(), T(1));
      break;
    case Init::kXavierUniform: {
      if (fan_in <= 0) fan_in = shape.size() >= 2 ? shape[shape.size() - 2] : static_cast<int>(n);
      if (fan_out <= 0) fan_out = shape.empty() ? 1 : shape.back();
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
      break;
    }
    case Init::kUniformSmall:
      for (auto& v : values) v = static_cast<T>(rng.uniform(-0.5, 0.5));
      break;
  }
  auto tensor = Tensor<T>::from_values(std::move(shape), std::move(values), true);
  params_.push_back({name, tensor});
  return tensor;
}

template <typename T>
std::size_t ParameterSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

template <typename T>
const Parameter<T>* ParameterSet<T>::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

template <typename T>
Parameter<T>* ParameterSet<T>::find(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template class ParameterSet<float>;
template class ParameterSet<double>;

}  // namespace spotter::diff
