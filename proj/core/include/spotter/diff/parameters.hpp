#pragma once

#include <string>
#include <vector>

#include "spotter/diff/tensor.hpp"

namespace spotter {
class Rng;
}

namespace spotter::diff {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

enum class Init { kZeros, kOnes, kXavierUniform, kUniformSmall };

/// Ordered registry of named trainable tensors. Names are unique and stable,
/// so they key checkpoint records.
template <typename T>
class ParameterSet {
 public:
  /// Registers a new parameter. fan_in / fan_out feed Xavier bounds and
  /// default to the last two extents.
  Tensor<T> create(const std::string& name, Shape shape, Init init, Rng& rng, int fan_in = 0,
                   int fan_out = 0);

  const std::vector<Parameter<T>>& all() const { return params_; }
  std::vector<Parameter<T>>& all() { return params_; }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  /// nullptr if absent.
  const Parameter<T>* find(const std::string& name) const;
  Parameter<T>* find(const std::string& name);

  void zero_grad();

 private:
  std::vector<Parameter<T>> params_;
};

extern template class ParameterSet<float>;
extern template class ParameterSet<double>;

}  // namespace spotter::diff
