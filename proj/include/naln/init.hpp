#pragma once

#include <cmath>

#include "naln/rng.hpp"
#include "naln/tensor.hpp"

namespace naln {

/// Trainable tensor drawn from U(-b, b) with b = sqrt(6 / fan_in).
inline Tensor uniform_fan_in(Shape shape, std::size_t fan_in, Rng rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in == 0 ? 1 : fan_in));
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v), true);
}

}  // namespace naln
