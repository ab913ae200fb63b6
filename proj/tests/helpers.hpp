#pragma once

#include <cstdint>

#include "kamal/core/rng.hpp"
#include "kamal/core/tensor.hpp"

namespace kamal::test {

inline Tensor random_tensor(Shape s, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(std::move(s));
  Rng r(seed, 99);
  for (auto& v : t.data()) v = r.uniform(lo, hi);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<double>(std::abs(a[i] - b[i])));
  return m;
}

}  // namespace kamal::test
