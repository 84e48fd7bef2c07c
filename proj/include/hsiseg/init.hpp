#pragma once

// Parameter creation helpers shared by every trainable module.

#include <cmath>
#include <random>
#include <string>

#include "hsiseg/tensor.hpp"

namespace hsiseg {

template <typename T>
Tensor<T> param_uniform(ParamStore<T>& store, const std::string& name, Shape shape, double bound,
                        std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(u(rng));
  return store.add(name, Tensor<T>(std::move(shape), std::move(v)));
}

/// Glorot-uniform weights.
template <typename T>
Tensor<T> param_glorot(ParamStore<T>& store, const std::string& name, Shape shape,
                       std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return param_uniform(store, name, std::move(shape), bound, rng);
}

template <typename T>
Tensor<T> param_const(ParamStore<T>& store, const std::string& name, Shape shape, T value) {
  return store.add(name, Tensor<T>(std::move(shape), value));
}

}  // namespace hsiseg
