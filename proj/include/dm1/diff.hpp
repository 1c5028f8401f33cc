#pragma once

// Differentiation engine: plain values (Tensor), forward mode (DualTensor,
// jvp) and reverse mode (Var, grad). Model code is written once as templates
// over the value type and runs under all three.

#include <concepts>
#include <type_traits>

#include "dm1/dual.hpp"
#include "dm1/reverse.hpp"
#include "dm1/tensor.hpp"

namespace dm1 {

inline const Tensor& value(const Tensor& x) { return x; }
inline Tensor stop_gradient(const Tensor& x) { return x; }

template <class T>
concept EngineValue = std::same_as<T, Tensor> || std::same_as<T, DualTensor> || std::same_as<T, Var>;

// Lifts a plain tensor into engine type T as a constant.
template <EngineValue T>
T constant(Tensor t) {
  if constexpr (std::is_same_v<T, Tensor>) {
    return t;
  } else {
    return T(std::move(t));
  }
}

}  // namespace dm1
