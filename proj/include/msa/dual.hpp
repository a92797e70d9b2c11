#pragma once

#include <cmath>

namespace msa {

// Forward-mode scalar: value plus derivative along one direction.
struct Dual {
  double value = 0.0;
  double deriv = 0.0;

  constexpr Dual() = default;
  constexpr Dual(double v) : value(v) {}  // NOLINT: constants promote implicitly
  constexpr Dual(double v, double d) : value(v), deriv(d) {}

  friend constexpr Dual operator+(Dual a, Dual b) { return {a.value + b.value, a.deriv + b.deriv}; }
  friend constexpr Dual operator-(Dual a, Dual b) { return {a.value - b.value, a.deriv - b.deriv}; }
  friend constexpr Dual operator*(Dual a, Dual b) { return {a.value * b.value, a.deriv * b.value + a.value * b.deriv}; }
  friend constexpr Dual operator/(Dual a, Dual b) {
    return {a.value / b.value, (a.deriv * b.value - a.value * b.deriv) / (b.value * b.value)};
  }
  friend Dual sqrt(Dual a) {
    const double r = std::sqrt(a.value);
    return {r, r > 0.0 ? a.deriv / (2.0 * r) : 0.0};
  }
};

}  // namespace msa
