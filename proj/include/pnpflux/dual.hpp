#pragma once

// Forward-mode dual numbers with a runtime number of active derivative slots
// (bounded at compile time). Used to obtain exact element Jacobians.

#include <array>
#include <cmath>
#include <cstddef>

namespace pnpflux {

template <std::size_t Capacity>
struct Dual {
  double value = 0.0;
  std::array<double, Capacity> grad{};
  std::size_t active = 0;

  Dual() = default;
  Dual(double v) : value(v) {}  // NOLINT: implicit constant promotion is the point

  static Dual variable(double v, std::size_t slot, std::size_t active) {
    Dual d(v);
    d.active = active;
    d.grad[slot] = 1.0;
    return d;
  }
};

template <std::size_t C>
double value_of(const Dual<C>& d) {
  return d.value;
}

namespace detail {
template <std::size_t C>
Dual<C> combine(const Dual<C>& a, const Dual<C>& b, double value, double da, double db) {
  Dual<C> r(value);
  r.active = a.active > b.active ? a.active : b.active;
  for (std::size_t i = 0; i < r.active; ++i) r.grad[i] = da * a.grad[i] + db * b.grad[i];
  return r;
}
template <std::size_t C>
Dual<C> chain(const Dual<C>& a, double value, double da) {
  Dual<C> r(value);
  r.active = a.active;
  for (std::size_t i = 0; i < r.active; ++i) r.grad[i] = da * a.grad[i];
  return r;
}
}  // namespace detail

template <std::size_t C>
Dual<C> operator+(const Dual<C>& a, const Dual<C>& b) {
  return detail::combine<C>(a, b, a.value + b.value, 1.0, 1.0);
}
template <std::size_t C>
Dual<C> operator-(const Dual<C>& a, const Dual<C>& b) {
  return detail::combine<C>(a, b, a.value - b.value, 1.0, -1.0);
}
template <std::size_t C>
Dual<C> operator*(const Dual<C>& a, const Dual<C>& b) {
  return detail::combine<C>(a, b, a.value * b.value, b.value, a.value);
}
template <std::size_t C>
Dual<C> operator/(const Dual<C>& a, const Dual<C>& b) {
  const double inv = 1.0 / b.value;
  return detail::combine<C>(a, b, a.value * inv, inv, -a.value * inv * inv);
}
template <std::size_t C>
Dual<C> operator-(const Dual<C>& a) {
  return detail::chain(a, -a.value, -1.0);
}

template <std::size_t C>
Dual<C> operator+(const Dual<C>& a, double b) { return detail::chain(a, a.value + b, 1.0); }
template <std::size_t C>
Dual<C> operator+(double a, const Dual<C>& b) { return detail::chain(b, a + b.value, 1.0); }
template <std::size_t C>
Dual<C> operator-(const Dual<C>& a, double b) { return detail::chain(a, a.value - b, 1.0); }
template <std::size_t C>
Dual<C> operator-(double a, const Dual<C>& b) { return detail::chain(b, a - b.value, -1.0); }
template <std::size_t C>
Dual<C> operator*(const Dual<C>& a, double b) { return detail::chain(a, a.value * b, b); }
template <std::size_t C>
Dual<C> operator*(double a, const Dual<C>& b) { return detail::chain(b, a * b.value, a); }
template <std::size_t C>
Dual<C> operator/(const Dual<C>& a, double b) { return detail::chain(a, a.value / b, 1.0 / b); }
template <std::size_t C>
Dual<C> operator/(double a, const Dual<C>& b) {
  return detail::chain(b, a / b.value, -a / (b.value * b.value));
}

template <std::size_t C>
Dual<C> log(const Dual<C>& a) {
  return detail::chain(a, std::log(a.value), 1.0 / a.value);
}
template <std::size_t C>
Dual<C> exp(const Dual<C>& a) {
  const double e = std::exp(a.value);
  return detail::chain(a, e, e);
}

}  // namespace pnpflux
