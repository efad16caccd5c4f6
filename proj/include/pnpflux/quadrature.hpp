#pragma once

#include <array>
#include <cmath>
#include <cstddef>

#include "pnpflux/error.hpp"

namespace pnpflux::quadrature {

/// Gauss-Legendre rule on the reference interval [-1, 1].
template <std::size_t N>
struct GaussLegendre;

template <>
struct GaussLegendre<2> {
  static constexpr std::array<double, 2> nodes{-0.57735026918962576451, 0.57735026918962576451};
  static constexpr std::array<double, 2> weights{1.0, 1.0};
};

template <>
struct GaussLegendre<5> {
  static constexpr std::array<double, 5> nodes{
      -0.90617984593866399280, -0.53846931010568309104, 0.0, 0.53846931010568309104,
      0.90617984593866399280};
  static constexpr std::array<double, 5> weights{
      0.23692688505618908751, 0.47862867049936646804, 0.56888888888888888889,
      0.47862867049936646804, 0.23692688505618908751};
};

/// Applies the N-point rule on [a, b].
template <std::size_t N, class F>
double integrate_panel(F&& f, double a, double b) {
  const double mid = 0.5 * (a + b);
  const double half = 0.5 * (b - a);
  double sum = 0.0;
  for (std::size_t q = 0; q < N; ++q) sum += GaussLegendre<N>::weights[q] * f(mid + half * GaussLegendre<N>::nodes[q]);
  return sum * half;
}

/// Composite N-point rule with uniform panels, doubling the panel count until two
/// successive estimates agree to `rel_tol`. Intended for integrands that are smooth on [a, b];
/// callers split at known kinks.
template <std::size_t N, class F>
double integrate_composite(F&& f, double a, double b, double rel_tol = 1e-12, int max_doublings = 20) {
  if (b == a) return 0.0;
  auto estimate = [&](int panels) {
    const double width = (b - a) / panels;
    double sum = 0.0;
    for (int p = 0; p < panels; ++p) sum += integrate_panel<N>(f, a + p * width, a + (p + 1) * width);
    return sum;
  };
  int panels = 1;
  double previous = estimate(panels);
  for (int k = 0; k < max_doublings; ++k) {
    panels *= 2;
    const double current = estimate(panels);
    if (std::abs(current - previous) <= rel_tol * std::abs(current)) return current;
    previous = current;
  }
  throw integration_error("composite quadrature did not reach the requested tolerance");
}

}  // namespace pnpflux::quadrature
