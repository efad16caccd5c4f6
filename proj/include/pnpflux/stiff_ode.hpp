#pragma once

// Adaptive linearly implicit Rosenbrock 2(3) integrator (the L-stable W-method
// of Shampine & Reichelt) for autonomous stiff systems y' = f(y) with a banded
// Jacobian. Each step costs one band factorization per stage solve.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <vector>

#include "pnpflux/banded.hpp"
#include "pnpflux/error.hpp"

namespace pnpflux {

template <class S>
concept StiffSystem = requires(const S& s, const std::vector<double>& y) {
  { s.rhs(y) } -> std::convertible_to<std::vector<double>>;
  { s.jacobian(y) } -> std::convertible_to<BandedMatrix>;
};

struct StiffOptions {
  double rel_tol = 1e-6;
  double abs_tol = 1e-9;
  double initial_step = 0.0;  // 0: chosen from the initial slope
  double min_step = 1e-14;
  int max_steps = 100000;
};

struct StiffResult {
  std::vector<double> y;
  int accepted = 0;
  int rejected = 0;
};

/// Integrates from t0 to t1. `observer(t, y)` is invoked after every accepted step.
template <StiffSystem S>
StiffResult integrate_rosenbrock23(const S& system, double t0, double t1, std::vector<double> y,
                                   const StiffOptions& options = {},
                                   const std::function<void(double, const std::vector<double>&)>& observer = {}) {
  const double d = 1.0 / (2.0 + std::sqrt(2.0));
  const double e32 = 6.0 + std::sqrt(2.0);
  const std::size_t n = y.size();
  StiffResult result;
  if (n == 0 || t1 <= t0) {
    result.y = std::move(y);
    return result;
  }

  auto error_norm = [&](const std::vector<double>& err, const std::vector<double>& y0, const std::vector<double>& y1) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double scale = options.abs_tol + options.rel_tol * std::max(std::abs(y0[i]), std::abs(y1[i]));
      m = std::max(m, std::abs(err[i]) / scale);
    }
    return m;
  };

  std::vector<double> f0 = system.rhs(y);
  double h = options.initial_step;
  if (h <= 0.0) {
    double slope = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      slope = std::max(slope, std::abs(f0[i]) / (options.abs_tol + options.rel_tol * std::abs(y[i])));
    h = slope > 0.0 ? 0.8 * std::pow(options.rel_tol, 1.0 / 3.0) / slope : (t1 - t0);
    h = std::clamp(h, options.min_step, t1 - t0);
  }

  double t = t0;
  while (t < t1) {
    if (result.accepted + result.rejected >= options.max_steps)
      throw integration_error("stiff integrator: step budget exhausted");
    if (t + h > t1) h = t1 - t;
    const BandedMatrix jac = system.jacobian(y);
    BandedMatrix w(n, jac.lower(), jac.upper());
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = (j > jac.upper() ? j - jac.upper() : 0); i <= std::min(n - 1, j + jac.lower()); ++i)
        w.at(i, j) = (i == j ? 1.0 : 0.0) - h * d * jac.at(i, j);

    const std::vector<double> k1 = w.solve(f0);
    std::vector<double> tmp(n);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + 0.5 * h * k1[i];
    const std::vector<double> f1 = system.rhs(tmp);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = f1[i] - k1[i];
    std::vector<double> k2 = w.solve(tmp);
    for (std::size_t i = 0; i < n; ++i) k2[i] += k1[i];
    std::vector<double> y_new(n);
    for (std::size_t i = 0; i < n; ++i) y_new[i] = y[i] + h * k2[i];
    const std::vector<double> f2 = system.rhs(y_new);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = f2[i] - e32 * (k2[i] - f1[i]) - 2.0 * (k1[i] - f0[i]);
    const std::vector<double> k3 = w.solve(tmp);
    std::vector<double> err(n);
    for (std::size_t i = 0; i < n; ++i) err[i] = h / 6.0 * (k1[i] - 2.0 * k2[i] + k3[i]);

    const double en = error_norm(err, y, y_new);
    if (en <= 1.0) {
      t = (t1 - t - h) <= 1e-14 * std::abs(t1) ? t1 : t + h;
      y = std::move(y_new);
      f0 = f2;
      ++result.accepted;
      if (observer) observer(t, y);
    } else {
      ++result.rejected;
    }
    const double factor = en == 0.0 ? 5.0 : std::clamp(0.8 * std::pow(en, -1.0 / 3.0), 0.2, 5.0);
    h *= factor;
    if (h < options.min_step && t < t1) throw integration_error("stiff integrator: step size underflow");
  }
  result.y = std::move(y);
  return result;
}

}  // namespace pnpflux
