#pragma once

// Closed-form small- and large-Q0 flux expansions for a cation/anion pair
// (z_1 = 1, z_2 = -1), the critical voltages and regime labels they imply, and
// the flux ratio λ_k = J_k(Q)/J_k(0).

#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "pnpflux/error.hpp"
#include "pnpflux/model.hpp"

namespace pnpflux {

// ---------------------------------------------------------------------------
// Small Q0

struct SmallQExpansion {
  double J10 = 0.0, J11 = 0.0, J20 = 0.0, J21 = 0.0;
  double A = 0.0, B = 0.0;

  double slope1() const { return J11 / J10; }  // dλ_1/dQ0 at Q0 = 0
  double slope2() const { return J21 / J20; }
};

namespace detail {

inline void require_boundary_data(double L, double R) {
  if (!(L > 0.0) || !(R > 0.0)) throw validation_error("boundary concentrations must be positive");
  if (L == R) throw degenerate_input_error("expansion is singular for L = R (ln L - ln R vanishes)");
}

/// A and B of the first-order expansion; B = 1 exactly when g(β) = 0.
inline std::pair<double, double> small_q_auxiliaries(double L, double R, const GeometryMoments& m) {
  const double a_mix = (1.0 - m.alpha) * L + m.alpha * R;
  const double b_mix = (1.0 - m.beta) * L + m.beta * R;
  const double A = (m.beta - m.alpha) * (L - R) * (L - R) / (a_mix * b_mix);
  const double B = std::log(L / R) * std::log(a_mix / b_mix) / A;
  return {A, B};
}

}  // namespace detail

/// Coefficients of J_k(Q0) = J_k0 + J_k1 Q0 + O(Q0²), Q0 being half the plateau of Q(x).
/// The first-order terms carry the factor -sgn(ln t): for L > R this is the sign
/// that makes λ_1 < 1 < λ_2 between the critical voltages, and for L < R it keeps
/// the sign the finite element solution shows.
inline SmallQExpansion small_q_expansion(double V, double L, double R, const GeometryMoments& m) {
  detail::require_boundary_data(L, R);
  m.validate();
  const double lr = std::log(L) - std::log(R);
  const auto [A, B] = detail::small_q_auxiliaries(L, R, m);
  SmallQExpansion e;
  e.A = A;
  e.B = B;
  e.J10 = (L - R) * (V + lr) / (m.H1 * lr);
  e.J20 = (L - R) * (-V + lr) / (m.H1 * lr);
  const double sign = lr > 0.0 ? -1.0 : 1.0;
  e.J11 = sign * A * ((B - 1.0) * V + lr) / (2.0 * m.H1 * lr * lr) * (V + lr);
  e.J21 = -sign * A * ((1.0 - B) * V + lr) / (2.0 * m.H1 * lr * lr) * (-V + lr);
  return e;
}

/// (V_1^0, V_2^0) where the small-Q0 slopes of λ_1 and λ_2 change sign.
inline std::pair<double, double> small_q_critical_voltages(double L, double R, const GeometryMoments& m, int z1 = 1,
                                                           int z2 = -1) {
  detail::require_boundary_data(L, R);
  m.validate();
  if (z1 == 0 || z2 == 0) throw validation_error("critical voltages need nonzero valences");
  const double B = detail::small_q_auxiliaries(L, R, m).second;
  if (B == 1.0) throw degenerate_input_error("critical voltages are undefined for B = 1");
  const double lr = std::log(L) - std::log(R);
  return {-lr / (z2 * (1.0 - B)), -lr / (z1 * (1.0 - B))};
}

/// γ(t) = (t ln t - t + 1)/((t - 1) ln t).
inline double gamma_threshold(double t) {
  if (!(t > 0.0)) throw validation_error("gamma_threshold: t must be positive");
  if (t == 1.0) throw degenerate_input_error("gamma_threshold: removable singularity at t = 1");
  const double lt = std::log(t);
  return (t * lt - t + 1.0) / ((t - 1.0) * lt);
}

inline double g_function(double beta, double t, double alpha) {
  const double a_mix = (1.0 - alpha) * t + alpha;
  const double b_mix = (1.0 - beta) * t + beta;
  return a_mix * b_mix * std::log(t) * std::log(b_mix / a_mix) + (beta - alpha) * (t - 1.0) * (t - 1.0);
}

namespace detail {

/// Bisection on a bracket [a, b] with f(a) f(b) < 0 down to |b - a| <= tol.
template <class F>
double bisect(F&& f, double a, double b, double tol) {
  double fa = f(a);
  const double fb = f(b);
  if (fa == 0.0) return a;
  if (fb == 0.0) return b;
  if ((fa > 0.0) == (fb > 0.0)) throw root_error("bisection: endpoints do not bracket a root");
  while (b - a > tol) {
    const double mid = 0.5 * (a + b);
    const double fm = f(mid);
    if (fm == 0.0) return mid;
    if ((fm > 0.0) == (fa > 0.0)) {
      a = mid;
      fa = fm;
    } else {
      b = mid;
    }
  }
  return 0.5 * (a + b);
}

}  // namespace detail

/// Unique root β_1 of g on (α, 1), which exists when α < γ(t).
inline double beta1_root(double t, double alpha, double tol = 1e-10) {
  if (!(alpha > 0.0) || !(alpha < 1.0)) throw validation_error("beta1_root: alpha must lie in (0, 1)");
  if (!(alpha < gamma_threshold(t))) throw root_error("beta1_root: no root in (alpha, 1) when alpha >= gamma(t)");
  auto g = [&](double b) { return g_function(b, t, alpha); };
  // g vanishes at β = α itself; start the bracket just inside.
  const double lo = alpha + 1e-9 * (1.0 - alpha);
  const double hi = 1.0;
  if ((g(lo) > 0.0) == (g(hi) > 0.0)) throw root_error("beta1_root: g does not change sign on (alpha, 1)");
  return detail::bisect(g, lo, hi, tol);
}

enum class RegimeLabel { I, II, III };  // I: 1 < λ1 < λ2, II: λ1 < 1 < λ2, III: λ1 < λ2 < 1

inline std::string to_string(RegimeLabel r) {
  switch (r) {
    case RegimeLabel::I: return "I";
    case RegimeLabel::II: return "II";
    case RegimeLabel::III: return "III";
  }
  return "?";
}

/// Small-Q0 region for t = L/R > 1 from the ordering of the critical voltages.
inline RegimeLabel classify_small_q(double V, double L, double R, const GeometryMoments& m) {
  detail::require_boundary_data(L, R);
  const double t = L / R;
  if (!(t > 1.0)) throw unsupported_case_error("classify_small_q: only L > R is covered");
  const auto [v1, v2] = small_q_critical_voltages(L, R, m);
  const bool first_case = m.alpha < gamma_threshold(t) && m.beta < beta1_root(t, m.alpha);
  if (first_case) {  // V_1^0 < 0 < V_2^0
    if (V < v1) return RegimeLabel::I;
    if (V > v2) return RegimeLabel::III;
    return RegimeLabel::II;
  }
  if (V > v1) return RegimeLabel::I;  // V_2^0 < 0 < V_1^0
  if (V < v2) return RegimeLabel::III;
  return RegimeLabel::II;
}

// ---------------------------------------------------------------------------
// Large Q0

struct LargeQExpansion {
  double J10 = 0.0, J11 = 0.0, J20 = 0.0, J21 = 0.0;

  double flux1(double nu) const { return J10 + J11 * nu; }  // ν = 1/Q0
  double flux2(double nu) const { return J20 + J21 * nu; }
};

/// Coefficients of J_k(ν) = J_k0 + J_k1 ν + O(ν²), ν = 1/Q0.
inline LargeQExpansion large_q_expansion(double V, double L, double R, const GeometryMoments& m) {
  if (!(L > 0.0) || !(R > 0.0)) throw validation_error("boundary concentrations must be positive");
  m.validate();
  const double a = m.alpha, b = m.beta, H = m.H1;
  const double eV = std::exp(V);
  const double sL = std::sqrt(L), sR = std::sqrt(R);
  const double gap = std::sqrt(L / eV) - sR;  // √(e^{-V} L) - √R
  // Round-off in e^V keeps gap from being exactly zero at V = ln(L/R).
  if (std::abs(gap) <= 1e-13 * sR) throw degenerate_input_error("large_q_expansion: J21 is singular at V = ln(L/R)");
  const double den = (1.0 - b) * std::sqrt(eV * L) + a * sR;
  const double mix = (1.0 - b) * L + a * R;
  const double drive = eV * L - R;

  LargeQExpansion e;
  e.J10 = 0.0;
  e.J11 = 1.0 / (2.0 * H * (b - a)) * (mix / den) * (mix / den) * drive;
  e.J20 = 2.0 * std::sqrt(L * R) / H / ((1.0 - b) * sL + a * std::sqrt(R / eV)) * gap;
  e.J21 = -(b - a) * eV * L * R * mix / (H * den * den * den) * gap +
          drive * (-V + std::log(L) - std::log(R)) * mix * mix * mix / (4.0 * (b - a) * H * gap * den * den * den) -
          drive / (2.0 * (b - a) * H) * (mix / den) * (mix / den);
  return e;
}

/// Leading-order λ_2 for large Q0: J_20^∞ / J_20^0 written in t = L/R.
inline double lambda2_large_q_limit(double V, double t, double alpha, double beta) {
  if (!(t > 0.0)) throw validation_error("lambda2_large_q_limit: t must be positive");
  if (t == 1.0) throw degenerate_input_error("lambda2_large_q_limit: singular at t = 1");
  const double lt = std::log(t);
  if (V == lt) throw degenerate_input_error("lambda2_large_q_limit: singular at V = ln t");
  const double s = std::sqrt(std::exp(V) * t);
  return 2.0 * (t - s) * lt / ((t - 1.0) * ((1.0 - beta) * s + alpha) * (lt - V));
}

/// (V_1^∞, V_2^∞): the two roots of λ_2^∞(V) = 1 in [-200, 200], increasing.
inline std::pair<double, double> large_q_critical_voltages(double L, double R, const GeometryMoments& m,
                                                           double tol = 1e-6) {
  detail::require_boundary_data(L, R);
  m.validate();
  const double t = L / R;
  const double lt = std::log(t);
  auto excess = [&](double V) {
    // The singularity at V = ln t is removable; step off it.
    if (std::abs(V - lt) < 1e-9) V = lt + 1e-9;
    return lambda2_large_q_limit(V, t, m.alpha, m.beta) - 1.0;
  };
  constexpr int samples = 4000;
  constexpr double lo = -200.0, hi = 200.0;
  std::vector<std::pair<double, double>> brackets;
  double prev_v = lo, prev_f = excess(lo);
  for (int i = 1; i <= samples; ++i) {
    const double v = lo + (hi - lo) * i / samples;
    const double f = excess(v);
    if ((f > 0.0) != (prev_f > 0.0)) brackets.emplace_back(prev_v, v);
    prev_v = v;
    prev_f = f;
  }
  if (brackets.size() != 2)
    throw root_error("large_q_critical_voltages: expected 2 roots of lambda2 = 1 in [-200, 200], found " +
                     std::to_string(brackets.size()));
  return {detail::bisect(excess, brackets[0].first, brackets[0].second, tol),
          detail::bisect(excess, brackets[1].first, brackets[1].second, tol)};
}

// ---------------------------------------------------------------------------

inline constexpr double kMinReferenceFlux = 1e-14;

/// λ_k = J_k(Q)/J_k(0).
inline double flux_ratio(double j_at_q, double j_at_zero) {
  if (!(std::abs(j_at_zero) >= kMinReferenceFlux))
    throw degenerate_input_error("flux_ratio: reference flux vanishes (boundary data at electrochemical equilibrium)");
  return j_at_q / j_at_zero;
}

/// Region of a computed (λ_1, λ_2) pair; ties at 1 go to region II.
inline RegimeLabel classify_ratios(double lambda1, double lambda2) {
  if (lambda1 > 1.0) return RegimeLabel::I;
  if (lambda2 < 1.0) return RegimeLabel::III;
  return RegimeLabel::II;
}

}  // namespace pnpflux
