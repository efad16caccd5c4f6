#pragma once

// Piecewise-linear Galerkin discretization of the steady PNP system
//
//   ∫ ε² h φ_h' v' - ∫ h (Σ z_i c_i,h + Q) v = 0
//   ∫ D_k h c_k,h (μ̄_k)' v' = 0          (μ̄_k = z_k φ + ln c_k [+ μ_k^HS])
//
// tested against interior hat functions, and a damped Newton solver for it.
// Unknowns are interleaved per node: (φ, c_1, ..., c_n).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pnpflux/banded.hpp"
#include "pnpflux/dual.hpp"
#include "pnpflux/error.hpp"
#include "pnpflux/model.hpp"
#include "pnpflux/quadrature.hpp"

namespace pnpflux {

class Mesh {
 public:
  Mesh() = default;
  explicit Mesh(std::vector<double> nodes) : nodes_(std::move(nodes)) {
    if (nodes_.size() < 3) throw validation_error("mesh: at least three nodes are required");
    if (nodes_.front() != 0.0 || nodes_.back() != 1.0) throw validation_error("mesh: endpoints must be 0 and 1");
    for (std::size_t j = 1; j < nodes_.size(); ++j)
      if (!(nodes_[j] > nodes_[j - 1])) throw monotonicity_error("mesh: nodes must be strictly increasing");
  }

  static Mesh uniform(std::size_t node_count) {
    if (node_count < 3) throw validation_error("mesh: at least three nodes are required");
    std::vector<double> x(node_count);
    for (std::size_t j = 0; j < node_count; ++j) x[j] = static_cast<double>(j) / static_cast<double>(node_count - 1);
    x.back() = 1.0;
    return Mesh(std::move(x));
  }

  std::size_t size() const { return nodes_.size(); }
  std::size_t element_count() const { return nodes_.size() - 1; }
  double operator[](std::size_t j) const { return nodes_[j]; }
  double width(std::size_t e) const { return nodes_[e + 1] - nodes_[e]; }
  const std::vector<double>& nodes() const { return nodes_; }

  friend bool operator==(const Mesh&, const Mesh&) = default;

 private:
  std::vector<double> nodes_;
};

/// Nodal potential and concentrations on a mesh.
struct DiscreteSolution {
  Mesh mesh;
  std::vector<double> potential;
  std::vector<std::vector<double>> concentration;  // [species][node]

  std::size_t species_count() const { return concentration.size(); }
  double min_concentration() const {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& c : concentration) m = std::min(m, *std::min_element(c.begin(), c.end()));
    return m;
  }
};

struct FluxReport {
  std::vector<std::vector<double>> element_flux;  // [species][element], midpoint formula
  std::vector<double> element_mean;               // width-weighted mean of element_flux
  std::vector<double> conservative;               // weak-form flux, constant across elements
  std::vector<double> flux;                       // representative value (one of the two above)
  std::vector<double> nonuniformity;              // (max - min)/|mean|
  double current = 0.0;                           // Σ z_k J_k

  double max_nonuniformity() const {
    return nonuniformity.empty() ? 0.0 : *std::max_element(nonuniformity.begin(), nonuniformity.end());
  }
};

struct SolverControls {
  double tolerance = 1e-10;       // on ‖F‖_∞
  double step_tolerance = 1e-12;  // RMS Newton correction (thermal units) treated as converged
  int max_iterations = 100;
  double monotonicity = 0.25;     // accept λ when |simplified correction| <= (1 - θλ)|Δ|
  double min_step = 1e-10;        // smallest accepted line-search factor
  int pseudo_transient_steps = 200;
  int continuation_steps = 8;     // rungs per ladder before subdivision
  int max_continuation_rungs = 64;
};

inline std::string format_residual(double r) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", r);
  return buf;
}

/// Raised when the nonlinear solver gives up; carries the best iterate seen.
class convergence_error : public error {
 public:
  convergence_error(const std::string& what, DiscreteSolution best, double residual)
      : error(what), best_(std::move(best)), residual_(residual) {}
  const DiscreteSolution& best_iterate() const { return best_; }
  double residual_norm() const { return residual_; }

 private:
  DiscreteSolution best_;
  double residual_;
};

/// Raised when damping cannot keep every concentration positive.
class positivity_error : public convergence_error {
 public:
  using convergence_error::convergence_error;
};

// ---------------------------------------------------------------------------

namespace detail {

inline void check_compatible(const PnpProblem& problem, const Mesh& mesh, const DiscreteSolution& state) {
  if (state.potential.size() != mesh.size() || state.concentration.size() != problem.species_count())
    throw validation_error("state does not match mesh or species count");
  for (const auto& c : state.concentration)
    if (c.size() != mesh.size()) throw validation_error("state does not match mesh");
}

inline constexpr std::size_t kMaxLocal = 16;
using LocalDual = Dual<kMaxLocal>;

/// Residual contributions of one element to the equations tested with its two
/// hat functions. `left`/`right` hold (φ, c_1..c_n) at the element end nodes;
/// `mu_excess_*` the nodal hard-sphere potentials (ignored for the ideal model).
/// Output layout: [left node fields..., right node fields...]. When `magnitude`
/// is non-null the absolute sizes of the individual terms are accumulated there.
template <class T>
void element_residual(const PnpProblem& problem, double xa, double xb, std::span<const T> left,
                      std::span<const T> right, std::span<const T> mu_excess_left,
                      std::span<const T> mu_excess_right, std::span<T> out, double* magnitude = nullptr) {
  using Rule = quadrature::GaussLegendre<2>;
  const std::size_t n = problem.species_count();
  const std::size_t fields = n + 1;
  const double width = xb - xa;
  const double dpsi_a = -1.0 / width;
  const double dpsi_b = 1.0 / width;
  const double eps2 = problem.epsilon() * problem.epsilon();
  const bool hs = problem.hard_sphere();

  for (std::size_t i = 0; i < 2 * fields; ++i) out[i] = T(0.0);

  const T dphi = (right[0] - left[0]) / width;

  for (std::size_t q = 0; q < 2; ++q) {
    const double s = 0.5 * (1.0 + Rule::nodes[q]);  // local coordinate in [0, 1]
    const double x = xa + s * width;
    const double w = 0.5 * width * Rule::weights[q];
    const double psi_a = 1.0 - s;
    const double psi_b = s;
    const double h = problem.geometry().area(x);
    const double fixed = problem.charge().density(x);

    T charge = T(fixed);
    double charge_mag = std::abs(fixed);
    for (std::size_t k = 0; k < n; ++k) {
      const T ck = psi_a * left[k + 1] + psi_b * right[k + 1];
      charge = charge + ck * static_cast<double>(problem.species()[k].valence);
      charge_mag += std::abs(value_of(ck) * problem.species()[k].valence);
    }
    // Poisson rows
    const T stiff = dphi * (eps2 * h * w);
    out[0] = out[0] + stiff * dpsi_a - charge * (w * h * psi_a);
    out[fields] = out[fields] + stiff * dpsi_b - charge * (w * h * psi_b);
    if (magnitude) {
      magnitude[0] += std::abs(value_of(stiff) * dpsi_a) + w * h * psi_a * charge_mag;
      magnitude[fields] += std::abs(value_of(stiff) * dpsi_b) + w * h * psi_b * charge_mag;
    }

    // Nernst-Planck rows
    for (std::size_t k = 0; k < n; ++k) {
      const auto& sp = problem.species()[k];
      const T ck = psi_a * left[k + 1] + psi_b * right[k + 1];
      const T dck = (right[k + 1] - left[k + 1]) / width;
      T drift = ck * dphi * static_cast<double>(sp.valence);
      if (hs) drift = drift + ck * (mu_excess_right[k] - mu_excess_left[k]) / width;
      const T integrand = (drift + dck) * (w * sp.diffusion * h);
      out[k + 1] = out[k + 1] + integrand * dpsi_a;
      out[fields + k + 1] = out[fields + k + 1] + integrand * dpsi_b;
      if (magnitude) {
        const double m = (std::abs(value_of(drift)) + std::abs(value_of(dck))) * w * sp.diffusion * h / width;
        magnitude[k + 1] += m;
        magnitude[fields + k + 1] += m;
      }
    }
  }
}

/// Nodal hard-sphere potentials for the given nodal concentrations (scalar type T).
template <class T>
std::vector<T> nodal_excess(const PnpProblem& problem, std::span<const T> node_fields) {
  const std::size_t n = problem.species_count();
  std::vector<T> mu(n, T(0.0));
  if (!problem.hard_sphere()) return mu;
  std::vector<T> c(node_fields.begin() + 1, node_fields.begin() + 1 + static_cast<std::ptrdiff_t>(n));
  for (std::size_t k = 0; k < n; ++k) mu[k] = mu_hard_sphere<T>(k, c, problem.radii());
  return mu;
}

inline std::vector<double> node_fields(const DiscreteSolution& s, std::size_t j) {
  std::vector<double> u(s.concentration.size() + 1);
  u[0] = s.potential[j];
  for (std::size_t k = 0; k < s.concentration.size(); ++k) u[k + 1] = s.concentration[k][j];
  return u;
}

}  // namespace detail

/// Number of interior unknowns (n+1)(N_v-2).
inline std::size_t unknown_count(const PnpProblem& problem, const Mesh& mesh) {
  return (problem.species_count() + 1) * (mesh.size() - 2);
}

struct ResidualEvaluation {
  std::vector<double> residual;
  std::vector<double> magnitude;  // per-row sum of absolute term sizes
};

/// Galerkin residual over interior test functions, row (j-1)(n+1)+f for node j, field f.
inline ResidualEvaluation evaluate_residual(const PnpProblem& problem, const DiscreteSolution& state) {
  const Mesh& mesh = state.mesh;
  detail::check_compatible(problem, mesh, state);
  const std::size_t fields = problem.species_count() + 1;
  const std::size_t nv = mesh.size();
  ResidualEvaluation result{std::vector<double>(unknown_count(problem, mesh), 0.0),
                            std::vector<double>(unknown_count(problem, mesh), 0.0)};
  std::vector<double> out(2 * fields), mag(2 * fields);

  std::vector<double> ua = detail::node_fields(state, 0);
  std::vector<double> mua = detail::nodal_excess<double>(problem, ua);
  for (std::size_t e = 0; e + 1 < nv; ++e) {
    std::vector<double> ub = detail::node_fields(state, e + 1);
    std::vector<double> mub = detail::nodal_excess<double>(problem, ub);
    std::fill(mag.begin(), mag.end(), 0.0);
    detail::element_residual<double>(problem, mesh[e], mesh[e + 1], ua, ub, mua, mub, out, mag.data());
    for (std::size_t side = 0; side < 2; ++side) {
      const std::size_t node = e + side;
      if (node == 0 || node == nv - 1) continue;
      for (std::size_t f = 0; f < fields; ++f) {
        result.residual[(node - 1) * fields + f] += out[side * fields + f];
        result.magnitude[(node - 1) * fields + f] += mag[side * fields + f];
      }
    }
    ua = std::move(ub);
    mua = std::move(mub);
  }
  return result;
}

inline std::vector<double> assemble_residual(const PnpProblem& problem, const Mesh& mesh,
                                             const DiscreteSolution& state) {
  if (!(state.mesh == mesh)) throw validation_error("assemble_residual: state lives on a different mesh");
  for (const auto& c : state.concentration)
    for (double v : c)
      if (!(v > 0.0)) throw domain_error("assemble_residual: concentrations must be positive");
  return evaluate_residual(problem, state).residual;
}

/// Exact Jacobian of assemble_residual with respect to the interior unknowns,
/// obtained with forward-mode dual numbers. Band width 2(n+1)-1 on both sides.
inline BandedMatrix assemble_jacobian(const PnpProblem& problem, const DiscreteSolution& state) {
  using T = detail::LocalDual;
  const Mesh& mesh = state.mesh;
  detail::check_compatible(problem, mesh, state);
  const std::size_t fields = problem.species_count() + 1;
  if (2 * fields > detail::kMaxLocal) throw validation_error("too many species for the element Jacobian");
  const std::size_t nv = mesh.size();
  const std::size_t band = 2 * fields - 1;
  BandedMatrix jac(unknown_count(problem, mesh), band, band);

  auto local = [&](std::size_t node, std::size_t side) {
    std::vector<T> u(fields);
    const bool variable = node != 0 && node != nv - 1;
    u[0] = variable ? T::variable(state.potential[node], side * fields, 2 * fields) : T(state.potential[node]);
    for (std::size_t k = 0; k + 1 < fields; ++k) {
      const double c = state.concentration[k][node];
      u[k + 1] = variable ? T::variable(c, side * fields + k + 1, 2 * fields) : T(c);
    }
    return u;
  };

  std::vector<T> out(2 * fields);
  for (std::size_t e = 0; e + 1 < nv; ++e) {
    const auto ua = local(e, 0);
    const auto ub = local(e + 1, 1);
    const auto mua = detail::nodal_excess<T>(problem, ua);
    const auto mub = detail::nodal_excess<T>(problem, ub);
    detail::element_residual<T>(problem, mesh[e], mesh[e + 1], ua, ub, mua, mub, out);
    for (std::size_t row_side = 0; row_side < 2; ++row_side) {
      const std::size_t row_node = e + row_side;
      if (row_node == 0 || row_node == nv - 1) continue;
      for (std::size_t f = 0; f < fields; ++f) {
        const T& r = out[row_side * fields + f];
        for (std::size_t col_side = 0; col_side < 2; ++col_side) {
          const std::size_t col_node = e + col_side;
          if (col_node == 0 || col_node == nv - 1) continue;
          for (std::size_t g = 0; g < fields; ++g) {
            const std::size_t slot = col_side * fields + g;
            if (slot >= r.active) continue;
            jac.add((row_node - 1) * fields + f, (col_node - 1) * fields + g, r.grad[slot]);
          }
        }
      }
    }
  }
  return jac;
}

// ---------------------------------------------------------------------------

/// Linear potential from V to 0 and linear concentrations from L_k to R_k.
inline DiscreteSolution initial_guess(const PnpProblem& problem, const Mesh& mesh) {
  const auto& bc = problem.bc();
  DiscreteSolution s{mesh, std::vector<double>(mesh.size()), {}};
  for (std::size_t j = 0; j < mesh.size(); ++j) s.potential[j] = bc.voltage * (1.0 - mesh[j]);
  s.potential.back() = 0.0;
  for (std::size_t k = 0; k < problem.species_count(); ++k) {
    std::vector<double> c(mesh.size());
    for (std::size_t j = 0; j < mesh.size(); ++j) c[j] = bc.left[k] + (bc.right[k] - bc.left[k]) * mesh[j];
    c.front() = bc.left[k];
    c.back() = bc.right[k];
    s.concentration.push_back(std::move(c));
  }
  return s;
}

/// Overwrites the boundary nodes with the Dirichlet data of `problem`.
inline void impose_boundary_values(const PnpProblem& problem, DiscreteSolution& s) {
  s.potential.front() = problem.bc().voltage;
  s.potential.back() = 0.0;
  for (std::size_t k = 0; k < problem.species_count(); ++k) {
    s.concentration[k].front() = problem.bc().left[k];
    s.concentration[k].back() = problem.bc().right[k];
  }
}

/// Piecewise-linear transfer of nodal values onto another mesh over [0, 1].
inline std::vector<double> interpolate_nodal(const Mesh& from, std::span<const double> values, const Mesh& to) {
  std::vector<double> out(to.size());
  std::size_t e = 0;
  for (std::size_t j = 0; j < to.size(); ++j) {
    const double x = to[j];
    while (e + 2 < from.size() && from[e + 1] < x) ++e;
    const double s = std::clamp((x - from[e]) / from.width(e), 0.0, 1.0);
    out[j] = values[e] + s * (values[e + 1] - values[e]);  // exact for constant data
  }
  return out;
}

inline DiscreteSolution interpolate_solution(const DiscreteSolution& s, const Mesh& to) {
  DiscreteSolution out{to, interpolate_nodal(s.mesh, s.potential, to), {}};
  for (const auto& c : s.concentration) out.concentration.push_back(interpolate_nodal(s.mesh, c, to));
  return out;
}

// ---------------------------------------------------------------------------

struct NewtonReport {
  int iterations = 0;
  double residual = 0.0;
  bool used_pseudo_transient = false;
};

namespace detail {

inline double inf_norm(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

inline double two_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// Converged when every row is below the tolerance or, for rows whose terms
/// cancel, below a multiple of their floating-point floor.
inline bool residual_converged(const ResidualEvaluation& r, double tolerance) {
  constexpr double floor_factor = 256.0 * std::numeric_limits<double>::epsilon();
  for (std::size_t i = 0; i < r.residual.size(); ++i)
    if (!(std::abs(r.residual[i]) <= std::max(tolerance, floor_factor * r.magnitude[i]))) return false;
  return true;
}

/// Newton update in the variables (φ, η_k) with η_k = z_k φ + ln c_k, so that
/// c_k = exp(η_k - z_k φ) stays positive for any step length.
inline DiscreteSolution apply_log_step(const PnpProblem& problem, const DiscreteSolution& s,
                                       std::span<const double> step, double factor) {
  DiscreteSolution out = s;
  const std::size_t fields = s.species_count() + 1;
  for (std::size_t j = 1; j + 1 < s.mesh.size(); ++j) {
    const double dphi = factor * step[(j - 1) * fields];
    out.potential[j] += dphi;
    for (std::size_t k = 0; k + 1 < fields; ++k) {
      const double z = problem.species()[k].valence;
      const double dlog = factor * step[(j - 1) * fields + k + 1] - z * dphi;
      out.concentration[k][j] *= std::exp(std::min(dlog, 50.0));
    }
  }
  return out;
}

/// Rewrites a Jacobian with respect to (φ, c_k) into one with respect to (φ, η_k):
/// ∂/∂φ|_η = ∂/∂φ|_c - Σ z_k c_k ∂/∂c_k and ∂/∂η_k = c_k ∂/∂c_k.
inline void to_log_variables(const PnpProblem& problem, const DiscreteSolution& s, BandedMatrix& jac) {
  const std::size_t fields = s.species_count() + 1;
  const std::size_t n = jac.size();
  for (std::size_t j = 1; j + 1 < s.mesh.size(); ++j) {
    const std::size_t col = (j - 1) * fields;
    const std::size_t first = col > jac.upper() ? col - jac.upper() : 0;
    const std::size_t last = std::min(n - 1, col + fields - 1 + jac.lower());
    for (std::size_t i = first; i <= last; ++i) {
      double dphi = jac.in_band(i, col) ? jac.at(i, col) : 0.0;
      for (std::size_t k = 0; k + 1 < fields; ++k) {
        if (!jac.in_band(i, col + k + 1)) continue;
        const double c = s.concentration[k][j];
        double& entry = jac.at(i, col + k + 1);
        dphi -= problem.species()[k].valence * c * entry;
        entry *= c;
      }
      if (jac.in_band(i, col)) jac.at(i, col) = dphi;
    }
  }
}

/// Lumped mass h·|support|/2 per interior node, used to regularize pseudo-transient steps.
inline std::vector<double> lumped_mass(const PnpProblem& problem, const Mesh& mesh) {
  const std::size_t fields = problem.species_count() + 1;
  std::vector<double> m(unknown_count(problem, mesh));
  for (std::size_t j = 1; j + 1 < mesh.size(); ++j) {
    const double support = 0.5 * (mesh[j + 1] - mesh[j - 1]);
    const double w = problem.geometry().area(mesh[j]) * support;
    for (std::size_t f = 0; f < fields; ++f) m[(j - 1) * fields + f] = w;
  }
  return m;
}

}  // namespace detail

/// Damped Newton iteration in the variables (φ, η_k). When the line search
/// stalls the solver switches to pseudo-transient continuation
/// (J + M/Δt) δ = -F with switched-evolution relaxation of Δt, then resumes Newton.
inline DiscreteSolution solve_nonlinear(const PnpProblem& problem, const Mesh& mesh, const DiscreteSolution& guess,
                                        const SolverControls& controls = {}, NewtonReport* report = nullptr) {
  if (!(controls.tolerance > 0.0) || controls.max_iterations < 1)
    throw validation_error("solver controls: tolerance must be positive and max_iterations >= 1");
  if (!(guess.mesh == mesh)) throw validation_error("solve_nonlinear: guess lives on a different mesh");
  detail::check_compatible(problem, mesh, guess);
  if (guess.min_concentration() <= 0.0) throw validation_error("solve_nonlinear: guess must be positive");

  DiscreteSolution state = guess;
  impose_boundary_values(problem, state);
  ResidualEvaluation eval = evaluate_residual(problem, state);
  double norm2 = detail::two_norm(eval.residual);
  DiscreteSolution best = state;
  double best_inf = detail::inf_norm(eval.residual);

  NewtonReport local_report;
  int pseudo_budget = controls.pseudo_transient_steps;
  std::vector<double> mass;
  bool underflow = false;  // a trial concentration vanished in floating point
  double last_factor = 1.0;
  auto newton_matrix = [&](const DiscreteSolution& at) {
    BandedMatrix jac = assemble_jacobian(problem, at);
    detail::to_log_variables(problem, at, jac);
    return jac;
  };

  for (int it = 0;; ++it) {
    const double inf = detail::inf_norm(eval.residual);
    if (inf < best_inf) {
      best_inf = inf;
      best = state;
    }
    if (detail::residual_converged(eval, controls.tolerance)) {
      local_report.iterations = it;
      local_report.residual = inf;
      if (report) *report = local_report;
      return state;
    }
    if (it >= controls.max_iterations)
      throw convergence_error("Newton iteration did not converge (residual " + format_residual(best_inf) + ")",
                              best, best_inf);

    std::vector<double> rhs(eval.residual.size());
    for (std::size_t i = 0; i < rhs.size(); ++i) rhs[i] = -eval.residual[i];
    std::optional<BandedLU> lu;
    std::vector<double> step;
    try {
      lu.emplace(newton_matrix(state));
      step = lu->solve(rhs);
    } catch (const domain_error& e) {
      throw convergence_error(std::string("Newton matrix is singular or not finite: ") + e.what(), best, best_inf);
    }
    const double step_norm = detail::two_norm(step);
    if (!std::isfinite(step_norm))
      throw convergence_error("Newton correction is not finite (residual " + format_residual(best_inf) + ")", best,
                              best_inf);
    if (step_norm <= controls.step_tolerance * std::sqrt(static_cast<double>(step.size()))) {
      // The correction is at round-off level: the residual cannot be reduced further.
      DiscreteSolution trial = detail::apply_log_step(problem, state, step, 1.0);
      local_report.iterations = it + 1;
      local_report.residual = detail::inf_norm(evaluate_residual(problem, trial).residual);
      if (report) *report = local_report;
      return trial;
    }

    // Damping by the natural monotonicity test: the simplified correction
    // J(u)^{-1} F(u + λΔ) must shrink relative to Δ. Both φ and η are measured
    // in thermal units, so the test is insensitive to the scaling of the rows.
    double factor = std::min(1.0, 4.0 * last_factor);
    bool accepted = false;
    while (factor >= controls.min_step) {
      DiscreteSolution trial = detail::apply_log_step(problem, state, step, factor);
      double next_factor = 0.5 * factor;
      if (!(trial.min_concentration() > 0.0)) {
        underflow = true;
        factor = next_factor;
        continue;
      }
      try {
        ResidualEvaluation trial_eval = evaluate_residual(problem, trial);
        bool ok = detail::residual_converged(trial_eval, controls.tolerance);
        if (!ok && std::isfinite(detail::two_norm(trial_eval.residual))) {
          std::vector<double> r(trial_eval.residual.size());
          for (std::size_t i = 0; i < r.size(); ++i) r[i] = -trial_eval.residual[i];
          const std::vector<double> simplified = lu->solve(r);
          const double simplified_norm = detail::two_norm(simplified);
          ok = simplified_norm <= (1.0 - controls.monotonicity * factor) * step_norm;
          if (!ok) {
            // Curvature estimate from the deviation of the simplified correction.
            double dev = 0.0;
            for (std::size_t i = 0; i < step.size(); ++i) {
              const double d = simplified[i] - (1.0 - factor) * step[i];
              dev += d * d;
            }
            const double curvature = 2.0 * std::sqrt(dev) / (factor * factor * step_norm);
            if (curvature > 0.0) next_factor = std::clamp(1.0 / curvature, 0.1 * factor, 0.5 * factor);
          }
        }
        if (ok) {
          state = std::move(trial);
          eval = std::move(trial_eval);
          norm2 = detail::two_norm(eval.residual);
          accepted = true;
          break;
        }
      } catch (const domain_error&) {
        // e.g. hard-sphere packing >= 1 at the trial point
      }
      factor = next_factor;
    }
    if (accepted) last_factor = factor;
    if (accepted) continue;

    // Pseudo-transient continuation: (J + M/Δt) δ = -F.
    if (mass.empty()) mass = detail::lumped_mass(problem, mesh);
    local_report.used_pseudo_transient = true;
    const std::size_t fields = problem.species_count() + 1;
    double dt = 1e-3;
    double previous = norm2;
    bool progressed = false;
    while (pseudo_budget-- > 0) {
      BandedMatrix shifted = newton_matrix(state);
      for (std::size_t i = 0; i < mass.size(); ++i) {
        const std::size_t f = i % fields;
        const double scale = f == 0 ? 1.0 : state.concentration[f - 1][i / fields + 1];
        shifted.add(i, i, scale * mass[i] / dt);
      }
      std::vector<double> r(eval.residual.size());
      for (std::size_t i = 0; i < r.size(); ++i) r[i] = -eval.residual[i];
      std::vector<double> dstep;
      try {
        dstep = shifted.solve(r);
      } catch (const domain_error&) {
        dt *= 0.25;
        if (dt < 1e-14) break;
        continue;
      }
      DiscreteSolution trial = detail::apply_log_step(problem, state, dstep, 1.0);
      if (!(trial.min_concentration() > 0.0)) {
        underflow = true;
        dt *= 0.25;
        continue;
      }
      ResidualEvaluation trial_eval;
      try {
        trial_eval = evaluate_residual(problem, trial);
      } catch (const domain_error&) {
        dt *= 0.25;
        continue;
      }
      const double trial_norm = detail::two_norm(trial_eval.residual);
      if (!std::isfinite(trial_norm) || trial_norm > 10.0 * previous) {
        dt *= 0.25;
        if (dt < 1e-14) break;
        continue;
      }
      state = std::move(trial);
      eval = std::move(trial_eval);
      dt = std::min(dt * std::clamp(previous / trial_norm, 0.5, 10.0), 1e12);
      previous = trial_norm;
      norm2 = trial_norm;
      if (trial_norm < 0.5 * detail::two_norm(rhs)) {
        progressed = true;
        if (dt > 1e6) break;
      }
    }
    if (!progressed && underflow)
      throw positivity_error("damping cannot keep concentrations positive", best, best_inf);
    if (!progressed)
      throw convergence_error("line search and pseudo-transient continuation stalled (residual " +
                                  format_residual(best_inf) + ")",
                              best, best_inf);
  }
}

// ---------------------------------------------------------------------------
// Continuation

enum class ContinuationParameter { charge, voltage };

inline PnpProblem with_parameter(const PnpProblem& problem, ContinuationParameter which, double value) {
  return which == ContinuationParameter::charge ? problem.with_charge_amplitude(value) : problem.with_voltage(value);
}

/// Called after every converged rung; may move the state to another mesh.
using RungHook = std::function<DiscreteSolution(const PnpProblem&, DiscreteSolution)>;

struct ContinuationReport {
  int rungs = 0;       // converged rungs
  int failures = 0;    // rungs that had to be subdivided
};

/// Walks one parameter from `from` (where `start` is converged) to its value in
/// `target`. The charge ladder is geometric when it starts above zero and the
/// voltage ladder is linear; a failed rung is replaced by its midpoint.
inline DiscreteSolution continuation_ladder(const PnpProblem& target, ContinuationParameter which, double from,
                                            DiscreteSolution start, const SolverControls& controls,
                                            const RungHook& hook = {}, ContinuationReport* report = nullptr) {
  const double to = which == ContinuationParameter::charge ? target.charge().amplitude() : target.bc().voltage;
  const bool geometric = which == ContinuationParameter::charge && from > 0.0 && to > 0.0;
  // Step measured in log(parameter) for the geometric ladder.
  const double total = geometric ? std::log(to / from) : to - from;
  double step = total / std::max(1, controls.continuation_steps);

  ContinuationReport local;
  DiscreteSolution state = std::move(start);
  double current = from;
  int attempts = 0;
  while (current != to) {
    if (++attempts > controls.max_continuation_rungs)
      throw convergence_error("continuation ladder exhausted its rung budget", state,
                              std::numeric_limits<double>::quiet_NaN());
    double next = geometric ? current * std::exp(step) : current + step;
    if ((to - next) * (to - from) <= 0.0) next = to;
    const PnpProblem rung = with_parameter(target, which, next);
    try {
      DiscreteSolution solved = solve_nonlinear(rung, state.mesh, state, controls);
      state = hook ? hook(rung, std::move(solved)) : std::move(solved);
      current = next;
      ++local.rungs;
      step *= 1.5;
    } catch (const convergence_error&) {
      ++local.failures;
      step *= 0.5;
      if (std::abs(step) < 1e-8 * std::abs(total)) throw;
    }
  }
  if (report) {
    report->rungs += local.rungs;
    report->failures += local.failures;
  }
  return state;
}

/// Converged solution of `problem` on `mesh`: a cold solve, then on failure a
/// voltage ladder at zero charge followed by a charge ladder toward Q0.
inline DiscreteSolution solve_with_continuation(const PnpProblem& problem, const Mesh& mesh,
                                                const SolverControls& controls = {}, const RungHook& hook = {},
                                                ContinuationReport* report = nullptr) {
  // The cold attempt is cheap to abandon: the ladders below are the robust path.
  SolverControls cold = controls;
  cold.max_iterations = std::min(controls.max_iterations, 40);
  cold.pseudo_transient_steps = std::min(controls.pseudo_transient_steps, 40);
  try {
    return solve_nonlinear(problem, mesh, initial_guess(problem, mesh), cold);
  } catch (const convergence_error&) {
  }
  const double q = problem.charge().amplitude();
  const PnpProblem neutral = problem.with_charge_amplitude(0.0);
  DiscreteSolution base = [&] {
    if (q > 0.0) {
      try {
        return solve_nonlinear(neutral, mesh, initial_guess(neutral, mesh), cold);
      } catch (const convergence_error&) {
      }
    }
    const PnpProblem flat = neutral.with_voltage(0.0);
    DiscreteSolution zero = solve_nonlinear(flat, mesh, initial_guess(flat, mesh), controls);
    return continuation_ladder(neutral, ContinuationParameter::voltage, 0.0, std::move(zero), controls, hook, report);
  }();
  if (q == 0.0) return base;
  // The smallest rung is close enough to zero charge to be reached directly.
  const double first = q * std::pow(4.0, -(std::max(1, controls.continuation_steps) - 1));
  SolverControls single = controls;
  single.continuation_steps = 1;
  DiscreteSolution start = continuation_ladder(problem.with_charge_amplitude(first), ContinuationParameter::charge,
                                               0.0, std::move(base), single, hook, report);
  return continuation_ladder(problem, ContinuationParameter::charge, first, std::move(start), controls, hook, report);
}

// ---------------------------------------------------------------------------

/// Nodal μ̄_k = z_k φ + ln c_k (+ μ_k^HS for the hard-sphere model).
inline std::vector<std::vector<double>> electrochemical_profile(const PnpProblem& problem,
                                                                const DiscreteSolution& s) {
  const std::size_t n = problem.species_count();
  std::vector<std::vector<double>> mu(n, std::vector<double>(s.mesh.size()));
  for (std::size_t j = 0; j < s.mesh.size(); ++j) {
    std::vector<double> u = detail::node_fields(s, j);
    std::vector<double> excess = detail::nodal_excess<double>(problem, u);
    for (std::size_t k = 0; k < n; ++k)
      mu[k][j] = mu_ideal(problem.species()[k].valence, s.potential[j], s.concentration[k][j]) + excess[k];
  }
  return mu;
}

/// Weak-form flux of every element: -(1/Δx) ∫ D_k h c_k (μ̄_k)' over the element
/// with the quadrature of the residual. The Nernst-Planck rows of the
/// discrete system state exactly that these agree between neighbours.
inline std::vector<std::vector<double>> conservative_element_fluxes(const PnpProblem& problem,
                                                                    const DiscreteSolution& s) {
  const std::size_t n = problem.species_count();
  const std::size_t fields = n + 1;
  const Mesh& mesh = s.mesh;
  std::vector<std::vector<double>> flux(n, std::vector<double>(mesh.element_count()));
  std::vector<double> out(2 * fields);
  std::vector<double> ua = detail::node_fields(s, 0);
  std::vector<double> mua = detail::nodal_excess<double>(problem, ua);
  for (std::size_t e = 0; e < mesh.element_count(); ++e) {
    std::vector<double> ub = detail::node_fields(s, e + 1);
    std::vector<double> mub = detail::nodal_excess<double>(problem, ub);
    detail::element_residual<double>(problem, mesh[e], mesh[e + 1], ua, ub, mua, mub, out);
    for (std::size_t k = 0; k < n; ++k) flux[k][e] = out[k + 1];  // tested with the left hat, ψ' = -1/Δx
    ua = std::move(ub);
    mua = std::move(mub);
  }
  return flux;
}

enum class FluxEstimator { conservative, element_mean };

/// Per-element fluxes J_k = -D_k h(x_mid) c_k(x_mid) Δμ̄_k/Δx, their
/// nonuniformity, and the representative flux of each species: by default the
/// weak-form flux, otherwise the width-weighted mean of the per-element values.
inline FluxReport compute_fluxes(const PnpProblem& problem, const Mesh& mesh, const DiscreteSolution& s,
                                 FluxEstimator estimator = FluxEstimator::conservative) {
  if (!(s.mesh == mesh)) throw validation_error("compute_fluxes: solution lives on a different mesh");
  const std::size_t n = problem.species_count();
  const auto mu = electrochemical_profile(problem, s);
  const auto weak = conservative_element_fluxes(problem, s);
  FluxReport report;
  report.element_flux.assign(n, std::vector<double>(mesh.element_count()));
  for (std::size_t k = 0; k < n; ++k) {
    double weighted = 0.0, conserved = 0.0;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t e = 0; e < mesh.element_count(); ++e) {
      const double width = mesh.width(e);
      const double mid = 0.5 * (mesh[e] + mesh[e + 1]);
      const double c_mid = 0.5 * (s.concentration[k][e] + s.concentration[k][e + 1]);
      const double j = -problem.species()[k].diffusion * problem.geometry().area(mid) * c_mid *
                       (mu[k][e + 1] - mu[k][e]) / width;
      report.element_flux[k][e] = j;
      weighted += j * width;
      conserved += weak[k][e] * width;
      lo = std::min(lo, j);
      hi = std::max(hi, j);
    }
    report.element_mean.push_back(weighted);
    report.conservative.push_back(conserved);
    report.flux.push_back(estimator == FluxEstimator::conservative ? conserved : weighted);
    report.nonuniformity.push_back(weighted == 0.0 ? (hi == lo ? 0.0 : std::numeric_limits<double>::infinity())
                                                   : (hi - lo) / std::abs(weighted));
    report.current += problem.species()[k].valence * report.flux.back();
  }
  return report;
}

}  // namespace pnpflux
