#pragma once

// One-dimensional MMPDE mesh adaptation: monitor functions built from a
// least-squares estimate of φ'', the equidistribution energy I_h and its
// gradient flow in computational coordinates, and recovery of the physical mesh.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "pnpflux/banded.hpp"
#include "pnpflux/error.hpp"
#include "pnpflux/fem.hpp"
#include "pnpflux/stiff_ode.hpp"

namespace pnpflux {

enum class MonitorVariant { optimal, boundary_weighted };

struct MonitorConfig {
  MonitorVariant variant = MonitorVariant::boundary_weighted;
  int smoothing_passes = 0;  // (1,2,1)/4 sweeps over the element values
};

/// Piecewise-constant mesh density ρ_{I_j} on the elements of a mesh.
struct MonitorSamples {
  std::vector<double> values;
  double total = 0.0;  // σ_h = Σ ρ_{I_j} Δx_j
};

inline MonitorSamples make_monitor_samples(const Mesh& mesh, std::vector<double> values) {
  if (values.size() != mesh.element_count()) throw validation_error("monitor: one value per element is required");
  MonitorSamples s{std::move(values), 0.0};
  for (std::size_t e = 0; e < mesh.element_count(); ++e) {
    if (!(s.values[e] > 0.0)) throw validation_error("monitor: density must be positive");
    s.total += s.values[e] * mesh.width(e);
  }
  return s;
}

/// φ'' at every node from a least-squares quadratic through a 5-node stencil,
/// centered where possible and shifted one-sided at the ends.
inline std::vector<double> second_derivative_estimate(const Mesh& mesh, std::span<const double> phi) {
  const std::size_t nv = mesh.size();
  if (nv < 5) throw validation_error("second_derivative_estimate: at least five nodes are required");
  if (phi.size() != nv) throw validation_error("second_derivative_estimate: size mismatch");
  std::vector<double> out(nv);
  for (std::size_t j = 0; j < nv; ++j) {
    const std::size_t first = std::min(j >= 2 ? j - 2 : 0, nv - 5);
    const double scale = mesh[first + 4] - mesh[first];
    // Normal equations for p(t) = a + b t + c t², t = (x - x_j)/scale.
    std::array<std::array<double, 4>, 3> m{};
    for (std::size_t i = first; i < first + 5; ++i) {
      const double t = (mesh[i] - mesh[j]) / scale;
      const std::array<double, 3> basis{1.0, t, t * t};
      for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 3; ++c) m[r][c] += basis[r] * basis[c];
        m[r][3] += basis[r] * phi[i];
      }
    }
    for (std::size_t col = 0; col < 3; ++col) {
      std::size_t pivot = col;
      for (std::size_t r = col + 1; r < 3; ++r)
        if (std::abs(m[r][col]) > std::abs(m[pivot][col])) pivot = r;
      std::swap(m[col], m[pivot]);
      if (std::abs(m[col][col]) < 1e-300) throw domain_error("second_derivative_estimate: singular fit");
      for (std::size_t r = col + 1; r < 3; ++r) {
        const double f = m[r][col] / m[col][col];
        for (std::size_t c = col; c < 4; ++c) m[r][c] -= f * m[col][c];
      }
    }
    const double c2 = m[2][3] / m[2][2];
    out[j] = 2.0 * c2 / (scale * scale);
  }
  return out;
}

/// Nodal density ρ(x_j); the per-element value is the mean of the two end nodes.
inline std::vector<double> monitor_nodal(const Mesh& mesh, std::span<const double> phi_xx, const MonitorConfig& config) {
  const std::size_t nv = mesh.size();
  std::vector<double> base(nv);
  for (std::size_t j = 0; j < nv; ++j) base[j] = std::cbrt(1.0 + phi_xx[j] * phi_xx[j]);  // (1+|φ''|²)^{1/3}
  if (config.variant == MonitorVariant::optimal) return base;
  double peak = 0.0;
  for (double b : base) peak = std::max(peak, b * b);
  const double floor = 4.0 / peak;
  std::vector<double> rho(nv);
  for (std::size_t j = 0; j < nv; ++j) {
    const double x = mesh[j];
    const double a = std::expm1(4.0 * (x - kNeckBegin) * (x - kNeckBegin));
    const double b = std::expm1(4.0 * (x - kNeckEnd) * (x - kNeckEnd));
    rho[j] = std::sqrt(base[j] * base[j] + 1.0 / (a + floor) + 1.0 / (b + floor));
  }
  return rho;
}

inline MonitorSamples monitor(const Mesh& mesh, std::span<const double> phi_xx, const MonitorConfig& config = {}) {
  if (phi_xx.size() != mesh.size()) throw validation_error("monitor: size mismatch");
  const auto nodal = monitor_nodal(mesh, phi_xx, config);
  std::vector<double> values(mesh.element_count());
  for (std::size_t e = 0; e < values.size(); ++e) values[e] = 0.5 * (nodal[e] + nodal[e + 1]);
  for (int pass = 0; pass < config.smoothing_passes; ++pass) {
    std::vector<double> smooth(values.size());
    for (std::size_t e = 0; e < values.size(); ++e) {
      const double left = values[e == 0 ? 0 : e - 1];
      const double right = values[e + 1 == values.size() ? e : e + 1];
      smooth[e] = 0.25 * (left + 2.0 * values[e] + right);
    }
    values = std::move(smooth);
  }
  return make_monitor_samples(mesh, std::move(values));
}

// ---------------------------------------------------------------------------

/// I_h = ½ Σ_j (ξ_{j+1}-ξ_j)² / (ρ_{I_j} Δx_j).
inline double mesh_energy(std::span<const double> x, std::span<const double> xi, const MonitorSamples& rho) {
  double energy = 0.0;
  for (std::size_t e = 0; e + 1 < x.size(); ++e) {
    const double dx = x[e + 1] - x[e];
    const double dxi = xi[e + 1] - xi[e];
    energy += dxi * dxi / (rho.values[e] * dx);
  }
  return 0.5 * energy;
}

/// ∂I_h/∂ξ_j for the interior nodes j = 2..N_v-1 (returned with N_v-2 entries).
inline std::vector<double> energy_gradient(std::span<const double> x, std::span<const double> xi,
                                           const MonitorSamples& rho) {
  const std::size_t nv = x.size();
  std::vector<double> g(nv - 2);
  for (std::size_t j = 1; j + 1 < nv; ++j) {
    const double left = (xi[j] - xi[j - 1]) / (rho.values[j - 1] * (x[j] - x[j - 1]));
    const double right = (xi[j + 1] - xi[j]) / (rho.values[j] * (x[j + 1] - x[j]));
    g[j - 1] = left - right;
  }
  return g;
}

struct GradientFlowOptions {
  double end_time = 10.0;
  double rel_tol = 1e-6;
  double abs_tol = 1e-9;
  /// dξ/dt = -mobility · ∂I_h/∂ξ. A non-positive value selects the scale-free
  /// mobility (N_v-1)·σ_h, under which the slowest mode of the flow at the
  /// equidistributed state decays like exp(-π² t) independently of N_v and of
  /// the magnitude of ρ.
  double mobility = 0.0;
};

inline double effective_mobility(const Mesh& mesh, const MonitorSamples& rho, const GradientFlowOptions& options) {
  return options.mobility > 0.0 ? options.mobility : static_cast<double>(mesh.element_count()) * rho.total;
}

namespace detail {

struct MeshGradientFlow {
  const Mesh& mesh;
  const MonitorSamples& rho;
  double mobility;

  // Interior unknowns ξ_2..ξ_{N_v-1}; ξ_1 = 0 and ξ_{N_v} = 1 are fixed.
  std::vector<double> full(const std::vector<double>& interior) const {
    std::vector<double> xi(mesh.size());
    xi.front() = 0.0;
    xi.back() = 1.0;
    std::copy(interior.begin(), interior.end(), xi.begin() + 1);
    return xi;
  }
  std::vector<double> rhs(const std::vector<double>& interior) const {
    auto g = energy_gradient(mesh.nodes(), full(interior), rho);
    for (double& v : g) v *= -mobility;
    return g;
  }
  BandedMatrix jacobian(const std::vector<double>&) const {
    const std::size_t n = mesh.size() - 2;
    BandedMatrix jac(n, 1, 1);
    for (std::size_t i = 0; i < n; ++i) {
      const double left = 1.0 / (rho.values[i] * mesh.width(i));
      const double right = 1.0 / (rho.values[i + 1] * mesh.width(i + 1));
      jac.at(i, i) = -mobility * (left + right);
      if (i > 0) jac.at(i, i - 1) = mobility * left;
      if (i + 1 < n) jac.at(i, i + 1) = mobility * right;
    }
    return jac;
  }
};

inline void require_increasing(std::span<const double> v, const char* what) {
  for (std::size_t j = 1; j < v.size(); ++j)
    if (!(v[j] > v[j - 1])) throw monotonicity_error(std::string(what) + ": lost strict monotonicity");
}

}  // namespace detail

/// Integrates the gradient flow of I_h in ξ from the uniform reference mesh.
/// `observer(t, ξ)` sees the full computational mesh after each accepted step.
inline std::vector<double> evolve_computational_mesh(
    const Mesh& mesh, const MonitorSamples& rho, const GradientFlowOptions& options = {},
    const std::function<void(double, const std::vector<double>&)>& observer = {}) {
  if (rho.values.size() != mesh.element_count()) throw validation_error("evolve: monitor does not match mesh");
  const detail::MeshGradientFlow flow{mesh, rho, effective_mobility(mesh, rho, options)};
  std::vector<double> interior(mesh.size() - 2);
  for (std::size_t j = 0; j < interior.size(); ++j)
    interior[j] = static_cast<double>(j + 1) / static_cast<double>(mesh.size() - 1);
  StiffOptions ode;
  ode.rel_tol = options.rel_tol;
  ode.abs_tol = options.abs_tol;
  std::function<void(double, const std::vector<double>&)> wrapped;
  if (observer) wrapped = [&](double t, const std::vector<double>& y) { observer(t, flow.full(y)); };
  const StiffResult result = integrate_rosenbrock23(flow, 0.0, options.end_time, std::move(interior), ode, wrapped);
  std::vector<double> xi = flow.full(result.y);
  detail::require_increasing(xi, "evolve_computational_mesh");
  return xi;
}

/// x_new(ξ̂_j) from the piecewise-linear correspondence ξ_new ↦ x_old.
inline Mesh recover_physical_mesh(const Mesh& old_mesh, std::span<const double> xi_new) {
  const std::size_t nv = old_mesh.size();
  if (xi_new.size() != nv) throw validation_error("recover_physical_mesh: size mismatch");
  detail::require_increasing(xi_new, "recover_physical_mesh");
  std::vector<double> x(nv);
  std::size_t e = 0;
  for (std::size_t j = 0; j < nv; ++j) {
    const double ref = static_cast<double>(j) / static_cast<double>(nv - 1);
    while (e + 2 < nv && xi_new[e + 1] < ref) ++e;
    const double s = (ref - xi_new[e]) / (xi_new[e + 1] - xi_new[e]);
    x[j] = old_mesh[e] + s * (old_mesh[e + 1] - old_mesh[e]);
  }
  x.front() = 0.0;
  x.back() = 1.0;
  detail::require_increasing(x, "recover_physical_mesh");
  return Mesh(std::move(x));
}

/// max_j |Δx_j ρ_{I_j} - σ_h/(N_v-1)| / (σ_h/(N_v-1)).
inline double equidistribution_defect(const Mesh& mesh, const MonitorSamples& rho) {
  const double target = rho.total / static_cast<double>(mesh.element_count());
  double worst = 0.0;
  for (std::size_t e = 0; e < mesh.element_count(); ++e)
    worst = std::max(worst, std::abs(mesh.width(e) * rho.values[e] - target) / target);
  return worst;
}

// ---------------------------------------------------------------------------
// Outer loop

struct AdaptControls {
  int outer_iterations = 5;
  MonitorConfig monitor;
  GradientFlowOptions flow;
  SolverControls solver;
  FluxEstimator estimator = FluxEstimator::conservative;
};

/// One pass of the outer loop. `defect` measures the mesh of this pass against
/// the monitor built from its own solution.
struct AdaptIteration {
  int index = 0;
  Mesh mesh;
  double defect = 0.0;
  double nonuniformity = 0.0;
  bool continuation = false;
};

struct AdaptResult {
  Mesh mesh;
  DiscreteSolution solution;
  FluxReport fluxes;
  std::vector<AdaptIteration> history;
  ContinuationReport continuation;
};

/// The three meshes of one adaptation step.
struct MeshIterate {
  Mesh physical;
  std::vector<double> computational;
  Mesh reference;
};

inline MonitorSamples solution_monitor(const DiscreteSolution& s, const MonitorConfig& config) {
  return monitor(s.mesh, second_derivative_estimate(s.mesh, s.potential), config);
}

/// Moves the node nearest to each kink of h onto the kink, so no element
/// straddles a jump in h'.
inline Mesh snap_to_breakpoints(const Mesh& mesh, const ChannelGeometry& geometry) {
  std::vector<double> x = mesh.nodes();
  for (double b : geometry.breakpoints()) {
    const auto it = std::lower_bound(x.begin(), x.end(), b);
    if (it == x.begin() || it == x.end()) continue;
    std::size_t j = static_cast<std::size_t>(it - x.begin());
    if (b - x[j - 1] < x[j] - b) --j;
    if (j == 0 || j + 1 == x.size()) continue;
    if (x[j - 1] < b && b < x[j + 1]) x[j] = b;
  }
  return Mesh(std::move(x));
}

/// New physical mesh equidistributing the monitor of `s`.
inline MeshIterate adapt_mesh(const DiscreteSolution& s, const MonitorConfig& config,
                              const GradientFlowOptions& flow = {}) {
  const MonitorSamples rho = solution_monitor(s, config);
  std::vector<double> xi = evolve_computational_mesh(s.mesh, rho, flow);
  Mesh physical = recover_physical_mesh(s.mesh, xi);
  return {std::move(physical), std::move(xi), Mesh::uniform(s.mesh.size())};
}

namespace detail {

/// Outer passes 1..n starting from a converged pass-1 solution.
inline AdaptResult adapt_passes(const PnpProblem& problem, DiscreteSolution current, const AdaptControls& controls,
                                AdaptResult result) {
  const bool continued = result.continuation.rungs > 0;
  for (int pass = 1;; ++pass) {
    const MonitorSamples rho = solution_monitor(current, controls.monitor);
    const FluxReport fluxes = compute_fluxes(problem, current.mesh, current, controls.estimator);
    result.history.push_back(
        {pass, current.mesh, equidistribution_defect(current.mesh, rho), fluxes.max_nonuniformity(),
         pass == 1 && continued});
    if (pass == controls.outer_iterations) {
      result.fluxes = fluxes;
      break;
    }
    const Mesh next =
        snap_to_breakpoints(adapt_mesh(current, controls.monitor, controls.flow).physical, problem.geometry());
    try {
      current = solve_nonlinear(problem, next, interpolate_solution(current, next), controls.solver);
    } catch (const convergence_error&) {
      try {
        current = solve_with_continuation(problem, next, controls.solver, {}, &result.continuation);
      } catch (const convergence_error& e) {
        throw convergence_error("adapt iteration " + std::to_string(pass + 1) + ": " + e.what(), e.best_iterate(),
                                e.residual_norm());
      }
    }
  }
  result.mesh = current.mesh;
  result.solution = std::move(current);
  return result;
}

inline void check_adapt_controls(const AdaptControls& controls) {
  if (controls.outer_iterations < 1) throw validation_error("adapt_and_solve: at least one outer iteration");
}

}  // namespace detail

/// Alternates MMPDE mesh generation with FEM solves. Pass 1 solves on the
/// uniform mesh; when that solve has no positive solution, the continuation
/// ladder adapts the mesh after every rung so that the layers stay resolved.
inline AdaptResult adapt_and_solve(const PnpProblem& problem, std::size_t nodes, const AdaptControls& controls = {}) {
  if (nodes < 5) throw validation_error("adapt_and_solve: at least five nodes are required");
  detail::check_adapt_controls(controls);

  AdaptResult result;
  const Mesh uniform = Mesh::uniform(nodes);
  const RungHook carry_mesh = [&](const PnpProblem& rung, DiscreteSolution s) {
    try {
      const Mesh next = snap_to_breakpoints(adapt_mesh(s, controls.monitor, controls.flow).physical,
                                            problem.geometry());
      return solve_nonlinear(rung, next, interpolate_solution(s, next), controls.solver);
    } catch (const error&) {
      return s;  // keep the mesh that worked
    }
  };

  DiscreteSolution first = [&] {
    try {
      return solve_with_continuation(problem, uniform, controls.solver, carry_mesh, &result.continuation);
    } catch (const convergence_error& e) {
      throw convergence_error(std::string("adapt iteration 1: ") + e.what(), e.best_iterate(), e.residual_norm());
    }
  }();
  return detail::adapt_passes(problem, std::move(first), controls, std::move(result));
}

/// Same outer loop, but pass 1 starts Newton from `warm` on its own mesh
/// (typically the converged solution of a neighbouring parameter point).
inline AdaptResult adapt_and_solve(const PnpProblem& problem, const DiscreteSolution& warm,
                                   const AdaptControls& controls = {}) {
  detail::check_adapt_controls(controls);
  detail::check_compatible(problem, warm.mesh, warm);
  DiscreteSolution first = [&] {
    try {
      return solve_nonlinear(problem, warm.mesh, warm, controls.solver);
    } catch (const convergence_error& e) {
      throw convergence_error(std::string("adapt iteration 1 (warm start): ") + e.what(), e.best_iterate(),
                              e.residual_norm());
    }
  }();
  return detail::adapt_passes(problem, std::move(first), controls, {});
}

}  // namespace pnpflux
