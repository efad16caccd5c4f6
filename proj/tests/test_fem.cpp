#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "pnpflux/mmpde.hpp"
#include "pnpflux/quadrature.hpp"

using namespace pnpflux;

namespace {

TwoSpeciesSetup setup(double voltage, double q0) {
  TwoSpeciesSetup s;
  s.voltage = voltage;
  s.q0 = q0;
  return s;
}

DiscreteSolution random_state(const PnpProblem& problem, const Mesh& mesh, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> phi(-3.0, 3.0), c(0.2, 2.0);
  DiscreteSolution s = initial_guess(problem, mesh);
  for (std::size_t j = 1; j + 1 < mesh.size(); ++j) {
    s.potential[j] = phi(rng);
    for (auto& ck : s.concentration) ck[j] = c(rng);
  }
  return s;
}

// Residual rows written out per test function, independently of the element loop.
std::vector<double> hand_residual(const PnpProblem& p, const DiscreteSolution& s) {
  using Rule = quadrature::GaussLegendre<2>;
  const Mesh& m = s.mesh;
  const std::size_t n = p.species_count(), fields = n + 1;
  std::vector<double> r((m.size() - 2) * fields, 0.0);
  const double eps2 = p.epsilon() * p.epsilon();
  for (std::size_t j = 1; j + 1 < m.size(); ++j) {
    for (std::size_t e : {j - 1, j}) {
      const double a = m[e], b = m[e + 1], w = b - a;
      const double dpsi = (e == j - 1) ? 1.0 / w : -1.0 / w;
      const double dphi = (s.potential[e + 1] - s.potential[e]) / w;
      for (std::size_t q = 0; q < 2; ++q) {
        const double x = 0.5 * (a + b) + 0.5 * w * Rule::nodes[q];
        const double wq = 0.5 * w * Rule::weights[q];
        const double psi = (e == j - 1) ? (x - a) / w : (b - x) / w;
        const double h = p.geometry().area(x);
        double rho = p.charge().density(x);
        for (std::size_t k = 0; k < n; ++k) {
          const double ck = s.concentration[k][e] + (x - a) / w * (s.concentration[k][e + 1] - s.concentration[k][e]);
          rho += p.species()[k].valence * ck;
        }
        r[(j - 1) * fields] += wq * (eps2 * h * dphi * dpsi - rho * h * psi);
        for (std::size_t k = 0; k < n; ++k) {
          const double ck = s.concentration[k][e] + (x - a) / w * (s.concentration[k][e + 1] - s.concentration[k][e]);
          const double dck = (s.concentration[k][e + 1] - s.concentration[k][e]) / w;
          r[(j - 1) * fields + k + 1] +=
              wq * p.species()[k].diffusion * h * (dck + p.species()[k].valence * ck * dphi) * dpsi;
        }
      }
    }
  }
  return r;
}

}  // namespace

TEST(Residual, VanishesForConstantEquilibrium) {
  TwoSpeciesSetup s = setup(0.0, 0.0);
  s.right = s.left;
  const PnpProblem p = make_two_species_problem(s);
  const Mesh mesh = Mesh::uniform(41);
  const auto r = assemble_residual(p, mesh, initial_guess(p, mesh));
  for (double v : r) EXPECT_EQ(v, 0.0);
}

TEST(Residual, MatchesHandWeakFormOnFiveNodes) {
  TwoSpeciesSetup s = setup(2.0, 0.3);
  s.epsilon = 0.1;
  const PnpProblem p = make_two_species_problem(s);
  const Mesh mesh({0.0, 0.2, 0.45, 0.7, 1.0});
  std::mt19937_64 rng(7);
  const DiscreteSolution state = random_state(p, mesh, rng);
  const auto r = assemble_residual(p, mesh, state);
  const auto expected = hand_residual(p, state);
  ASSERT_EQ(r.size(), expected.size());
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_NEAR(r[i], expected[i], 1e-12 * (1.0 + std::abs(expected[i])));
}

TEST(Residual, IsLocal) {
  TwoSpeciesSetup s = setup(1.0, 0.1);
  s.epsilon = 0.1;
  const PnpProblem p = make_two_species_problem(s);
  const Mesh mesh = Mesh::uniform(11);
  std::mt19937_64 rng(11);
  const DiscreteSolution base = random_state(p, mesh, rng);
  const auto r0 = assemble_residual(p, mesh, base);
  const std::size_t node = 5, fields = 3;
  DiscreteSolution moved = base;
  moved.potential[node] += 0.5;
  moved.concentration[1][node] *= 1.3;
  const auto r1 = assemble_residual(p, mesh, moved);
  for (std::size_t i = 0; i < r0.size(); ++i) {
    const std::size_t row_node = i / fields + 1;
    const bool coupled = row_node + 1 >= node && row_node <= node + 1;
    if (!coupled) {
      EXPECT_EQ(r0[i], r1[i]) << "row " << i;
    }
  }
}

TEST(Jacobian, MatchesFiniteDifferences) {
  for (ExcessKind excess : {ExcessKind::ideal, ExcessKind::hard_sphere}) {
    TwoSpeciesSetup s = setup(2.0, 0.4);
    s.epsilon = 0.1;
    s.excess = excess;
    s.radius_cation = 0.2;
    s.radius_anion = 0.3;
    const PnpProblem p = make_two_species_problem(s);
    const Mesh mesh({0.0, 0.15, 0.3, 0.5, 0.62, 0.8, 1.0});
    std::mt19937_64 rng(3);
    const DiscreteSolution state = random_state(p, mesh, rng);
    const BandedMatrix jac = assemble_jacobian(p, state);
    const std::size_t fields = 3, n = unknown_count(p, mesh);
    EXPECT_EQ(jac.lower(), 2 * fields - 1);
    EXPECT_EQ(jac.upper(), 2 * fields - 1);

    for (std::size_t col = 0; col < n; ++col) {
      const std::size_t node = col / fields + 1, field = col % fields;
      auto shifted = [&](double delta) {
        DiscreteSolution t = state;
        if (field == 0) t.potential[node] += delta;
        else t.concentration[field - 1][node] += delta;
        return assemble_residual(p, mesh, t);
      };
      const double value = field == 0 ? state.potential[node] : state.concentration[field - 1][node];
      const double step = 1e-7 * std::max(1.0, std::abs(value));
      const auto plus = shifted(step), minus = shifted(-step);
      for (std::size_t row = 0; row < n; ++row) {
        const double fd = (plus[row] - minus[row]) / (2.0 * step);
        const double exact = jac.at(row, col);
        EXPECT_NEAR(exact, fd, 1e-6 * std::max(1.0, std::abs(exact))) << "row " << row << " col " << col;
      }
    }
  }
}

TEST(InitialGuess, LinearInterpolants) {
  const PnpProblem p = make_two_species_problem(setup(10.0, 0.0));
  const DiscreteSolution g = initial_guess(p, Mesh::uniform(3));
  EXPECT_DOUBLE_EQ(g.potential[0], 10.0);
  EXPECT_DOUBLE_EQ(g.potential[1], 5.0);
  EXPECT_DOUBLE_EQ(g.potential[2], 0.0);
  for (const auto& c : g.concentration) {
    EXPECT_DOUBLE_EQ(c[0], 0.008);
    EXPECT_DOUBLE_EQ(c[1], 0.0045);
    EXPECT_DOUBLE_EQ(c[2], 0.001);
  }
}

TEST(Solver, ConvergedStateNeedsAtMostOneIteration) {
  const PnpProblem p = make_two_species_problem(setup(10.0, 1e-4));
  const AdaptResult r = adapt_and_solve(p, 301);
  NewtonReport report;
  const DiscreteSolution again = solve_nonlinear(p, r.mesh, r.solution, {}, &report);
  EXPECT_LE(report.iterations, 1);
  for (std::size_t j = 0; j < r.mesh.size(); ++j) EXPECT_NEAR(again.potential[j], r.solution.potential[j], 1e-8);
}

TEST(Solver, RejectsMismatchedGuess) {
  const PnpProblem p = make_two_species_problem(setup(10.0, 0.0));
  const DiscreteSolution g = initial_guess(p, Mesh::uniform(11));
  EXPECT_THROW(solve_nonlinear(p, Mesh::uniform(12), g), validation_error);
  DiscreteSolution bad = g;
  bad.concentration[0][4] = -1.0;
  EXPECT_THROW(solve_nonlinear(p, g.mesh, bad), validation_error);
}

TEST(Fluxes, BoundaryElectrochemicalPotential) {
  const PnpProblem p = make_two_species_problem(setup(10.0, 1e-4));
  const AdaptResult r = adapt_and_solve(p, 301);
  const auto mu = electrochemical_profile(p, r.solution);
  EXPECT_NEAR(mu[0].front(), 10.0 + std::log(0.008), 1e-12);
  EXPECT_NEAR(mu[1].front(), -10.0 + std::log(0.008), 1e-12);
  EXPECT_NEAR(mu[0].back(), std::log(0.001), 1e-12);
}

TEST(Fluxes, FollowElectrochemicalDrop) {
  for (double V : {-60.0, -10.0, 0.0, 10.0, 50.0}) {
    for (double q0 : {0.0, 1e-3}) {
      const PnpProblem p = make_two_species_problem(setup(V, q0));
      const AdaptResult r = adapt_and_solve(p, 301);
      const double drop[2] = {V + std::log(8.0), -V + std::log(8.0)};
      for (std::size_t k = 0; k < 2; ++k) {
        EXPECT_GT(r.fluxes.flux[k] * drop[k], 0.0) << "V=" << V << " q0=" << q0 << " k=" << k;
        for (double j : r.fluxes.element_flux[k]) EXPECT_GT(j * drop[k], 0.0);
      }
      EXPECT_DOUBLE_EQ(r.fluxes.current, r.fluxes.flux[0] - r.fluxes.flux[1]);
    }
  }
}

TEST(Fluxes, MirrorSymmetry) {
  TwoSpeciesSetup a = setup(30.0, 2e-4);
  TwoSpeciesSetup b = a;
  b.voltage = -a.voltage;
  std::swap(b.left, b.right);
  const AdaptResult ra = adapt_and_solve(make_two_species_problem(a), 301);
  const AdaptResult rb = adapt_and_solve(make_two_species_problem(b), 301);
  for (std::size_t k = 0; k < 2; ++k)
    EXPECT_NEAR(rb.fluxes.flux[k], -ra.fluxes.flux[k], 1e-6 * std::abs(ra.fluxes.flux[k]));
}

TEST(Fluxes, ElementFluxesAgreeAfterAdaptation) {
  const PnpProblem p = make_two_species_problem(setup(10.0, 1e-4));
  const AdaptResult r = adapt_and_solve(p, 301);
  EXPECT_LT(r.fluxes.max_nonuniformity(), 1e-3);
  for (std::size_t k = 0; k < 2; ++k)
    EXPECT_NEAR(r.fluxes.element_mean[k], r.fluxes.conservative[k], 1e-3 * std::abs(r.fluxes.conservative[k]));
}

TEST(Continuation, LargeChargeHighVoltage) {
  const PnpProblem p = make_two_species_problem(setup(50.0, 0.04));
  const AdaptResult r = adapt_and_solve(p, 301);
  EXPECT_GT(r.solution.min_concentration(), 0.0);
  // Element fluxes scatter across the unresolved layers here, but their mean still matches the conservative flux.
  for (std::size_t k = 0; k < 2; ++k)
    EXPECT_NEAR(r.fluxes.element_mean[k], r.fluxes.conservative[k], 1e-2 * std::abs(r.fluxes.conservative[k]));
  EXPECT_GT(r.fluxes.flux[0], 0.0);
}

TEST(Interpolation, ExactForConstantAndLinearData) {
  const Mesh from({0.0, 0.1, 0.35, 0.9, 1.0});
  const Mesh to = Mesh::uniform(17);
  const std::vector<double> constant(5, 0.25);
  for (double v : interpolate_nodal(from, constant, to)) EXPECT_EQ(v, 0.25);
  std::vector<double> linear;
  for (double x : from.nodes()) linear.push_back(3.0 - 2.0 * x);
  const auto out = interpolate_nodal(from, linear, to);
  for (std::size_t j = 0; j < to.size(); ++j) EXPECT_NEAR(out[j], 3.0 - 2.0 * to[j], 1e-15);
}
