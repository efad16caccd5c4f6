#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "pnpflux/mmpde.hpp"

using namespace pnpflux;

namespace {

Mesh graded(std::size_t n) {
  std::vector<double> x(n);
  for (std::size_t j = 0; j < n; ++j) x[j] = std::pow(static_cast<double>(j) / (n - 1), 1.5);
  return Mesh(std::move(x));
}

std::vector<double> sample(const Mesh& mesh, auto f) {
  std::vector<double> v;
  for (double x : mesh.nodes()) v.push_back(f(x));
  return v;
}

}  // namespace

TEST(SecondDerivative, ExactForQuadratics) {
  for (const Mesh& mesh : {Mesh::uniform(9), graded(13)}) {
    for (double v : second_derivative_estimate(mesh, sample(mesh, [](double x) { return x * x - 3.0 * x + 1.0; })))
      EXPECT_NEAR(v, 2.0, 1e-9);
    for (double v : second_derivative_estimate(mesh, sample(mesh, [](double x) { return 4.0 - 7.0 * x; })))
      EXPECT_NEAR(v, 0.0, 1e-9);
  }
}

TEST(SecondDerivative, SineWithinOnePercent) {
  constexpr double tau = 2.0 * std::numbers::pi;
  const Mesh mesh = Mesh::uniform(101);
  const auto d2 = second_derivative_estimate(mesh, sample(mesh, [&](double x) { return std::sin(tau * x); }));
  // The one-sided stencils at the two end nodes are only first-order accurate.
  for (std::size_t j = 2; j + 2 < mesh.size(); ++j)
    EXPECT_NEAR(d2[j], -tau * tau * std::sin(tau * mesh[j]), 0.01 * tau * tau);
}

TEST(SecondDerivative, NeedsFiveNodes) {
  EXPECT_THROW(second_derivative_estimate(Mesh::uniform(4), std::vector<double>(4, 0.0)), validation_error);
}

TEST(Monitor, OptimalIsOneForLinearPotential) {
  const Mesh mesh = Mesh::uniform(21);
  const std::vector<double> zero(21, 0.0);
  const MonitorSamples rho = monitor(mesh, zero, {MonitorVariant::optimal, 0});
  for (double v : rho.values) EXPECT_DOUBLE_EQ(v, 1.0);
  EXPECT_NEAR(rho.total, 1.0, 1e-15);
}

TEST(Monitor, BoundaryWeightedClosedFormAtNeckEdge) {
  const Mesh mesh = Mesh::uniform(4);  // x = 0, 1/3, 2/3, 1
  const std::vector<double> zero(4, 0.0);
  const auto rho = monitor_nodal(mesh, zero, {});
  // Peak base value 1, so the floor is 4.
  const double expected = std::sqrt(1.0 + 1.0 / 4.0 + 1.0 / (std::expm1(4.0 / 9.0) + 4.0));
  EXPECT_NEAR(rho[1], expected, 1e-14);
  EXPECT_NEAR(rho[2], expected, 1e-14);
  EXPECT_GT(rho[1], rho[0]);
}

TEST(Monitor, GrowsWithCurvature) {
  const Mesh mesh = Mesh::uniform(6);
  double prev = 0.0;
  for (double d2 : {0.0, 1.0, 10.0, 100.0}) {
    const std::vector<double> phi_xx(6, d2);
    const auto rho = monitor_nodal(mesh, phi_xx, {MonitorVariant::optimal, 0});
    EXPECT_NEAR(rho[2], std::cbrt(1.0 + d2 * d2), 1e-12);
    EXPECT_GT(rho[2], prev);
    prev = rho[2];
  }
}

TEST(Monitor, SmoothingPreservesConstants) {
  const Mesh mesh = graded(15);
  const std::vector<double> phi_xx(15, 3.0);
  const MonitorSamples rho = monitor(mesh, phi_xx, {MonitorVariant::optimal, 3});
  for (double v : rho.values) EXPECT_NEAR(v, std::cbrt(10.0), 1e-14);
}

TEST(MeshEnergy, ThreeNodeValue) {
  const Mesh mesh = Mesh::uniform(3);
  const std::vector<double> xi{0.0, 0.5, 1.0};
  const MonitorSamples one = make_monitor_samples(mesh, {1.0, 1.0});
  EXPECT_DOUBLE_EQ(mesh_energy(mesh.nodes(), xi, one), 0.5);
  const MonitorSamples kappa = make_monitor_samples(mesh, {4.0, 4.0});
  EXPECT_DOUBLE_EQ(mesh_energy(mesh.nodes(), xi, kappa), 0.125);
}

TEST(MeshEnergy, GradientVanishesAtEquidistribution) {
  const Mesh mesh = graded(9);
  const MonitorSamples rho = make_monitor_samples(mesh, std::vector<double>(8, 2.5));
  for (double g : energy_gradient(mesh.nodes(), mesh.nodes(), rho)) EXPECT_NEAR(g, 0.0, 1e-12);
}

TEST(MeshEnergy, GradientMatchesFiniteDifferences) {
  const Mesh mesh = graded(7);
  const MonitorSamples rho = make_monitor_samples(mesh, {1.0, 3.0, 0.5, 2.0, 7.0, 1.5});
  std::vector<double> xi{0.0, 0.1, 0.3, 0.35, 0.6, 0.9, 1.0};
  const auto g = energy_gradient(mesh.nodes(), xi, rho);
  for (std::size_t j = 1; j + 1 < xi.size(); ++j) {
    auto plus = xi, minus = xi;
    plus[j] += 1e-6;
    minus[j] -= 1e-6;
    const double fd = (mesh_energy(mesh.nodes(), plus, rho) - mesh_energy(mesh.nodes(), minus, rho)) / 2e-6;
    EXPECT_NEAR(g[j - 1], fd, 1e-6 * std::max(1.0, std::abs(fd)));
  }
}

TEST(GradientFlow, ConstantDensityKeepsUniformMesh) {
  const Mesh mesh = Mesh::uniform(11);
  const MonitorSamples rho = make_monitor_samples(mesh, std::vector<double>(10, 3.0));
  const auto xi = evolve_computational_mesh(mesh, rho);
  for (std::size_t j = 0; j < mesh.size(); ++j) EXPECT_NEAR(xi[j], mesh[j], 1e-12);
}

TEST(GradientFlow, ReachesEquidistributingSteadyState) {
  const Mesh mesh = graded(21);
  std::vector<double> values;
  for (std::size_t e = 0; e < mesh.element_count(); ++e) {
    const double mid = 0.5 * (mesh[e] + mesh[e + 1]);
    values.push_back(1.0 + 50.0 * std::exp(-200.0 * (mid - 0.4) * (mid - 0.4)));
  }
  const MonitorSamples rho = make_monitor_samples(mesh, values);
  GradientFlowOptions options;
  options.rel_tol = 1e-10;
  options.abs_tol = 1e-13;
  const auto xi = evolve_computational_mesh(mesh, rho, options);
  double cumulative = 0.0;
  for (std::size_t j = 1; j < mesh.size(); ++j) {
    cumulative += rho.values[j - 1] * mesh.width(j - 1);
    EXPECT_NEAR(xi[j], cumulative / rho.total, 1e-7);
  }
}

TEST(GradientFlow, EnergyNeverIncreases) {
  const Mesh mesh = Mesh::uniform(31);
  std::vector<double> values;
  for (std::size_t e = 0; e < mesh.element_count(); ++e) values.push_back(1.0 + 20.0 * (e % 7 == 3));
  const MonitorSamples rho = make_monitor_samples(mesh, values);
  std::vector<double> energies;
  evolve_computational_mesh(mesh, rho, {}, [&](double, const std::vector<double>& xi) {
    energies.push_back(mesh_energy(mesh.nodes(), xi, rho));
  });
  ASSERT_GT(energies.size(), 2u);
  for (std::size_t i = 1; i < energies.size(); ++i) EXPECT_LE(energies[i], energies[i - 1] * (1.0 + 1e-12));
}

TEST(RecoverMesh, InterpolatesInverseMap) {
  const Mesh old = Mesh::uniform(3);
  const Mesh x = recover_physical_mesh(old, std::vector<double>{0.0, 0.25, 1.0});
  EXPECT_NEAR(x[1], 2.0 / 3.0, 1e-15);
  EXPECT_EQ(x[0], 0.0);
  EXPECT_EQ(x[2], 1.0);
  EXPECT_THROW(recover_physical_mesh(old, std::vector<double>{0.0, 1.0, 1.0}), monotonicity_error);
}

TEST(RecoverMesh, IdentityForUniformXi) {
  const Mesh old = graded(9);
  const Mesh x = recover_physical_mesh(old, Mesh::uniform(9).nodes());
  for (std::size_t j = 0; j < 9; ++j) EXPECT_NEAR(x[j], old[j], 1e-15);
}

TEST(Defect, Example) {
  const Mesh mesh = Mesh::uniform(3);
  EXPECT_NEAR(equidistribution_defect(mesh, make_monitor_samples(mesh, {1.0, 9.0})), 0.8, 1e-15);
  EXPECT_EQ(equidistribution_defect(mesh, make_monitor_samples(mesh, {2.0, 2.0})), 0.0);
}

TEST(Adapt, PassesConcentrateNodesAndReduceDefect) {
  TwoSpeciesSetup s;
  s.voltage = 10.0;
  s.q0 = 5e-4;
  const AdaptResult r = adapt_and_solve(make_two_species_problem(s), 301);
  ASSERT_EQ(r.history.size(), 5u);
  EXPECT_TRUE(r.mesh == r.history.back().mesh);
  EXPECT_LT(r.history.back().defect, 0.1 * r.history.front().defect);
  EXPECT_LT(r.history.back().nonuniformity, r.history.front().nonuniformity);
  const auto& x = r.mesh.nodes();
  EXPECT_TRUE(std::binary_search(x.begin(), x.end(), kNeckBegin));
  EXPECT_TRUE(std::binary_search(x.begin(), x.end(), kNeckEnd));
  // Smallest element sits next to a neck edge, where the layers are.
  std::size_t smallest = 0;
  for (std::size_t e = 1; e < r.mesh.element_count(); ++e)
    if (r.mesh.width(e) < r.mesh.width(smallest)) smallest = e;
  const double mid = 0.5 * (x[smallest] + x[smallest + 1]);
  EXPECT_LT(std::min(std::abs(mid - kNeckBegin), std::abs(mid - kNeckEnd)), 0.05);
}

TEST(Adapt, RejectsBadControls) {
  const PnpProblem p = make_two_species_problem({});
  AdaptControls c;
  c.outer_iterations = 0;
  EXPECT_THROW(adapt_and_solve(p, 301, c), validation_error);
  EXPECT_THROW(adapt_and_solve(p, 4), validation_error);
}
