#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>
#include <string>

#include "pnpflux/io.hpp"

using namespace pnpflux;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("pnpflux_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

RunConfig parse_yaml(const std::string& text) {
  return parse_config(detail::yaml_to_json(YAML::Load(text)));
}

std::string config_error(const std::string& yaml) {
  try {
    parse_yaml(yaml);
  } catch (const validation_error& e) {
    return e.what();
  }
  return "";
}

void expect_same_number(double a, double b) {
  if (std::isnan(a)) {
    EXPECT_TRUE(std::isnan(b));
  } else {
    EXPECT_EQ(a, b);
  }
}

std::vector<PointResult> random_points(std::size_t n) {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<PointResult> pts;
  for (std::size_t i = 0; i < n; ++i) {
    PointResult p;
    p.q0 = std::exp(10.0 * u(rng));
    p.voltage = 100.0 * u(rng);
    p.J1 = u(rng) * 1e-3;
    p.J2 = u(rng) / 3.0;
    p.lambda1 = 1.0 + u(rng);
    p.lambda2 = 2.0 + u(rng);
    p.status = i % 4 == 3 ? PointStatus::failed : PointStatus::converged;
    if (!p.converged()) p.lambda1 = p.lambda2 = std::numeric_limits<double>::quiet_NaN();
    pts.push_back(p);
  }
  return pts;
}

}  // namespace

TEST(Numbers, Formatting) {
  EXPECT_EQ(format_number(0.1), "0.1");
  EXPECT_EQ(format_number(-0.0), "0");
  EXPECT_EQ(format_number(std::nan("")), "nan");
  EXPECT_EQ(format_number(-std::numeric_limits<double>::infinity()), "-inf");
  EXPECT_EQ(format_number(1e-300), "1e-300");
  EXPECT_THROW(parse_number("1.5x"), validation_error);
  EXPECT_THROW(parse_number(""), validation_error);
}

TEST(Numbers, SixteenDigitRoundTrip) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> mant(-1.0, 1.0), expo(-300.0, 300.0);
  for (int i = 0; i < 2000; ++i) {
    const double v = mant(rng) * std::pow(10.0, expo(rng));
    const double once = printed(v);
    EXPECT_LE(std::abs(once - v), 1e-15 * std::abs(v));
    EXPECT_EQ(format_number(once), format_number(v));
    EXPECT_EQ(printed(once), once);
  }
}

TEST(Tables, SweepRoundTripCsvAndJson) {
  const auto points = random_points(12);
  const Table t = sweep_table(points);
  const fs::path dir = scratch_dir("sweep");
  for (TableFormat f : {TableFormat::csv, TableFormat::json}) {
    const fs::path path = dir / ("sweep" + extension(f));
    write_table(path, t, f);
    const auto back = sweep_from_table(read_table(path, kSweepColumns));
    ASSERT_EQ(back.size(), points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
      expect_same_number(back[i].q0, printed(points[i].q0));
      expect_same_number(back[i].voltage, printed(points[i].voltage));
      expect_same_number(back[i].J1, printed(points[i].J1));
      expect_same_number(back[i].J2, printed(points[i].J2));
      expect_same_number(back[i].lambda1, points[i].lambda1 == points[i].lambda1 ? printed(points[i].lambda1) : NAN);
      expect_same_number(back[i].lambda2, points[i].lambda2 == points[i].lambda2 ? printed(points[i].lambda2) : NAN);
      EXPECT_EQ(back[i].status, points[i].status);
    }
  }
  // Rewriting what was read gives identical bytes.
  const fs::path again = dir / "again.csv";
  write_table(again, read_table(dir / "sweep.csv", kSweepColumns), TableFormat::csv);
  EXPECT_EQ(detail::read_text(again), detail::read_text(dir / "sweep.csv"));
}

TEST(Tables, SurfaceRoundTrip) {
  RatioSurface s;
  s.q0 = {1e-4, 3e-3, 0.2};
  s.voltage = {-50.0, 25.5};
  auto pts = random_points(6);
  for (std::size_t iv = 0; iv < 2; ++iv)
    for (std::size_t iq = 0; iq < 3; ++iq) {
      PointResult p = pts[s.index(iv, iq)];
      p.q0 = s.q0[iq];
      p.voltage = s.voltage[iv];
      s.points.push_back(p);
    }
  s.points[0].lambda1 = 3.5;  // λ1 > λ2: anomaly
  const fs::path path = scratch_dir("surface") / "surface.json";
  write_table(path, surface_table(s), TableFormat::json);
  const SurfaceRecord r = surface_from_table(read_table(path, kSurfaceColumns));
  EXPECT_EQ(r.surface.q0, s.q0);
  EXPECT_EQ(r.surface.voltage, s.voltage);
  const auto labels = classify_regions(s);
  for (std::size_t i = 0; i < s.points.size(); ++i) {
    EXPECT_EQ(r.regions[i].region, labels[i].region);
    EXPECT_EQ(r.regions[i].anomaly, labels[i].anomaly);
    EXPECT_EQ(r.surface.points[i].status, s.points[i].status);
    if (s.points[i].converged()) {
      EXPECT_EQ(r.surface.points[i].lambda2, printed(s.points[i].lambda2));
    }
  }
  EXPECT_TRUE(r.regions[0].anomaly);
  EXPECT_FALSE(r.regions[3].region.has_value());  // failed point
}

TEST(Tables, SurfaceRejectsShuffledRows) {
  Table t{kSurfaceColumns, {{"1", "0", "1", "1", "II", "converged"},
                            {"2", "0", "1", "1", "II", "converged"},
                            {"2", "1", "1", "1", "II", "converged"},
                            {"1", "1", "1", "1", "II", "converged"}}};
  EXPECT_THROW(surface_from_table(t), validation_error);
  t.rows[2][4] = "IV";
  EXPECT_THROW(surface_from_table(t), validation_error);
}

TEST(Tables, ProfilesRoundTrip) {
  InternalProfiles p;
  p.x = {0.0, 0.3, 1.0};
  p.potential = {10.0, 4.123456789012345, 0.0};
  p.concentration = {{0.008, 0.02, 0.001}, {0.008, 1e-7, 0.001}};
  p.electrochemical = {{5.1, 2.0, -6.9}, {-14.8, -17.0, -6.9}};
  p.x_left = {0.0, 0.3};
  p.x_right = {0.3, 1.0};
  p.element_flux = {{0.0123, 0.0123}, {-4e-5, -4e-5}};
  const fs::path dir = scratch_dir("profiles");
  write_table(dir / "profiles.csv", profile_table(p), TableFormat::csv);
  write_table(dir / "fluxes.json", element_flux_table(p), TableFormat::json);
  InternalProfiles back = profiles_from_table(read_table(dir / "profiles.csv", kProfileColumns));
  element_fluxes_from_table(read_table(dir / "fluxes.json", kElementFluxColumns), back);
  EXPECT_EQ(back.x, p.x);
  EXPECT_EQ(back.potential, p.potential);
  EXPECT_EQ(back.concentration, p.concentration);
  EXPECT_EQ(back.electrochemical, p.electrochemical);
  EXPECT_EQ(back.x_right, p.x_right);
  EXPECT_EQ(back.element_flux, p.element_flux);
  EXPECT_THROW(read_table(dir / "profiles.csv", kElementFluxColumns), validation_error);
}

TEST(Tables, ContoursAndBifurcationsRoundTrip) {
  ContourSet c;
  c.lines.push_back({1, {{1e-4, 18.97}, {2.5e-4, 30.000000000000004}}, {}, false});
  c.lines.push_back({2, {{0.3, -66.9603}}, {}, false});
  const std::vector<BifurcationPoint> b{{1, 6.1085e-4, 40.99}, {2, 4.2519e-4, -35.82}};
  const fs::path dir = scratch_dir("contours");
  write_json(dir / "contours.json", contours_to_json(c));
  write_json(dir / "bifurcations.json", bifurcations_to_json(b));
  const ContourSet cb = contours_from_json(read_json(dir / "contours.json"));
  ASSERT_EQ(cb.lines.size(), 2u);
  EXPECT_EQ(cb.lines[1].species, 2);
  EXPECT_EQ(cb.lines[0].points[1][1], printed(30.000000000000004));
  const auto bb = bifurcations_from_json(read_json(dir / "bifurcations.json"));
  ASSERT_EQ(bb.size(), 2u);
  EXPECT_EQ(bb[1].species, 2);
  EXPECT_EQ(bb[0].q0, 6.1085e-4);
  EXPECT_EQ(bb[1].voltage, -35.82);
}

TEST(Config, Defaults) {
  const RunConfig cfg = parse_yaml("{}");
  EXPECT_EQ(cfg.problem.setup.left, 0.008);
  EXPECT_EQ(cfg.problem.nodes, 301u);
  EXPECT_FALSE(cfg.q0.ranged());
  EXPECT_EQ(cfg.output.format, TableFormat::csv);
}

TEST(Config, ParsesRangesAndChoices) {
  const RunConfig cfg = parse_yaml(R"(
problem:
  left: [0.01, 0.01]
  voltage: {lo: -110, hi: 70, count: 7}
  q0: {lo: 1.0e-5, hi: 3, count: 12, spacing: hybrid}
  excess: hard-sphere
  radii: [0.2, 0.4]
  charge_convention: unit-plateau
  monitor: optimal
solver:
  workers: 3
  flux_estimator: element-mean
output:
  format: json
  directory: "123"
)");
  EXPECT_EQ(cfg.problem.setup.left, 0.01);
  ASSERT_TRUE(cfg.voltage.ranged());
  EXPECT_EQ(cfg.voltage.values().size(), 7u);
  EXPECT_EQ(cfg.q0.range->spacing, AxisSpacing::hybrid);
  EXPECT_EQ(cfg.problem.setup.excess, ExcessKind::hard_sphere);
  EXPECT_EQ(cfg.problem.setup.radius_anion, 0.4);
  EXPECT_EQ(cfg.problem.setup.convention, ChargeConvention::unit_plateau);
  EXPECT_EQ(cfg.problem.controls.monitor.variant, MonitorVariant::optimal);
  EXPECT_EQ(cfg.problem.controls.estimator, FluxEstimator::element_mean);
  EXPECT_EQ(cfg.workers, 3u);
  EXPECT_EQ(cfg.contour.workers, 3u);
  EXPECT_EQ(cfg.output.format, TableFormat::json);
  EXPECT_EQ(cfg.output.directory, "123");  // quoted scalars stay strings
  EXPECT_NO_THROW(cfg.grid());
}

TEST(Config, ListsEveryOffendingKey) {
  const std::string msg = config_error(R"(
problem:
  left: [0.008, 0.007]
  voltage: fast
  colour: red
solver:
  max_iterations: 0
output:
  format: xml
extra: 1
)");
  EXPECT_NE(msg.find("problem.left"), std::string::npos) << msg;
  EXPECT_NE(msg.find("electroneutrality"), std::string::npos) << msg;
  EXPECT_NE(msg.find("problem.voltage"), std::string::npos) << msg;
  EXPECT_NE(msg.find("problem.colour"), std::string::npos) << msg;
  EXPECT_NE(msg.find("solver.max_iterations"), std::string::npos) << msg;
  EXPECT_NE(msg.find("output.format"), std::string::npos) << msg;
  EXPECT_NE(msg.find("extra"), std::string::npos) << msg;
}

TEST(Config, RejectsBadValues) {
  EXPECT_NE(config_error("problem: {left: -1}"), "");
  EXPECT_NE(config_error("problem: {nodes: 4}"), "");
  EXPECT_NE(config_error("problem: {delta: 0.5}"), "");
  EXPECT_NE(config_error("problem: {q0: -1}"), "");
  EXPECT_NE(config_error("problem: {q0: {lo: 1, hi: 0, count: 3}}"), "");
  EXPECT_NE(config_error("problem: {q0: {lo: 0, hi: 1, count: 3, spacing: log}}"), "");
  EXPECT_NE(config_error("problem: {radii: [0.1]}"), "");
  EXPECT_NE(config_error("problem: {monitor: adaptive}"), "");
  EXPECT_NE(config_error("solver: {monotonicity: 1.5}"), "");
  EXPECT_NE(config_error("problem: {left: 0.1, left: 0.2}"), "");  // duplicate key
}

TEST(Config, SinglePointRangeIsScalar) {
  const RunConfig cfg = parse_yaml("problem: {voltage: {lo: 5, hi: 5, count: 1}}");
  EXPECT_FALSE(cfg.voltage.ranged());
  EXPECT_EQ(cfg.voltage.value, 5.0);
  EXPECT_NE(config_error("problem: {voltage: {lo: 5, hi: 6, count: 1}}"), "");
}

TEST(Config, YamlAndJsonFilesAgree) {
  const fs::path configs = PNPFLUX_CONFIGS;
  const RunConfig a = load_config(configs / "default.yaml");
  const RunConfig b = load_config(configs / "default.json");
  EXPECT_EQ(a.problem.setup.left, b.problem.setup.left);
  EXPECT_EQ(a.problem.setup.right, b.problem.setup.right);
  EXPECT_EQ(a.problem.setup.epsilon, b.problem.setup.epsilon);
  EXPECT_EQ(a.problem.setup.delta, b.problem.setup.delta);
  EXPECT_EQ(a.q0.value, b.q0.value);
  EXPECT_EQ(a.voltage.value, b.voltage.value);
  EXPECT_EQ(a.problem.nodes, b.problem.nodes);
  EXPECT_EQ(a.problem.controls.outer_iterations, b.problem.controls.outer_iterations);
  EXPECT_EQ(a.problem.controls.monitor.variant, b.problem.controls.monitor.variant);
  EXPECT_EQ(a.problem.controls.solver.tolerance, b.problem.controls.solver.tolerance);
  EXPECT_EQ(a.output.format, TableFormat::csv);
  EXPECT_EQ(b.output.format, TableFormat::json);
}

TEST(Config, ShippedConfigsLoad) {
  for (const auto& entry : fs::directory_iterator(PNPFLUX_CONFIGS)) {
    SCOPED_TRACE(entry.path().string());
    EXPECT_NO_THROW(load_config(entry.path()));
  }
  EXPECT_THROW(load_config(fs::path(PNPFLUX_CONFIGS) / "missing.yaml"), validation_error);
}

TEST(Config, Overrides) {
  RunConfig cfg = parse_yaml("{}");
  ConfigOverrides o;
  o.monitor = MonitorVariant::optimal;
  o.excess = ExcessKind::hard_sphere;
  o.workers = 4;
  o.directory = "elsewhere";
  apply_overrides(cfg, o);
  EXPECT_EQ(cfg.problem.controls.monitor.variant, MonitorVariant::optimal);
  EXPECT_EQ(cfg.problem.setup.excess, ExcessKind::hard_sphere);
  EXPECT_EQ(cfg.contour.workers, 4u);
  EXPECT_EQ(cfg.output.directory, "elsewhere");
  o.workers = 0;
  EXPECT_THROW(apply_overrides(cfg, o), validation_error);
}
