// pnpflux: steady PNP channel fluxes, sweeps, flux-ratio diagrams and
// asymptotic reports from a configuration file.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "json.hpp"
#include "pnpflux/asymptotics.hpp"
#include "pnpflux/config.hpp"
#include "pnpflux/io.hpp"
#include "pnpflux/scan.hpp"

namespace fs = std::filesystem;
using namespace pnpflux;

namespace {

enum Exit : int { kSuccess = 0, kValidation = 1, kSolverFailure = 2, kPartial = 3 };

void require_point(const RunConfig& cfg, const char* command) {
  if (cfg.q0.ranged() || cfg.voltage.ranged())
    throw validation_error(std::string(command) + " needs fixed q0 and voltage, not ranges");
}

std::string ratio_text(double j, double ref) {
  try {
    return format_number(flux_ratio(j, ref));
  } catch (const degenerate_input_error&) {
    return "undefined (zero reference flux)";
  }
}

int cmd_solve(const RunConfig& cfg) {
  require_point(cfg, "solve");
  const ProblemTemplate& tpl = cfg.problem;
  const double q0 = cfg.q0.value, V = cfg.voltage.value;
  const PnpProblem problem = tpl.at(q0, V);
  const AdaptResult r = adapt_and_solve(problem, tpl.nodes, tpl.controls);
  const InternalProfiles p = internal_profiles(problem, r);

  std::optional<ReferenceFlux> ref;
  if (cfg.reference) {
    ref = q0 == 0.0 ? ReferenceFlux{V, p.flux[0], p.flux[1], PointStatus::converged, {}} : reference_fluxes(tpl, V);
    if (ref->status != PointStatus::converged) throw error("zero-charge reference: " + ref->message);
  }

  const fs::path dir = cfg.output.directory;
  const TableFormat fmt = cfg.output.format;
  write_table(dir / ("profiles" + extension(fmt)), profile_table(p), fmt);
  write_table(dir / ("fluxes" + extension(fmt)), element_flux_table(p), fmt);

  nlohmann::ordered_json summary{{"q0", detail::json_number(q0)},
                         {"V", detail::json_number(V)},
                         {"J_1", detail::json_number(p.flux[0])},
                         {"J_2", detail::json_number(p.flux[1])},
                         {"I", detail::json_number(p.current)},
                         {"outer_iterations", p.outer_iterations},
                         {"nonuniformity", detail::json_number(p.nonuniformity)}};
  std::printf("q0 = %s  V = %s\n", format_number(q0).c_str(), format_number(V).c_str());
  std::printf("J_1 = %s\nJ_2 = %s\nI   = %s\n", format_number(p.flux[0]).c_str(), format_number(p.flux[1]).c_str(),
              format_number(p.current).c_str());
  if (ref) {
    const std::string l1 = ratio_text(p.flux[0], ref->J1), l2 = ratio_text(p.flux[1], ref->J2);
    std::printf("lambda_1 = %s\nlambda_2 = %s\n", l1.c_str(), l2.c_str());
    summary["lambda_1"] = l1;
    summary["lambda_2"] = l2;
    try {
      summary["lambda_1"] = detail::json_number(flux_ratio(p.flux[0], ref->J1));
      summary["lambda_2"] = detail::json_number(flux_ratio(p.flux[1], ref->J2));
    } catch (const degenerate_input_error&) {
    }
  }
  std::printf("outer iterations = %d\nflux nonuniformity = %s\n", p.outer_iterations,
              format_number(p.nonuniformity).c_str());
  write_json(dir / "summary.json", summary);

  if (cfg.output.history) {
    auto history = nlohmann::ordered_json::array();
    for (const auto& it : r.history) {
      auto nodes = nlohmann::ordered_json::array();
      for (double x : it.mesh.nodes()) nodes.push_back(detail::json_number(x));
      history.push_back({{"iteration", it.index},
                         {"defect", detail::json_number(it.defect)},
                         {"nonuniformity", detail::json_number(it.nonuniformity)},
                         {"continuation", it.continuation},
                         {"nodes", std::move(nodes)}});
    }
    write_json(dir / "history.json", history);
  }
  return kSuccess;
}

int report_failures(std::size_t failures, std::size_t total) {
  if (failures == 0) return kSuccess;
  std::fprintf(stderr, "%zu of %zu points failed\n", failures, total);
  return kPartial;
}

int cmd_sweep(const RunConfig& cfg) {
  if (cfg.q0.ranged() && cfg.voltage.ranged())
    throw validation_error("sweep needs exactly one ranged axis; use diagram for two");
  int solved = kSuccess;
  if (!cfg.q0.ranged() && !cfg.voltage.ranged()) solved = cmd_solve(cfg);

  const SweepResult r = cfg.voltage.ranged() ? sweep_v(cfg.q0.value, cfg.voltage.values(), cfg.problem, cfg.workers)
                                             : sweep_q(cfg.voltage.value, cfg.q0.values(), cfg.problem, cfg.workers);
  const TableFormat fmt = cfg.output.format;
  write_table(fs::path(cfg.output.directory) / ("sweep" + extension(fmt)), sweep_table(r.points), fmt);
  for (const auto& p : r.points)
    if (!p.converged())
      std::fprintf(stderr, "q0 = %s, V = %s: %s\n", format_number(p.q0).c_str(), format_number(p.voltage).c_str(),
                   p.message.c_str());
  std::printf("%zu points, %zu failed\n", r.points.size(), r.failures());
  return solved != kSuccess ? solved : report_failures(r.failures(), r.points.size());
}

int cmd_diagram(const RunConfig& cfg) {
  const GridSpec grid = cfg.grid();
  const RatioSurface surface = build_surface(grid, cfg.workers);
  const ContourSet contours = trace_unity_contours(surface, cfg.problem, cfg.contour);
  const auto saddles = detect_saddle_nodes(contours);

  const fs::path dir = cfg.output.directory;
  const TableFormat fmt = cfg.output.format;
  write_table(dir / ("surface" + extension(fmt)), surface_table(surface), fmt);
  write_json(dir / "contours.json", contours_to_json(contours));
  write_json(dir / "bifurcations.json", bifurcations_to_json(saddles));

  for (const auto& w : contours.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  std::size_t anomalies = 0;
  for (const auto& l : classify_regions(surface)) anomalies += l.anomaly ? 1 : 0;
  std::printf("%zu points, %zu failed, %zu anomalies, %zu contour lines\n", surface.points.size(),
              surface.failures(), anomalies, contours.lines.size());
  for (const auto& b : saddles)
    std::printf("saddle node: lambda_%d = 1 turns at q0 = %s, V = %s\n", b.species, format_number(b.q0).c_str(),
                format_number(b.voltage).c_str());
  return report_failures(surface.failures(), surface.points.size());
}

int cmd_asymptotics(const RunConfig& cfg) {
  require_point(cfg, "asymptotics");
  const TwoSpeciesSetup& s = cfg.problem.setup;
  const double V = cfg.voltage.value, L = s.left, R = s.right, t = L / R;
  const GeometryMoments m = geometry_moments(ChannelGeometry(s.geometry, s.delta_x));
  nlohmann::ordered_json report{{"V", detail::json_number(V)},     {"L", detail::json_number(L)},
                        {"R", detail::json_number(R)},     {"alpha", detail::json_number(m.alpha)},
                        {"beta", detail::json_number(m.beta)}, {"H1", detail::json_number(m.H1)}};
  std::vector<std::string> notes;

  const SmallQExpansion small = small_q_expansion(V, L, R, m);
  report["A"] = detail::json_number(small.A);
  report["B"] = detail::json_number(small.B);
  report["small_q"] = {{"J10", detail::json_number(small.J10)},
                       {"J11", detail::json_number(small.J11)},
                       {"J20", detail::json_number(small.J20)},
                       {"J21", detail::json_number(small.J21)}};
  try {
    const auto [v1, v2] = small_q_critical_voltages(L, R, m);
    report["V1_0"] = detail::json_number(v1);
    report["V2_0"] = detail::json_number(v2);
  } catch (const degenerate_input_error& e) {
    notes.emplace_back(e.what());
  }
  if (t > 1.0 && m.alpha < gamma_threshold(t)) {
    report["gamma"] = detail::json_number(gamma_threshold(t));
    report["beta1"] = detail::json_number(beta1_root(t, m.alpha));
  } else {
    notes.emplace_back("beta_1 is defined only for L > R and alpha < gamma(L/R)");
  }
  try {
    const LargeQExpansion large = large_q_expansion(V, L, R, m);
    report["large_q"] = {{"J10", detail::json_number(large.J10)},
                         {"J11", detail::json_number(large.J11)},
                         {"J20", detail::json_number(large.J20)},
                         {"J21", detail::json_number(large.J21)}};
    report["lambda2_large_q"] = detail::json_number(lambda2_large_q_limit(V, t, m.alpha, m.beta));
  } catch (const degenerate_input_error& e) {
    notes.emplace_back(e.what());
  }
  try {
    const auto [v1, v2] = large_q_critical_voltages(L, R, m);
    report["V1_inf"] = detail::json_number(v1);
    report["V2_inf"] = detail::json_number(v2);
  } catch (const root_error& e) {
    notes.emplace_back(e.what());
  }
  if (!notes.empty()) report["notes"] = notes;

  for (const auto& [key, value] : report.items()) {
    if (value.is_object()) {
      for (const auto& [k, v] : value.items())
        std::printf("%s.%s = %s\n", key.c_str(), k.c_str(), format_number(v.get<double>()).c_str());
    } else if (value.is_number()) {
      std::printf("%s = %s\n", key.c_str(), format_number(value.get<double>()).c_str());
    }
  }
  for (const auto& n : notes) std::printf("note: %s\n", n.c_str());
  write_json(fs::path(cfg.output.directory) / "asymptotics.json", report);
  return kSuccess;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Steady PNP ion-channel fluxes, flux-ratio diagrams and asymptotics"};
  app.require_subcommand(1);

  std::string config_path, out_dir, monitor, convention, excess;
  unsigned workers = 0;
  auto* solve = app.add_subcommand("solve", "single point: profiles, element fluxes, summary");
  auto* sweep = app.add_subcommand("sweep", "one ranged axis: q0 or V sweep");
  auto* diagram = app.add_subcommand("diagram", "both axes ranged: surface, contours, saddle nodes");
  auto* asymptotics = app.add_subcommand("asymptotics", "closed-form coefficients and critical voltages");
  for (auto* sub : {solve, sweep, diagram, asymptotics}) {
    sub->add_option("--config", config_path, "configuration file (YAML or JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--workers", workers, "parallel workers")->check(CLI::PositiveNumber);
    sub->add_option("--monitor", monitor, "mesh monitor")->check(CLI::IsMember({"optimal", "boundary"}));
    sub->add_option("--charge-convention", convention, "permanent-charge plateau")
        ->check(CLI::IsMember({"paper", "unit-plateau"}));
    sub->add_option("--excess", excess, "excess chemical potential")->check(CLI::IsMember({"ideal", "hard-sphere"}));
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kSuccess : kValidation;
  }

  try {
    RunConfig cfg = load_config(config_path);
    ConfigOverrides o;
    if (!out_dir.empty()) o.directory = out_dir;
    if (workers) o.workers = workers;
    if (!monitor.empty()) o.monitor = detail::kMonitorNames.at(monitor);
    if (!convention.empty()) o.convention = detail::kConventionNames.at(convention);
    if (!excess.empty()) o.excess = detail::kExcessNames.at(excess);
    apply_overrides(cfg, o);

    if (*solve) return cmd_solve(cfg);
    if (*sweep) return cmd_sweep(cfg);
    if (*diagram) return cmd_diagram(cfg);
    return cmd_asymptotics(cfg);
  } catch (const validation_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kValidation;
  } catch (const degenerate_input_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kValidation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "solver failure: %s\n", e.what());
    return kSolverFailure;
  }
}
