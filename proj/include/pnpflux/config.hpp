#pragma once

// Run configuration: a nested key/value document (YAML) or the same schema as
// JSON, validated in full before anything is solved.

#include <yaml-cpp/yaml.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "pnpflux/error.hpp"
#include "pnpflux/scan.hpp"

namespace pnpflux {

enum class TableFormat { csv, json };

/// A fixed value or a grid range.
struct AxisConfig {
  double value = 0.0;
  std::optional<AxisSpec> range;

  bool ranged() const { return range.has_value(); }
  std::vector<double> values() const { return range ? range->values() : std::vector<double>{value}; }
};

struct OutputConfig {
  std::string directory = "out";
  TableFormat format = TableFormat::csv;
  bool history = false;  // per-iteration mesh diagnostics from `solve`
};

struct RunConfig {
  ProblemTemplate problem;
  AxisConfig q0{1e-4, std::nullopt};
  AxisConfig voltage{10.0, std::nullopt};
  bool reference = true;  // solve the Q0 = 0 companion to report λ_k
  ContourOptions contour;
  OutputConfig output;
  unsigned workers = 1;

  GridSpec grid() const {
    if (!q0.ranged() || !voltage.ranged()) throw validation_error("diagram needs both q0 and voltage as ranges");
    return {*q0.range, *voltage.range, problem};
  }
};

/// Command-line replacements applied after the document is read.
struct ConfigOverrides {
  std::optional<MonitorVariant> monitor;
  std::optional<ChargeConvention> convention;
  std::optional<ExcessKind> excess;
  std::optional<unsigned> workers;
  std::optional<std::string> directory;
};

namespace detail {

inline nlohmann::json yaml_to_json(const YAML::Node& node) {
  switch (node.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined: return nullptr;
    case YAML::NodeType::Sequence: {
      auto out = nlohmann::json::array();
      for (const auto& item : node) out.push_back(yaml_to_json(item));
      return out;
    }
    case YAML::NodeType::Map: {
      auto out = nlohmann::json::object();
      for (const auto& kv : node) {
        const auto key = kv.first.as<std::string>();
        if (out.contains(key)) throw validation_error("config: duplicate key '" + key + "'");
        out[key] = yaml_to_json(kv.second);
      }
      return out;
    }
    case YAML::NodeType::Scalar: {
      if (node.Tag() == "!") return node.Scalar();  // quoted
      bool b = false;
      if (YAML::convert<bool>::decode(node, b)) return b;
      double d = 0.0;
      if (YAML::convert<double>::decode(node, d)) return d;
      return node.Scalar();
    }
  }
  return nullptr;
}

/// Reads one section, collecting every problem instead of stopping at the first.
class SectionReader {
 public:
  SectionReader(const nlohmann::json& obj, std::string path, std::vector<std::string>& errors)
      : obj_(obj), path_(std::move(path)), errors_(errors) {
    if (!obj_.is_object()) errors_.push_back(path_ + ": expected a section of key/value pairs");
  }

  bool has(const std::string& key) const { return obj_.is_object() && obj_.contains(key); }

  const nlohmann::json* raw(const std::string& key) {
    seen_.insert(key);
    return has(key) ? &obj_.at(key) : nullptr;
  }

  void number(const std::string& key, double& out) {
    if (const auto* v = raw(key)) {
      if (v->is_number())
        out = v->get<double>();
      else
        bad(key, "expected a number");
    }
  }

  template <class Int>
  void integer(const std::string& key, Int& out, long long lo) {
    if (const auto* v = raw(key)) {
      const double d = v->is_number() ? v->get<double>() : 0.5;
      if (d != std::floor(d) || d < static_cast<double>(lo))
        bad(key, "expected an integer >= " + std::to_string(lo));
      else
        out = static_cast<Int>(d);
    }
  }

  void boolean(const std::string& key, bool& out) {
    if (const auto* v = raw(key)) {
      if (v->is_boolean())
        out = v->get<bool>();
      else
        bad(key, "expected true or false");
    }
  }

  void text(const std::string& key, std::string& out) {
    if (const auto* v = raw(key)) {
      if (v->is_string())
        out = v->get<std::string>();
      else
        bad(key, "expected a string");
    }
  }

  template <class E>
  void choice(const std::string& key, E& out, const std::map<std::string, E>& names) {
    if (const auto* v = raw(key)) {
      std::string allowed;
      for (const auto& [n, _] : names) allowed += (allowed.empty() ? "" : "|") + n;
      if (!v->is_string() || !names.contains(v->get<std::string>()))
        bad(key, "expected one of " + allowed);
      else
        out = names.at(v->get<std::string>());
    }
  }

  void bad(const std::string& key, const std::string& why) { errors_.push_back(path_ + "." + key + ": " + why); }

  void finish() {
    if (!obj_.is_object()) return;
    for (const auto& [key, _] : obj_.items())
      if (!seen_.contains(key)) errors_.push_back(path_ + "." + key + ": unknown key");
  }

  const std::string& path() const { return path_; }
  std::vector<std::string>& errors() { return errors_; }

 private:
  const nlohmann::json& obj_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

inline const std::map<std::string, AxisSpacing> kSpacingNames{
    {"linear", AxisSpacing::linear}, {"log", AxisSpacing::log}, {"hybrid", AxisSpacing::hybrid}};
inline const std::map<std::string, ChargeConvention> kConventionNames{
    {"paper", ChargeConvention::paper}, {"unit-plateau", ChargeConvention::unit_plateau}};
inline const std::map<std::string, ExcessKind> kExcessNames{{"ideal", ExcessKind::ideal},
                                                            {"hard-sphere", ExcessKind::hard_sphere}};
inline const std::map<std::string, MonitorVariant> kMonitorNames{{"optimal", MonitorVariant::optimal},
                                                                 {"boundary", MonitorVariant::boundary_weighted}};
inline const std::map<std::string, GeometryVariant> kGeometryNames{{"exact", GeometryVariant::exact},
                                                                   {"regularized", GeometryVariant::regularized}};
inline const std::map<std::string, FluxEstimator> kEstimatorNames{{"conservative", FluxEstimator::conservative},
                                                                  {"element-mean", FluxEstimator::element_mean}};
inline const std::map<std::string, TableFormat> kFormatNames{{"csv", TableFormat::csv}, {"json", TableFormat::json}};

inline void read_axis(SectionReader& section, const std::string& key, AxisConfig& axis) {
  const auto* v = section.raw(key);
  if (!v) return;
  if (v->is_number()) {
    axis.value = v->get<double>();
    axis.range.reset();
    return;
  }
  if (!v->is_object()) {
    section.bad(key, "expected a number or a range section {lo, hi, count, spacing}");
    return;
  }
  const std::size_t before = section.errors().size();
  SectionReader r(*v, section.path() + "." + key, section.errors());
  AxisSpec spec;
  for (const char* required : {"lo", "hi", "count"})
    if (!r.has(required)) r.bad(required, "required in a range");
  r.number("lo", spec.lo);
  r.number("hi", spec.hi);
  r.integer("count", spec.count, 1);
  r.choice("spacing", spec.spacing, kSpacingNames);
  r.number("split", spec.split);
  r.number("log_fraction", spec.log_fraction);
  r.finish();
  if (section.errors().size() != before) return;
  if (spec.count == 1) {
    if (spec.lo != spec.hi) r.bad("count", "a single-point range needs lo = hi");
    axis.value = spec.lo;
    axis.range.reset();
    return;
  }
  try {
    spec.validate(key.c_str());
    axis.range = spec;
  } catch (const validation_error& e) {
    section.errors().push_back(section.path() + "." + key + ": " + e.what());
  }
}

/// A boundary value given once (both species) or per species; checked for
/// positivity and for z_1 c_1 + z_2 c_2 = 0 with z = (+1, -1).
inline void read_boundary(SectionReader& section, const std::string& key, double& out) {
  const auto* v = section.raw(key);
  if (!v) return;
  std::vector<double> c;
  if (v->is_number()) {
    c = {v->get<double>(), v->get<double>()};
  } else if (v->is_array() && v->size() == 2 && (*v)[0].is_number() && (*v)[1].is_number()) {
    c = {(*v)[0].get<double>(), (*v)[1].get<double>()};
  } else {
    section.bad(key, "expected a concentration or [cation, anion]");
    return;
  }
  if (!(c[0] > 0.0) || !(c[1] > 0.0)) {
    section.bad(key, "concentrations must be positive");
    return;
  }
  const double charge = c[0] - c[1];
  if (std::abs(charge) > 1e-12 * std::max(c[0], c[1])) {
    std::ostringstream msg;
    msg << "electroneutrality violated (z_1 c_1 + z_2 c_2 = " << charge << ")";
    section.bad(key, msg.str());
    return;
  }
  out = c[0];
}

}  // namespace detail

/// Validates a parsed document; every offending key is listed in one error.
inline RunConfig parse_config(const nlohmann::json& doc) {
  std::vector<std::string> errors;
  RunConfig cfg;
  TwoSpeciesSetup& s = cfg.problem.setup;
  AdaptControls& c = cfg.problem.controls;

  detail::SectionReader top(doc, "config", errors);
  if (const auto* p = top.raw("problem")) {
    detail::SectionReader r(*p, "problem", errors);
    detail::read_boundary(r, "left", s.left);
    detail::read_boundary(r, "right", s.right);
    detail::read_axis(r, "voltage", cfg.voltage);
    detail::read_axis(r, "q0", cfg.q0);
    r.number("epsilon", s.epsilon);
    r.integer("nodes", cfg.problem.nodes, 5);
    r.number("delta", s.delta);
    r.choice("geometry", s.geometry, detail::kGeometryNames);
    r.number("delta_x", s.delta_x);
    r.choice("excess", s.excess, detail::kExcessNames);
    if (const auto* radii = r.raw("radii")) {
      if (radii->is_array() && radii->size() == 2 && (*radii)[0].is_number() && (*radii)[1].is_number()) {
        s.radius_cation = (*radii)[0].get<double>();
        s.radius_anion = (*radii)[1].get<double>();
        if (!(s.radius_cation >= 0.0) || !(s.radius_anion >= 0.0)) r.bad("radii", "radii must be non-negative");
      } else {
        r.bad("radii", "expected [cation, anion]");
      }
    }
    r.choice("charge_convention", s.convention, detail::kConventionNames);
    r.choice("monitor", c.monitor.variant, detail::kMonitorNames);
    r.integer("monitor_smoothing", c.monitor.smoothing_passes, 0);
    r.boolean("reference", cfg.reference);
    r.finish();
    if (!(s.epsilon > 0.0)) r.bad("epsilon", "must be positive");
    if (!(s.delta > 0.0 && s.delta < 1.0 / 6.0)) r.bad("delta", "must lie in (0, 1/6)");
    if (!(s.delta_x > 0.0 && s.delta_x < 0.1)) r.bad("delta_x", "must lie in (0, 0.1)");
    if (!cfg.q0.ranged() && !(cfg.q0.value >= 0.0)) r.bad("q0", "must be non-negative");
    if (cfg.q0.ranged() && !(cfg.q0.range->lo >= 0.0)) r.bad("q0", "range must be non-negative");
  }
  if (const auto* p = top.raw("solver")) {
    detail::SectionReader r(*p, "solver", errors);
    SolverControls& sc = c.solver;
    r.number("tolerance", sc.tolerance);
    r.number("step_tolerance", sc.step_tolerance);
    r.integer("max_iterations", sc.max_iterations, 1);
    r.number("monotonicity", sc.monotonicity);
    r.number("min_step", sc.min_step);
    r.integer("pseudo_transient_steps", sc.pseudo_transient_steps, 0);
    r.integer("continuation_steps", sc.continuation_steps, 1);
    r.integer("max_continuation_rungs", sc.max_continuation_rungs, 1);
    r.integer("outer_iterations", c.outer_iterations, 1);
    r.choice("flux_estimator", c.estimator, detail::kEstimatorNames);
    r.integer("workers", cfg.workers, 1);
    r.number("contour_tolerance", cfg.contour.tolerance);
    r.number("contour_position_tolerance", cfg.contour.position_tolerance);
    r.integer("contour_max_bisections", cfg.contour.max_bisections, 1);
    r.finish();
    if (!(sc.tolerance > 0.0)) r.bad("tolerance", "must be positive");
    if (!(sc.step_tolerance >= 0.0)) r.bad("step_tolerance", "must be non-negative");
    if (!(sc.monotonicity > 0.0 && sc.monotonicity < 1.0)) r.bad("monotonicity", "must lie in (0, 1)");
    if (!(sc.min_step > 0.0 && sc.min_step < 1.0)) r.bad("min_step", "must lie in (0, 1)");
    if (!(cfg.contour.tolerance > 0.0)) r.bad("contour_tolerance", "must be positive");
    if (!(cfg.contour.position_tolerance > 0.0 && cfg.contour.position_tolerance < 1.0))
      r.bad("contour_position_tolerance", "must lie in (0, 1)");
  }
  if (const auto* p = top.raw("output")) {
    detail::SectionReader r(*p, "output", errors);
    r.text("directory", cfg.output.directory);
    r.choice("format", cfg.output.format, detail::kFormatNames);
    r.boolean("history", cfg.output.history);
    r.finish();
    if (cfg.output.directory.empty()) r.bad("directory", "must not be empty");
  }
  top.finish();

  if (!errors.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw validation_error(msg);
  }
  cfg.contour.workers = cfg.workers;
  return cfg;
}

inline nlohmann::json read_config_document(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw validation_error("cannot open config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  const std::string text = buffer.str();
  if (path.extension() == ".json") {
    try {
      return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw validation_error(path.string() + ": " + e.what());
    }
  }
  try {
    const YAML::Node node = YAML::Load(text);
    if (node.IsNull()) return nlohmann::json::object();
    return detail::yaml_to_json(node);
  } catch (const YAML::Exception& e) {
    throw validation_error(path.string() + ": " + e.what());
  }
}

inline RunConfig load_config(const std::filesystem::path& path) { return parse_config(read_config_document(path)); }

inline void apply_overrides(RunConfig& cfg, const ConfigOverrides& o) {
  if (o.monitor) cfg.problem.controls.monitor.variant = *o.monitor;
  if (o.convention) cfg.problem.setup.convention = *o.convention;
  if (o.excess) cfg.problem.setup.excess = *o.excess;
  if (o.workers) {
    if (*o.workers == 0) throw validation_error("--workers must be at least 1");
    cfg.workers = *o.workers;
    cfg.contour.workers = *o.workers;
  }
  if (o.directory) {
    if (o.directory->empty()) throw validation_error("--out must not be empty");
    cfg.output.directory = *o.directory;
  }
}

}  // namespace pnpflux
