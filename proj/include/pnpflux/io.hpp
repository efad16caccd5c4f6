#pragma once

// Tabular and JSON output at 16 significant digits, and the readers that
// turn those files back into the in-memory results.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "pnpflux/asymptotics.hpp"
#include "pnpflux/config.hpp"
#include "pnpflux/error.hpp"
#include "pnpflux/scan.hpp"

namespace pnpflux {

inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (v == 0.0) v = 0.0;  // no "-0"
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.16g", v);
  return buf;
}

inline double parse_number(const std::string& s) {
  const char* begin = s.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (s.empty() || end != begin + s.size()) throw validation_error("not a number: '" + s + "'");
  return v;
}

/// The value a reader recovers from the printed form.
inline double printed(double v) { return parse_number(format_number(v)); }

/// Header plus rows of cells; written as CSV or as a JSON array of records.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw validation_error("table has no column '" + name + "'");
  }
  double number(std::size_t row, const std::string& name) const { return parse_number(rows.at(row).at(column(name))); }
  const std::string& text(std::size_t row, const std::string& name) const { return rows.at(row).at(column(name)); }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw error("cannot write " + path.string());
  out << text;
  if (!out) throw error("write failed: " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw validation_error("cannot open " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

/// JSON numbers carry the printed value; non-finite values become null.
inline nlohmann::ordered_json json_number(double v) {
  if (!std::isfinite(v)) return nullptr;
  return printed(v);
}

inline double from_json_number(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace detail

inline std::string to_csv(const Table& t) {
  std::string out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      out += cells[i];
    }
    out += '\n';
  };
  line(t.header);
  for (const auto& r : t.rows) line(r);
  return out;
}

inline Table parse_csv(const std::string& text) {
  Table t;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw validation_error("CSV: missing header row");
  t.header = detail::split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != t.header.size())
      throw validation_error("CSV: row " + std::to_string(t.rows.size() + 1) + " has " + std::to_string(cells.size()) +
                             " cells, header has " + std::to_string(t.header.size()));
    t.rows.push_back(std::move(cells));
  }
  return t;
}

/// Numeric cells become JSON numbers, everything else strings.
inline nlohmann::ordered_json table_to_json(const Table& t) {
  auto out = nlohmann::ordered_json::array();
  for (const auto& r : t.rows) {
    auto rec = nlohmann::ordered_json::object();
    for (std::size_t i = 0; i < t.header.size(); ++i) {
      const std::string& cell = r[i];
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      const bool numeric = !cell.empty() && end == cell.c_str() + cell.size();
      rec[t.header[i]] = numeric ? detail::json_number(v) : nlohmann::ordered_json(cell);
    }
    out.push_back(std::move(rec));
  }
  return out;
}

inline Table table_from_json(const nlohmann::json& j, const std::vector<std::string>& header) {
  if (!j.is_array()) throw validation_error("JSON table: expected an array of records");
  Table t;
  t.header = header;
  for (const auto& rec : j) {
    std::vector<std::string> row;
    for (const auto& h : header) {
      if (!rec.contains(h)) throw validation_error("JSON table: record without '" + h + "'");
      const auto& v = rec.at(h);
      row.push_back(v.is_string() ? v.get<std::string>() : format_number(detail::from_json_number(v)));
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline void write_table(const std::filesystem::path& path, const Table& t, TableFormat format) {
  detail::write_text(path, format == TableFormat::csv ? to_csv(t) : table_to_json(t).dump(1) + "\n");
}

inline Table read_table(const std::filesystem::path& path, const std::vector<std::string>& header) {
  const std::string text = detail::read_text(path);
  if (path.extension() == ".json") return table_from_json(nlohmann::json::parse(text), header);
  Table t = parse_csv(text);
  if (t.header != header) throw validation_error(path.string() + ": unexpected columns");
  return t;
}

template <class Json>
void write_json(const std::filesystem::path& path, const Json& j) {
  detail::write_text(path, j.dump(1) + "\n");
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(detail::read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw validation_error(path.string() + ": " + e.what());
  }
}

inline std::string extension(TableFormat f) { return f == TableFormat::csv ? ".csv" : ".json"; }

// ---------------------------------------------------------------------------
// Profiles and element fluxes

inline const std::vector<std::string> kProfileColumns{"x", "phi", "c_1", "c_2", "mu_1", "mu_2"};
inline const std::vector<std::string> kElementFluxColumns{"x_left", "x_right", "J_1", "J_2"};

inline Table profile_table(const InternalProfiles& p) {
  Table t{kProfileColumns, {}};
  for (std::size_t i = 0; i < p.x.size(); ++i)
    t.rows.push_back({format_number(p.x[i]), format_number(p.potential[i]), format_number(p.concentration[0][i]),
                      format_number(p.concentration[1][i]), format_number(p.electrochemical[0][i]),
                      format_number(p.electrochemical[1][i])});
  return t;
}

inline Table element_flux_table(const InternalProfiles& p) {
  Table t{kElementFluxColumns, {}};
  for (std::size_t e = 0; e < p.x_left.size(); ++e)
    t.rows.push_back({format_number(p.x_left[e]), format_number(p.x_right[e]), format_number(p.element_flux[0][e]),
                      format_number(p.element_flux[1][e])});
  return t;
}

/// Nodal fields of a profile table.
inline InternalProfiles profiles_from_table(const Table& t) {
  InternalProfiles p;
  p.concentration.assign(2, {});
  p.electrochemical.assign(2, {});
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    p.x.push_back(t.number(i, "x"));
    p.potential.push_back(t.number(i, "phi"));
    p.concentration[0].push_back(t.number(i, "c_1"));
    p.concentration[1].push_back(t.number(i, "c_2"));
    p.electrochemical[0].push_back(t.number(i, "mu_1"));
    p.electrochemical[1].push_back(t.number(i, "mu_2"));
  }
  return p;
}

/// Adds the element columns of an element-flux table to `p`.
inline void element_fluxes_from_table(const Table& t, InternalProfiles& p) {
  p.x_left.clear();
  p.x_right.clear();
  p.element_flux.assign(2, {});
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    p.x_left.push_back(t.number(i, "x_left"));
    p.x_right.push_back(t.number(i, "x_right"));
    p.element_flux[0].push_back(t.number(i, "J_1"));
    p.element_flux[1].push_back(t.number(i, "J_2"));
  }
}

// ---------------------------------------------------------------------------
// Sweeps and surfaces

inline const std::vector<std::string> kSweepColumns{"q0", "V", "J_1", "J_2", "lambda_1", "lambda_2", "status"};
inline const std::vector<std::string> kSurfaceColumns{"q0", "V", "lambda_1", "lambda_2", "region", "status"};

inline PointStatus parse_status(const std::string& s) {
  if (s == "converged") return PointStatus::converged;
  if (s == "failed") return PointStatus::failed;
  throw validation_error("unknown status '" + s + "'");
}

inline Table sweep_table(const std::vector<PointResult>& points) {
  Table t{kSweepColumns, {}};
  for (const auto& p : points)
    t.rows.push_back({format_number(p.q0), format_number(p.voltage), format_number(p.J1), format_number(p.J2),
                      format_number(p.lambda1), format_number(p.lambda2), to_string(p.status)});
  return t;
}

inline std::vector<PointResult> sweep_from_table(const Table& t) {
  std::vector<PointResult> out;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    PointResult p;
    p.q0 = t.number(i, "q0");
    p.voltage = t.number(i, "V");
    p.J1 = t.number(i, "J_1");
    p.J2 = t.number(i, "J_2");
    p.lambda1 = t.number(i, "lambda_1");
    p.lambda2 = t.number(i, "lambda_2");
    p.status = parse_status(t.text(i, "status"));
    out.push_back(p);
  }
  return out;
}

/// "I", "II", "III", "anomaly" (region follows from the ratios) or "none" at failed points.
inline std::string region_text(const RegionLabel& l) {
  if (!l.region) return "none";
  if (l.anomaly) return "anomaly";
  return to_string(*l.region);
}

inline Table surface_table(const RatioSurface& s) {
  Table t{kSurfaceColumns, {}};
  for (const auto& p : s.points)
    t.rows.push_back({format_number(p.q0), format_number(p.voltage), format_number(p.lambda1),
                      format_number(p.lambda2), region_text(classify_point(p)), to_string(p.status)});
  return t;
}

struct SurfaceRecord {
  RatioSurface surface;  // fluxes and references are not part of the file
  std::vector<RegionLabel> regions;
};

/// Rebuilds the axes from the row-major (V outer, q0 inner) layout.
inline SurfaceRecord surface_from_table(const Table& t) {
  SurfaceRecord r;
  RatioSurface& s = r.surface;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    PointResult p;
    p.q0 = t.number(i, "q0");
    p.voltage = t.number(i, "V");
    p.lambda1 = t.number(i, "lambda_1");
    p.lambda2 = t.number(i, "lambda_2");
    p.J1 = p.J2 = std::numeric_limits<double>::quiet_NaN();
    p.status = parse_status(t.text(i, "status"));
    const std::string& region = t.text(i, "region");
    RegionLabel label;
    if (region == "anomaly") {
      label = {classify_ratios(p.lambda1, p.lambda2), true};
    } else if (region == "I" || region == "II" || region == "III") {
      label.region = region == "I" ? RegimeLabel::I : region == "II" ? RegimeLabel::II : RegimeLabel::III;
    } else if (region != "none") {
      throw validation_error("unknown region '" + region + "'");
    }
    if (s.voltage.empty() || s.voltage.back() != p.voltage) s.voltage.push_back(p.voltage);
    if (s.voltage.size() == 1) s.q0.push_back(p.q0);
    s.points.push_back(p);
    r.regions.push_back(label);
  }
  if (s.points.size() != s.q0.size() * s.voltage.size())
    throw validation_error("surface table is not a full q0 x V grid");
  for (std::size_t iv = 0; iv < s.voltage.size(); ++iv)
    for (std::size_t iq = 0; iq < s.q0.size(); ++iq)
      if (s.at(iv, iq).q0 != s.q0[iq] || s.at(iv, iq).voltage != s.voltage[iv])
        throw validation_error("surface table rows are not in grid order");
  return r;
}

// ---------------------------------------------------------------------------
// Contours and saddle nodes

inline nlohmann::ordered_json contours_to_json(const ContourSet& c) {
  auto out = nlohmann::ordered_json::array();
  for (const auto& line : c.lines) {
    auto pts = nlohmann::ordered_json::array();
    for (const auto& p : line.points) pts.push_back({detail::json_number(p[0]), detail::json_number(p[1])});
    nlohmann::ordered_json rec;
    rec["species"] = line.species;
    rec["points"] = std::move(pts);
    out.push_back(std::move(rec));
  }
  return out;
}

/// Polylines only; residuals and closure are not serialized.
inline ContourSet contours_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw validation_error("contours: expected an array");
  ContourSet c;
  for (const auto& rec : j) {
    ContourPolyline line;
    line.species = rec.at("species").get<int>();
    for (const auto& p : rec.at("points"))
      line.points.push_back({detail::from_json_number(p.at(0)), detail::from_json_number(p.at(1))});
    c.lines.push_back(std::move(line));
  }
  return c;
}

inline nlohmann::ordered_json bifurcations_to_json(const std::vector<BifurcationPoint>& points) {
  auto out = nlohmann::ordered_json::array();
  for (const auto& b : points) {
    nlohmann::ordered_json rec;
    rec["species"] = b.species;
    rec["q0"] = detail::json_number(b.q0);
    rec["V"] = detail::json_number(b.voltage);
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::vector<BifurcationPoint> bifurcations_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw validation_error("bifurcations: expected an array");
  std::vector<BifurcationPoint> out;
  for (const auto& rec : j)
    out.push_back({rec.at("species").get<int>(), detail::from_json_number(rec.at("q0")),
                   detail::from_json_number(rec.at("V"))});
  return out;
}

}  // namespace pnpflux
