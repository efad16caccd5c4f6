#pragma once

// Parameter sweeps over (q0, V) with q0 = 2 Q0, flux-ratio surfaces, λ_k = 1
// contour tracing, region labels and saddle-node detection.
//
// Every point is computed by the same cold pipeline (adapt_and_solve from the
// uniform mesh), so results do not depend on evaluation order or worker count.
// A converged neighbour is used as a warm start only when that pipeline fails.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "pnpflux/asymptotics.hpp"
#include "pnpflux/mmpde.hpp"

namespace pnpflux {

/// Runs task(i) for i in [0, count) on up to `workers` threads. Exceptions are
/// the task's responsibility; results must be written to slot i.
inline void parallel_for(std::size_t count, unsigned workers, const std::function<void(std::size_t)>& task) {
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(count, 1))));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) task(i);
    });
}

/// Everything but (q0, V) of a two-species run.
struct ProblemTemplate {
  TwoSpeciesSetup setup;
  std::size_t nodes = 301;
  AdaptControls controls;

  PnpProblem at(double q0, double voltage) const {
    TwoSpeciesSetup s = setup;
    s.q0 = q0;
    s.voltage = voltage;
    return make_two_species_problem(s);
  }
};

enum class PointStatus { converged, failed };

inline std::string to_string(PointStatus s) { return s == PointStatus::converged ? "converged" : "failed"; }

/// Fluxes at one parameter point; `warm_started` marks the fallback path.
struct FluxSample {
  double J1 = 0.0, J2 = 0.0;
  PointStatus status = PointStatus::failed;
  std::string message;
  bool warm_started = false;
  std::optional<DiscreteSolution> solution;  // kept only when requested
};

inline FluxSample solve_fluxes(const ProblemTemplate& tpl, double q0, double voltage,
                               const DiscreteSolution* warm = nullptr, bool keep_solution = false) {
  FluxSample out;
  try {
    const PnpProblem problem = tpl.at(q0, voltage);
    AdaptResult r;
    try {
      r = adapt_and_solve(problem, tpl.nodes, tpl.controls);
    } catch (const convergence_error&) {
      if (!warm) throw;
      r = adapt_and_solve(problem, *warm, tpl.controls);
      out.warm_started = true;
    }
    out.J1 = r.fluxes.flux[0];
    out.J2 = r.fluxes.flux[1];
    out.status = PointStatus::converged;
    if (keep_solution) out.solution = std::move(r.solution);
  } catch (const error& e) {
    out.status = PointStatus::failed;
    out.message = e.what();
  }
  return out;
}

/// One (q0, V) point of a sweep or surface.
struct PointResult {
  double q0 = 0.0, voltage = 0.0;
  double J1 = 0.0, J2 = 0.0;
  double lambda1 = 0.0, lambda2 = 0.0;
  PointStatus status = PointStatus::failed;
  std::string message;
  bool warm_started = false;

  bool converged() const { return status == PointStatus::converged; }
};

/// Zero-charge reference fluxes of one voltage.
struct ReferenceFlux {
  double voltage = 0.0;
  double J1 = 0.0, J2 = 0.0;
  PointStatus status = PointStatus::failed;
  std::string message;
};

inline ReferenceFlux reference_fluxes(const ProblemTemplate& tpl, double voltage) {
  const FluxSample s = solve_fluxes(tpl, 0.0, voltage);
  return {voltage, s.J1, s.J2, s.status, s.message};
}

namespace detail {

inline PointResult combine(double q0, double voltage, const FluxSample& s, const ReferenceFlux& ref) {
  PointResult p{q0, voltage, s.J1, s.J2, 0.0, 0.0, s.status, s.message, s.warm_started};
  if (!p.converged()) return p;
  if (ref.status != PointStatus::converged) {
    p.status = PointStatus::failed;
    p.message = "zero-charge reference failed: " + ref.message;
    return p;
  }
  try {
    p.lambda1 = flux_ratio(s.J1, ref.J1);
    p.lambda2 = flux_ratio(s.J2, ref.J2);
  } catch (const error& e) {
    p.status = PointStatus::failed;
    p.message = e.what();
  }
  return p;
}

inline void require_sorted(const std::vector<double>& v, const char* what) {
  if (v.empty()) throw validation_error(std::string(what) + ": empty list");
  for (std::size_t i = 1; i < v.size(); ++i)
    if (!(v[i] > v[i - 1])) throw validation_error(std::string(what) + ": values must be strictly increasing");
}

/// Evaluates `coords` with the cold pipeline, then retries failures warm-started
/// from the nearest converged entry of the first pass.
inline std::vector<FluxSample> evaluate_sequence(const ProblemTemplate& tpl,
                                                 const std::vector<std::pair<double, double>>& coords,
                                                 unsigned workers) {
  std::vector<FluxSample> out(coords.size());
  parallel_for(coords.size(), workers, [&](std::size_t i) {
    out[i] = solve_fluxes(tpl, coords[i].first, coords[i].second, nullptr, true);
  });
  std::vector<std::size_t> failed;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (out[i].status == PointStatus::failed) failed.push_back(i);
  std::vector<FluxSample> retried(failed.size());
  parallel_for(failed.size(), workers, [&](std::size_t f) {
    const std::size_t i = failed[f];
    for (std::size_t d = 1; d < out.size(); ++d) {
      for (const std::ptrdiff_t j : {static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(d),
                                     static_cast<std::ptrdiff_t>(i + d)}) {
        if (j < 0 || j >= static_cast<std::ptrdiff_t>(out.size())) continue;
        const FluxSample& n = out[static_cast<std::size_t>(j)];
        if (n.status != PointStatus::converged) continue;
        FluxSample s = solve_fluxes(tpl, coords[i].first, coords[i].second, &*n.solution);
        if (s.status == PointStatus::converged) {
          retried[f] = std::move(s);
          return;
        }
      }
    }
    retried[f] = out[i];
    retried[f].solution.reset();
  });
  for (std::size_t f = 0; f < failed.size(); ++f) out[failed[f]] = std::move(retried[f]);
  for (auto& s : out) s.solution.reset();
  return out;
}

}  // namespace detail

struct SweepResult {
  std::vector<PointResult> points;
  std::vector<ReferenceFlux> references;  // one per distinct voltage
  std::size_t failures() const {
    return static_cast<std::size_t>(std::count_if(points.begin(), points.end(),
                                                  [](const PointResult& p) { return !p.converged(); }));
  }
};

/// λ_k(q0) at fixed V against the zero-charge solve of the same V.
inline SweepResult sweep_q(double voltage, const std::vector<double>& q0_list, const ProblemTemplate& tpl,
                           unsigned workers = 1) {
  detail::require_sorted(q0_list, "sweep_q");
  if (!(q0_list.front() >= 0.0)) throw validation_error("sweep_q: q0 must be non-negative");
  SweepResult r;
  r.references.push_back(reference_fluxes(tpl, voltage));
  std::vector<std::pair<double, double>> coords;
  for (double q : q0_list) coords.emplace_back(q, voltage);
  const auto samples = detail::evaluate_sequence(tpl, coords, workers);
  for (std::size_t i = 0; i < coords.size(); ++i)
    r.points.push_back(detail::combine(coords[i].first, voltage, samples[i], r.references[0]));
  return r;
}

/// λ_k(V) at fixed q0; each voltage gets its own zero-charge reference.
inline SweepResult sweep_v(double q0, const std::vector<double>& voltages, const ProblemTemplate& tpl,
                           unsigned workers = 1) {
  detail::require_sorted(voltages, "sweep_v");
  if (!(q0 >= 0.0)) throw validation_error("sweep_v: q0 must be non-negative");
  SweepResult r;
  r.references.resize(voltages.size());
  parallel_for(voltages.size(), workers, [&](std::size_t i) { r.references[i] = reference_fluxes(tpl, voltages[i]); });
  std::vector<std::pair<double, double>> coords;
  for (double v : voltages) coords.emplace_back(q0, v);
  const auto samples = detail::evaluate_sequence(tpl, coords, workers);
  for (std::size_t i = 0; i < coords.size(); ++i)
    r.points.push_back(detail::combine(q0, voltages[i], samples[i], r.references[i]));
  return r;
}

// ---------------------------------------------------------------------------
// Grids and surfaces

enum class AxisSpacing { linear, log, hybrid };

inline std::string to_string(AxisSpacing s) {
  switch (s) {
    case AxisSpacing::linear: return "linear";
    case AxisSpacing::log: return "log";
    case AxisSpacing::hybrid: return "hybrid";
  }
  return "?";
}

/// Hybrid spacing is logarithmic on [lo, split] with round(log_fraction·count)
/// nodes and linear on [split, hi] for the rest.
struct AxisSpec {
  double lo = 0.0, hi = 1.0;
  int count = 2;
  AxisSpacing spacing = AxisSpacing::linear;
  double split = 0.0;  // hybrid only; 0 selects min(sqrt(lo·hi), hi/100)
  double log_fraction = 0.6;

  void validate(const char* name) const {
    const std::string n(name);
    if (count < 2) throw validation_error(n + " axis: count must be >= 2");
    if (!(hi > lo)) throw validation_error(n + " axis: hi must exceed lo");
    if (spacing != AxisSpacing::linear && !(lo > 0.0))
      throw validation_error(n + " axis: logarithmic spacing needs lo > 0");
    if (spacing == AxisSpacing::hybrid) {
      if (!(log_fraction > 0.0 && log_fraction < 1.0))
        throw validation_error(n + " axis: log_fraction must lie in (0, 1)");
      if (split != 0.0 && !(split > lo && split < hi)) throw validation_error(n + " axis: split must lie in (lo, hi)");
    }
  }

  double split_point() const { return split != 0.0 ? split : std::min(std::sqrt(lo * hi), 0.01 * hi); }

  std::vector<double> values() const {
    validate("grid");
    std::vector<double> v(static_cast<std::size_t>(count));
    auto log_fill = [&](double a, double b, int first, int n) {
      for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(first + i)] = a * std::pow(b / a, double(i) / (n - 1));
    };
    auto lin_fill = [&](double a, double b, int first, int n, int offset) {
      for (int i = 0; i < n; ++i)
        v[static_cast<std::size_t>(first + i)] = a + (b - a) * double(i + offset) / (n - 1 + offset);
    };
    switch (spacing) {
      case AxisSpacing::linear: lin_fill(lo, hi, 0, count, 0); break;
      case AxisSpacing::log: log_fill(lo, hi, 0, count); break;
      case AxisSpacing::hybrid: {
        const int n_log = std::clamp(static_cast<int>(std::lround(log_fraction * count)), 2, count - 1);
        const double s = split_point();
        if (!(s > lo && s < hi)) throw validation_error("grid axis: hybrid split outside (lo, hi)");
        log_fill(lo, s, 0, n_log);
        lin_fill(s, hi, n_log, count - n_log, 1);  // split itself belongs to the log part
        break;
      }
    }
    v.front() = lo;
    v.back() = hi;
    return v;
  }
};

struct GridSpec {
  AxisSpec q0{1e-5, 3.0, 30, AxisSpacing::hybrid};
  AxisSpec voltage{-110.0, 70.0, 30, AxisSpacing::linear};
  ProblemTemplate problem;

  void validate() const {
    q0.validate("q0");
    voltage.validate("V");
    if (!(q0.lo > 0.0)) throw validation_error("q0 axis: the surface needs q0 > 0 (λ = 1 at q0 = 0)");
  }
};

/// Row-major in V: point(iv, iq) = points[iv * q0.size() + iq].
struct RatioSurface {
  std::vector<double> q0;
  std::vector<double> voltage;
  std::vector<PointResult> points;
  std::vector<ReferenceFlux> references;  // per V row

  std::size_t index(std::size_t iv, std::size_t iq) const { return iv * q0.size() + iq; }
  const PointResult& at(std::size_t iv, std::size_t iq) const { return points[index(iv, iq)]; }
  PointResult& at(std::size_t iv, std::size_t iq) { return points[index(iv, iq)]; }
  std::size_t failures() const {
    return static_cast<std::size_t>(std::count_if(points.begin(), points.end(),
                                                  [](const PointResult& p) { return !p.converged(); }));
  }
};

/// Evaluates the whole grid. Failed points are retried warm-started from the
/// nearest converged point in grid distance (ties broken by index).
inline RatioSurface build_surface(const GridSpec& grid, unsigned workers = 1) {
  grid.validate();
  RatioSurface s;
  s.q0 = grid.q0.values();
  s.voltage = grid.voltage.values();
  const std::size_t nq = s.q0.size(), nv = s.voltage.size();
  s.references.resize(nv);
  parallel_for(nv, workers, [&](std::size_t iv) { s.references[iv] = reference_fluxes(grid.problem, s.voltage[iv]); });

  std::vector<FluxSample> samples(nq * nv);
  parallel_for(samples.size(), workers, [&](std::size_t i) {
    samples[i] = solve_fluxes(grid.problem, s.q0[i % nq], s.voltage[i / nq], nullptr, true);
  });

  std::vector<std::size_t> failed;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].status == PointStatus::failed) failed.push_back(i);
  std::vector<FluxSample> retried(failed.size());
  parallel_for(failed.size(), workers, [&](std::size_t f) {
    const std::size_t i = failed[f];
    const auto iv = static_cast<std::ptrdiff_t>(i / nq), iq = static_cast<std::ptrdiff_t>(i % nq);
    std::vector<std::pair<std::ptrdiff_t, std::size_t>> neighbours;
    for (std::size_t j = 0; j < samples.size(); ++j) {
      if (samples[j].status != PointStatus::converged) continue;
      const auto jv = static_cast<std::ptrdiff_t>(j / nq), jq = static_cast<std::ptrdiff_t>(j % nq);
      neighbours.emplace_back(std::abs(jv - iv) + std::abs(jq - iq), j);
    }
    std::sort(neighbours.begin(), neighbours.end());
    if (neighbours.size() > 4) neighbours.resize(4);
    for (const auto& [dist, j] : neighbours) {
      FluxSample r = solve_fluxes(grid.problem, s.q0[i % nq], s.voltage[i / nq], &*samples[j].solution);
      if (r.status == PointStatus::converged) {
        retried[f] = std::move(r);
        return;
      }
    }
    retried[f] = samples[i];
    retried[f].solution.reset();
  });
  for (std::size_t f = 0; f < failed.size(); ++f) samples[failed[f]] = std::move(retried[f]);

  s.points.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i)
    s.points.push_back(detail::combine(s.q0[i % nq], s.voltage[i / nq], samples[i], s.references[i / nq]));
  return s;
}

// ---------------------------------------------------------------------------
// Region labels

struct RegionLabel {
  std::optional<RegimeLabel> region;  // empty at failed points
  bool anomaly = false;               // λ_1 >= λ_2 or a non-positive ratio
};

inline RegionLabel classify_point(const PointResult& p) {
  RegionLabel l;
  if (!p.converged()) return l;
  l.anomaly = !(p.lambda1 > 0.0) || !(p.lambda2 > 0.0) || !(p.lambda1 < p.lambda2);
  l.region = classify_ratios(p.lambda1, p.lambda2);
  return l;
}

inline std::vector<RegionLabel> classify_regions(const RatioSurface& surface) {
  std::vector<RegionLabel> out;
  out.reserve(surface.points.size());
  for (const auto& p : surface.points) out.push_back(classify_point(p));
  return out;
}

// ---------------------------------------------------------------------------
// Contours

/// λ_k at an arbitrary (q0, V), k in {1, 2}. Must be deterministic.
using RatioEvaluator = std::function<double(int species, double q0, double voltage)>;

/// Fresh-solve evaluator with a thread-safe cache of zero-charge references.
class SolverRatioEvaluator {
 public:
  explicit SolverRatioEvaluator(ProblemTemplate tpl) : tpl_(std::move(tpl)) {}

  void seed_reference(const ReferenceFlux& r) {
    if (r.status != PointStatus::converged) return;
    std::lock_guard lock(mutex_);
    cache_.emplace(r.voltage, r);
  }

  double operator()(int species, double q0, double voltage) {
    const ReferenceFlux ref = reference(voltage);
    if (ref.status != PointStatus::converged) throw error("zero-charge reference failed: " + ref.message);
    const FluxSample s = solve_fluxes(tpl_, q0, voltage);
    if (s.status != PointStatus::converged) throw error(s.message);
    return species == 1 ? flux_ratio(s.J1, ref.J1) : flux_ratio(s.J2, ref.J2);
  }

 private:
  ReferenceFlux reference(double voltage) {
    {
      std::lock_guard lock(mutex_);
      if (auto it = cache_.find(voltage); it != cache_.end()) return it->second;
    }
    ReferenceFlux r = reference_fluxes(tpl_, voltage);
    std::lock_guard lock(mutex_);
    cache_.emplace(voltage, r);
    return r;
  }

  ProblemTemplate tpl_;
  std::mutex mutex_;
  std::map<double, ReferenceFlux> cache_;
};

struct ContourOptions {
  double tolerance = 1e-3;  // on |λ_k - 1| at every vertex
  // Bracket width, as a fraction of the edge, below which bisection may stop.
  // Near q0 = 0 every point has |λ_k - 1| < tolerance, so the residual alone
  // does not locate the crossing.
  double position_tolerance = 1e-2;
  int max_bisections = 60;
  unsigned workers = 1;
};

struct ContourPolyline {
  int species = 1;
  std::vector<std::array<double, 2>> points;  // (q0, V)
  std::vector<double> residual;               // |λ_k - 1| at each vertex
  bool closed = false;
};

struct ContourSet {
  std::vector<ContourPolyline> lines;
  std::vector<std::string> warnings;
};

namespace detail {

/// A grid edge: horizontal edges join (iv, iq)-(iv, iq+1), vertical ones (iv, iq)-(iv+1, iq).
struct EdgeKey {
  bool vertical = false;
  std::size_t iv = 0, iq = 0;
  auto operator<=>(const EdgeKey&) const = default;
};

struct Crossing {
  int species = 1;
  EdgeKey edge;
  std::array<double, 2> point{};
  double residual = 0.0;
  bool refined = false;
};

inline double surface_ratio(const PointResult& p, int species) { return species == 1 ? p.lambda1 : p.lambda2; }

}  // namespace detail

/// Marching squares on λ_k - 1 over cells whose four corners converged. Every
/// edge crossing is refined by bisection along the edge (in log q0 for q0 edges)
/// with fresh evaluations until |λ_k - 1| < tolerance; crossings are then linked
/// into polylines through the cells.
inline ContourSet trace_unity_contours(const RatioSurface& surface, const RatioEvaluator& evaluate,
                                       const ContourOptions& options = {}) {
  const std::size_t nq = surface.q0.size(), nv = surface.voltage.size();
  if (nq < 2 || nv < 2 || surface.points.size() != nq * nv) throw validation_error("trace_unity_contours: bad surface");
  ContourSet out;

  for (int species = 1; species <= 2; ++species) {
    auto ok = [&](std::size_t iv, std::size_t iq) { return surface.at(iv, iq).converged(); };
    auto positive = [&](std::size_t iv, std::size_t iq) {
      return detail::surface_ratio(surface.at(iv, iq), species) - 1.0 >= 0.0;
    };
    auto cell_ok = [&](std::size_t iv, std::size_t iq) {
      return ok(iv, iq) && ok(iv + 1, iq) && ok(iv, iq + 1) && ok(iv + 1, iq + 1);
    };

    // Crossed edges that belong to at least one usable cell.
    std::map<detail::EdgeKey, std::size_t> edge_index;
    std::vector<detail::Crossing> crossings;
    auto consider = [&](detail::EdgeKey e) {
      if (edge_index.count(e)) return;
      const std::size_t v2 = e.vertical ? e.iv + 1 : e.iv, q2 = e.vertical ? e.iq : e.iq + 1;
      if (positive(e.iv, e.iq) == positive(v2, q2)) return;
      edge_index.emplace(e, crossings.size());
      crossings.push_back({species, e, {}, 0.0, false});
    };
    for (std::size_t iv = 0; iv + 1 < nv; ++iv)
      for (std::size_t iq = 0; iq + 1 < nq; ++iq) {
        if (!cell_ok(iv, iq)) continue;
        consider({false, iv, iq});
        consider({false, iv + 1, iq});
        consider({true, iv, iq});
        consider({true, iv, iq + 1});
      }

    // Edge refinement, in parallel; results land in their own slots.
    parallel_for(crossings.size(), options.workers, [&](std::size_t c) {
      detail::Crossing& x = crossings[c];
      const auto& e = x.edge;
      const std::size_t v2 = e.vertical ? e.iv + 1 : e.iv, q2 = e.vertical ? e.iq : e.iq + 1;
      const PointResult& a = surface.at(e.iv, e.iq);
      const PointResult& b = surface.at(v2, q2);
      const bool log_axis = !e.vertical && a.q0 > 0.0;
      double lo = e.vertical ? a.voltage : (log_axis ? std::log(a.q0) : a.q0);
      double hi = e.vertical ? b.voltage : (log_axis ? std::log(b.q0) : b.q0);
      double f_lo = detail::surface_ratio(a, species) - 1.0;
      double f_hi = detail::surface_ratio(b, species) - 1.0;
      auto at = [&](double s) -> std::array<double, 2> {
        if (e.vertical) return {a.q0, s};
        return {log_axis ? std::exp(s) : s, a.voltage};
      };
      const double width = options.position_tolerance * std::abs(hi - lo);
      // The last midpoint is the answer; the best one is kept in case a solve fails.
      double best_s = std::abs(f_lo) < std::abs(f_hi) ? lo : hi;
      double best_f = std::min(std::abs(f_lo), std::abs(f_hi));
      bool done = false;
      for (int it = 0; it < options.max_bisections && !done; ++it) {
        const double mid = 0.5 * (lo + hi);
        const auto p = at(mid);
        double f;
        try {
          f = evaluate(species, p[0], p[1]) - 1.0;
        } catch (const error&) {
          break;
        }
        done = f == 0.0 || (std::abs(f) < options.tolerance && std::abs(hi - lo) <= 2.0 * width);
        if (done || std::abs(f) < best_f) {
          best_f = std::abs(f);
          best_s = mid;
        }
        if ((f >= 0.0) == (f_lo >= 0.0)) {
          lo = mid;
          f_lo = f;
        } else {
          hi = mid;
          f_hi = f;
        }
      }
      x.point = at(best_s);
      x.residual = best_f;
      x.refined = best_f < options.tolerance;
    });
    for (const auto& x : crossings)
      if (!x.refined)
        out.warnings.push_back("lambda_" + std::to_string(species) + " crossing at (" + std::to_string(x.point[0]) +
                               ", " + std::to_string(x.point[1]) + ") refined only to " + std::to_string(x.residual));

    // Cell segments; a saddle cell is resolved by the mean of its corners.
    std::vector<std::vector<std::size_t>> adjacency(crossings.size());
    auto link = [&](std::size_t p, std::size_t q) {
      adjacency[p].push_back(q);
      adjacency[q].push_back(p);
    };
    for (std::size_t iv = 0; iv + 1 < nv; ++iv)
      for (std::size_t iq = 0; iq + 1 < nq; ++iq) {
        if (!cell_ok(iv, iq)) continue;
        // Counter-clockwise around the cell: bottom, right, top, left.
        const std::array<detail::EdgeKey, 4> sides{
            detail::EdgeKey{false, iv, iq}, detail::EdgeKey{true, iv, iq + 1}, detail::EdgeKey{false, iv + 1, iq},
            detail::EdgeKey{true, iv, iq}};
        std::vector<std::size_t> hit;
        for (const auto& side : sides)
          if (auto it = edge_index.find(side); it != edge_index.end()) hit.push_back(it->second);
        if (hit.size() == 2) {
          link(hit[0], hit[1]);
        } else if (hit.size() == 4) {
          double mean = 0.0;
          for (auto [dv, dq] : {std::pair{0, 0}, {0, 1}, {1, 0}, {1, 1}})
            mean += detail::surface_ratio(surface.at(iv + dv, iq + dq), species) - 1.0;
          const bool centre_positive = mean >= 0.0;
          // Corner (iv, iq) sits between the bottom and left sides; when the
          // centre shares its sign, bottom pairs with right and top with left.
          if (centre_positive == positive(iv, iq)) {
            link(hit[0], hit[1]);
            link(hit[2], hit[3]);
          } else {
            link(hit[0], hit[3]);
            link(hit[1], hit[2]);
          }
        }
      }

    auto on_boundary = [&](const detail::EdgeKey& e) {
      if (e.vertical) return e.iq == 0 || e.iq + 1 == nq;
      return e.iv == 0 || e.iv + 1 == nv;
    };
    std::vector<bool> used(crossings.size(), false);
    auto walk = [&](std::size_t start, bool closed) {
      ContourPolyline line;
      line.species = species;
      line.closed = closed;
      std::size_t prev = crossings.size(), cur = start;
      while (true) {
        used[cur] = true;
        line.points.push_back(crossings[cur].point);
        line.residual.push_back(crossings[cur].residual);
        std::size_t next = crossings.size();
        for (std::size_t n : adjacency[cur])
          if (n != prev && !used[n]) {
            next = n;
            break;
          }
        if (next == crossings.size()) break;
        prev = cur;
        cur = next;
      }
      if (!closed) {
        for (std::size_t end : {start, cur})
          if (!on_boundary(crossings[end].edge))
            out.warnings.push_back("lambda_" + std::to_string(species) + " contour ends inside the domain at (" +
                                   std::to_string(crossings[end].point[0]) + ", " +
                                   std::to_string(crossings[end].point[1]) + "), next to unconverged points");
      }
      out.lines.push_back(std::move(line));
    };
    for (std::size_t c = 0; c < crossings.size(); ++c)
      if (!used[c] && adjacency[c].size() <= 1) walk(c, false);
    for (std::size_t c = 0; c < crossings.size(); ++c)
      if (!used[c]) walk(c, true);
  }
  return out;
}

/// Convenience overload: fresh solves with the surface's references pre-seeded.
inline ContourSet trace_unity_contours(const RatioSurface& surface, const ProblemTemplate& tpl,
                                       const ContourOptions& options = {}) {
  auto evaluator = std::make_shared<SolverRatioEvaluator>(tpl);
  for (const auto& r : surface.references) evaluator->seed_reference(r);
  return trace_unity_contours(
      surface, [evaluator](int k, double q, double v) { return (*evaluator)(k, q, v); }, options);
}

// ---------------------------------------------------------------------------
// Saddle nodes

struct BifurcationPoint {
  int species = 1;
  double q0 = 0.0, voltage = 0.0;
};

/// Interior local extrema of q0 along each polyline, refined by a parabola
/// log q0 = a V² + b V + c through the extremal vertex and its neighbours.
inline std::vector<BifurcationPoint> detect_saddle_nodes(const ContourSet& contours) {
  std::vector<BifurcationPoint> out;
  for (const auto& line : contours.lines) {
    const auto& p = line.points;
    if (p.size() < 3) continue;
    for (std::size_t i = 1; i + 1 < p.size(); ++i) {
      const double q0 = p[i - 1][0], q1 = p[i][0], q2 = p[i + 1][0];
      const bool maximum = q1 > q0 && q1 >= q2;
      const bool minimum = q1 < q0 && q1 <= q2;
      if (!maximum && !minimum) continue;
      // Skip the second vertex of a flat pair so each turn is reported once.
      if (i >= 2 && p[i - 1][0] == q1) continue;
      BifurcationPoint b{line.species, q1, p[i][1]};
      const double v0 = p[i - 1][1], v1 = p[i][1], v2 = p[i + 1][1];
      if (q0 > 0.0 && q1 > 0.0 && q2 > 0.0 && v0 != v1 && v1 != v2 && v0 != v2) {
        const double y0 = std::log(q0), y1 = std::log(q1), y2 = std::log(q2);
        const double d01 = (y1 - y0) / (v1 - v0), d12 = (y2 - y1) / (v2 - v1);
        const double a = (d12 - d01) / (v2 - v0);
        if (a != 0.0) {
          const double b_coef = d01 - a * (v0 + v1);
          const double vs = -b_coef / (2.0 * a);
          if (vs >= std::min(v0, v2) && vs <= std::max(v0, v2)) {
            const double ys = y1 + (vs - v1) * (d01 + a * (vs - v0));
            b.voltage = vs;
            b.q0 = std::exp(ys);
          }
        }
      }
      out.push_back(b);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Internal profiles

struct InternalProfiles {
  std::vector<double> x;
  std::vector<double> potential;
  std::vector<std::vector<double>> concentration;   // [species][node]
  std::vector<std::vector<double>> electrochemical;  // μ̄_k, [species][node]
  std::vector<double> x_left, x_right;              // element ends
  std::vector<std::vector<double>> element_flux;    // [species][element]
  std::vector<double> flux;                         // representative J_k
  double current = 0.0;
  double nonuniformity = 0.0;
  int outer_iterations = 0;
};

inline InternalProfiles internal_profiles(const PnpProblem& problem, const AdaptResult& r) {
  InternalProfiles p;
  const DiscreteSolution& s = r.solution;
  p.x = s.mesh.nodes();
  p.potential = s.potential;
  p.concentration = s.concentration;
  p.electrochemical = electrochemical_profile(problem, s);
  for (std::size_t e = 0; e < s.mesh.element_count(); ++e) {
    p.x_left.push_back(s.mesh[e]);
    p.x_right.push_back(s.mesh[e + 1]);
  }
  p.element_flux = r.fluxes.element_flux;
  p.flux = r.fluxes.flux;
  p.current = r.fluxes.current;
  p.nonuniformity = r.fluxes.max_nonuniformity();
  p.outer_iterations = static_cast<int>(r.history.size());
  return p;
}

inline InternalProfiles internal_profiles(const ProblemTemplate& tpl, double q0, double voltage) {
  const PnpProblem problem = tpl.at(q0, voltage);
  return internal_profiles(problem, adapt_and_solve(problem, tpl.nodes, tpl.controls));
}

}  // namespace pnpflux
