#pragma once

// Dimensionless quasi-one-dimensional PNP problem description: species, channel
// shape h(x), permanent charge Q(x), boundary data and electrochemical potentials.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "pnpflux/error.hpp"
#include "pnpflux/quadrature.hpp"

namespace pnpflux {

inline constexpr double kNeckBegin = 1.0 / 3.0;
inline constexpr double kNeckEnd = 2.0 / 3.0;

struct IonSpecies {
  int valence = 1;
  double diffusion = 1.0;
  double radius = 0.0;  // dimensionless hard-sphere radius
};

enum class GeometryVariant { exact, regularized };

/// Channel cross-section h(x) on [0, 1]: wide vestibules narrowing linearly to a
/// neck of constant area 0.4 on (1/3, 2/3).
class ChannelGeometry {
 public:
  ChannelGeometry() = default;
  explicit ChannelGeometry(GeometryVariant variant, double delta_x = 1e-7)
      : variant_(variant), delta_x_(delta_x) {
    if (!(delta_x > 0.0) || delta_x >= kNeckBegin / 2)
      throw validation_error("geometry: delta_x must lie in (0, 1/6)");
  }

  GeometryVariant variant() const { return variant_; }
  double delta_x() const { return delta_x_; }

  /// h(x). The regularized variant reproduces the published transition branches
  /// verbatim and rejects points where they turn non-positive.
  double area(double x) const {
    if (variant_ == GeometryVariant::exact) return exact_area(x);
    const double dx = delta_x_;
    double h = 0.0;
    if (x < kNeckBegin - dx) {
      h = exact_area(x);
    } else if (x < kNeckBegin + dx) {
      h = 14.7 / dx * (x - kNeckBegin - dx) + 0.4;
    } else if (x < kNeckEnd - dx) {
      h = exact_area(x);
    } else if (x < kNeckEnd + dx) {
      h = 14.7 / dx * (x - kNeckEnd + dx) + 0.4;
    } else {
      h = exact_area(x);
    }
    if (!(h > 0.0))
      throw validation_error("geometry: regularized channel area is non-positive at x = " + std::to_string(x));
    return h;
  }

  /// Points where h or h' is discontinuous, in increasing order, excluding 0 and 1.
  std::vector<double> breakpoints() const {
    if (variant_ == GeometryVariant::exact) return {kNeckBegin, kNeckEnd};
    return {kNeckBegin - delta_x_, kNeckBegin + delta_x_, kNeckEnd - delta_x_, kNeckEnd + delta_x_};
  }

  static double exact_area(double x) {
    if (x < kNeckBegin) return 3.0 * (0.4 * x + 20.0 * (kNeckBegin - x));
    if (x < kNeckEnd) return 3.0 * (0.4 * (x - kNeckBegin) + 0.4 * (kNeckEnd - x));
    return 3.0 * (20.0 * (x - kNeckEnd) + 0.4 * (1.0 - x));
  }

 private:
  GeometryVariant variant_ = GeometryVariant::exact;
  double delta_x_ = 1e-7;
};

inline double channel_area(double x, const ChannelGeometry& geometry) { return geometry.area(x); }

/// How the tanh-regularized charge is scaled.
///  - paper: 2 Q0 [tanh((x-1/3)/δ) - tanh((x-2/3)/δ)], plateau 4 Q0.
///  - unit_plateau: Q0 [tanh(...) - tanh(...)], plateau 2 Q0.
enum class ChargeConvention { paper, unit_plateau };

class PermanentCharge {
 public:
  PermanentCharge() = default;
  PermanentCharge(double amplitude, double delta = 1.0 / 800.0,
                  ChargeConvention convention = ChargeConvention::paper)
      : amplitude_(amplitude), delta_(delta), convention_(convention) {
    if (!(amplitude >= 0.0)) throw validation_error("charge: Q0 must be non-negative");
    if (!(delta > 0.0)) throw validation_error("charge: regularization width must be positive");
  }

  /// Q0; the scan axis is q0 = 2 Q0.
  double amplitude() const { return amplitude_; }
  double delta() const { return delta_; }
  ChargeConvention convention() const { return convention_; }

  double density(double x) const {
    if (amplitude_ == 0.0) return 0.0;
    const double scale = convention_ == ChargeConvention::paper ? 2.0 * amplitude_ : amplitude_;
    return scale * (std::tanh((x - kNeckBegin) / delta_) - std::tanh((x - kNeckEnd) / delta_));
  }

  /// Value on the neck in the δ → 0 limit.
  double plateau() const { return convention_ == ChargeConvention::paper ? 4.0 * amplitude_ : 2.0 * amplitude_; }

 private:
  double amplitude_ = 0.0;
  double delta_ = 1.0 / 800.0;
  ChargeConvention convention_ = ChargeConvention::paper;
};

inline double permanent_charge_density(double x, const PermanentCharge& charge) { return charge.density(x); }

struct BoundaryConditions {
  double voltage = 0.0;        // φ(0); φ(1) = 0
  std::vector<double> left;    // c_k(0)
  std::vector<double> right;   // c_k(1)
};

enum class ExcessKind { ideal, hard_sphere };

struct ExcessModel {
  ExcessKind kind = ExcessKind::ideal;
};

inline double value_of(double x) { return x; }

// ---------------------------------------------------------------------------
// Electrochemical potentials. Templated on the scalar so the FEM assembly can
// differentiate them with dual numbers.

inline double mu_ideal(int valence, double phi, double c) {
  if (!(c > 0.0)) throw domain_error("mu_ideal: concentration must be positive");
  return valence * phi + std::log(c);
}

template <class T>
T packing_fraction(std::span<const T> c, std::span<const double> radii) {
  T sum = T(0.0);
  for (std::size_t j = 0; j < c.size(); ++j)
    sum = sum + c[j] * (4.0 / 3.0 * std::numbers::pi * radii[j] * radii[j] * radii[j]);
  return sum;
}

inline double packing_fraction(std::span<const double> c, std::span<const double> radii) {
  return packing_fraction<double>(c, radii);
}

/// Hard-sphere excess potential of species k:
///   -ln(1-ξ3) + r_k ξ2/(1-ξ3) + 4π r_k² ξ1/(1-ξ3) + (4/3)π r_k³ ξ0/(1-ξ3)
/// with ξ3 = Σ (4/3)π r_j³ c_j, ξ2 = Σ 4π r_j² c_j, ξ1 = Σ r_j c_j, ξ0 = Σ c_j.
template <class T>
T mu_hard_sphere(std::size_t k, std::span<const T> c, std::span<const double> radii) {
  using std::log;
  constexpr double pi = std::numbers::pi;
  T xi3 = T(0.0), xi2 = T(0.0), xi1 = T(0.0), xi0 = T(0.0);
  for (std::size_t j = 0; j < c.size(); ++j) {
    const double r = radii[j];
    xi3 = xi3 + c[j] * (4.0 / 3.0 * pi * r * r * r);
    xi2 = xi2 + c[j] * (4.0 * pi * r * r);
    xi1 = xi1 + c[j] * r;
    xi0 = xi0 + c[j];
  }
  const T free = 1.0 - xi3;
  if (!(value_of(free) > 0.0)) throw domain_error("mu_hard_sphere: packing fraction must stay below 1");
  const double rk = radii[k];
  return -log(free) + (rk * xi2 + 4.0 * pi * rk * rk * xi1 + 4.0 / 3.0 * pi * rk * rk * rk * xi0) / free;
}

inline double mu_hard_sphere(std::size_t k, std::span<const double> c, std::span<const double> radii) {
  return mu_hard_sphere<double>(k, c, radii);
}

// ---------------------------------------------------------------------------

class PnpProblem {
 public:
  PnpProblem(double epsilon, std::vector<IonSpecies> species, ChannelGeometry geometry,
             PermanentCharge charge, BoundaryConditions bc, ExcessModel excess = {})
      : epsilon_(epsilon),
        species_(std::move(species)),
        geometry_(geometry),
        charge_(charge),
        bc_(std::move(bc)),
        excess_(excess) {
    validate();
    radii_.reserve(species_.size());
    for (const auto& s : species_) radii_.push_back(s.radius);
  }

  double epsilon() const { return epsilon_; }
  const std::vector<IonSpecies>& species() const { return species_; }
  std::size_t species_count() const { return species_.size(); }
  const ChannelGeometry& geometry() const { return geometry_; }
  const PermanentCharge& charge() const { return charge_; }
  const BoundaryConditions& bc() const { return bc_; }
  const ExcessModel& excess() const { return excess_; }
  std::span<const double> radii() const { return radii_; }
  bool hard_sphere() const { return excess_.kind == ExcessKind::hard_sphere; }

  PnpProblem with_voltage(double voltage) const {
    BoundaryConditions bc = bc_;
    bc.voltage = voltage;
    return {epsilon_, species_, geometry_, charge_, std::move(bc), excess_};
  }

  PnpProblem with_charge_amplitude(double amplitude) const {
    return {epsilon_, species_, geometry_, PermanentCharge(amplitude, charge_.delta(), charge_.convention()),
            bc_, excess_};
  }

  PnpProblem with_excess(ExcessModel excess) const {
    return {epsilon_, species_, geometry_, charge_, bc_, excess};
  }

 private:
  void validate() const {
    if (!(epsilon_ > 0.0)) throw validation_error("problem: epsilon must be positive");
    if (species_.size() < 2) throw validation_error("problem: at least two species are required");
    if (bc_.left.size() != species_.size() || bc_.right.size() != species_.size())
      throw validation_error("problem: boundary concentration count does not match species count");
    double charge_left = 0.0, charge_right = 0.0, scale = 0.0;
    for (std::size_t k = 0; k < species_.size(); ++k) {
      const auto& s = species_[k];
      if (!(s.diffusion > 0.0)) throw validation_error("problem: diffusion coefficients must be positive");
      if (!(s.radius >= 0.0)) throw validation_error("problem: radii must be non-negative");
      if (!(bc_.left[k] > 0.0) || !(bc_.right[k] > 0.0))
        throw validation_error("problem: boundary concentrations must be positive");
      charge_left += s.valence * bc_.left[k];
      charge_right += s.valence * bc_.right[k];
      scale += std::abs(s.valence) * (bc_.left[k] + bc_.right[k]);
    }
    if (std::abs(charge_left) > 1e-12 * scale || std::abs(charge_right) > 1e-12 * scale)
      throw validation_error("problem: boundary data violate electroneutrality");
    if (!std::isfinite(bc_.voltage)) throw validation_error("problem: voltage must be finite");
  }

  double epsilon_;
  std::vector<IonSpecies> species_;
  ChannelGeometry geometry_;
  PermanentCharge charge_;
  BoundaryConditions bc_;
  ExcessModel excess_;
  std::vector<double> radii_;
};

/// The two-species (z = ±1, D = 1) configuration used throughout; q0 = 2 Q0.
struct TwoSpeciesSetup {
  double left = 0.008;
  double right = 0.001;
  double voltage = 0.0;
  double q0 = 0.0;
  double epsilon = 1e-5;
  double delta = 1.0 / 800.0;
  ChargeConvention convention = ChargeConvention::paper;
  ExcessKind excess = ExcessKind::ideal;
  double radius_cation = 0.0;
  double radius_anion = 0.0;
  GeometryVariant geometry = GeometryVariant::exact;
  double delta_x = 1e-7;
};

inline PnpProblem make_two_species_problem(const TwoSpeciesSetup& s) {
  std::vector<IonSpecies> species{{+1, 1.0, s.radius_cation}, {-1, 1.0, s.radius_anion}};
  BoundaryConditions bc{s.voltage, {s.left, s.left}, {s.right, s.right}};
  return {s.epsilon, std::move(species), ChannelGeometry(s.geometry, s.delta_x),
          PermanentCharge(0.5 * s.q0, s.delta, s.convention), std::move(bc), ExcessModel{s.excess}};
}

// ---------------------------------------------------------------------------
// Cumulative resistance H(x) = ∫_0^x 1/h.

inline double cumulative_resistance(double x, const ChannelGeometry& geometry, double rel_tol = 1e-12) {
  if (x < 0.0 || x > 1.0) throw validation_error("cumulative_resistance: x must lie in [0, 1]");
  auto inverse_area = [&](double s) {
    const double h = geometry.area(s);
    if (!(h > 0.0)) throw integration_error("cumulative_resistance: non-positive channel area");
    return 1.0 / h;
  };
  double total = 0.0;
  double lower = 0.0;
  for (double b : geometry.breakpoints()) {
    if (b >= x) break;
    total += quadrature::integrate_composite<5>(inverse_area, lower, b, rel_tol);
    lower = b;
  }
  total += quadrature::integrate_composite<5>(inverse_area, lower, x, rel_tol);
  return total;
}

/// H(1) together with the normalized neck-edge resistances α = H(1/3)/H(1), β = H(2/3)/H(1).
struct GeometryMoments {
  double H1 = 0.0;
  double alpha = 0.0;
  double beta = 0.0;

  void validate() const {
    if (!(H1 > 0.0) || !(alpha > 0.0) || !(alpha < beta) || !(beta < 1.0))
      throw validation_error("geometry moments: need H1 > 0 and 0 < alpha < beta < 1");
  }
};

inline GeometryMoments geometry_moments(const ChannelGeometry& geometry) {
  GeometryMoments m;
  m.H1 = cumulative_resistance(1.0, geometry);
  m.alpha = cumulative_resistance(kNeckBegin, geometry) / m.H1;
  m.beta = cumulative_resistance(kNeckEnd, geometry) / m.H1;
  return m;
}

// ---------------------------------------------------------------------------
// Nondimensionalization.

struct PhysicalSpecies {
  int valence = 1;
  double diffusion = 1.0;  // 𝒟_k
  double radius = 0.0;     // r_k, length units consistent with C0^{-1/3}
};

struct PhysicalParameters {
  double relative_permittivity = 80.0;     // ε_r
  double vacuum_permittivity = 8.8541878128e-12;  // ε_0
  double elementary_charge = 1.602176634e-19;     // e_0
  double boltzmann = 1.380649e-23;                // k_B
  double temperature = 298.0;                     // T
  double characteristic_concentration = 1.0;     // C_0
  double characteristic_diffusion = 1.0;          // D_0
  double channel_begin = 0.0;                     // a_0
  double channel_end = 1.0;                       // b_0
  double voltage = 0.0;                           // 𝒱, any sign
  std::vector<PhysicalSpecies> species;
  std::vector<double> left;                       // ℒ_k
  std::vector<double> right;                      // ℛ_k
  double charge_amplitude = 0.0;                  // 𝒬0, same units as C_0
};

inline PnpProblem nondimensionalize(const PhysicalParameters& p, ChannelGeometry geometry = {},
                                    double delta = 1.0 / 800.0,
                                    ChargeConvention convention = ChargeConvention::paper,
                                    ExcessModel excess = {}) {
  const auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw validation_error(std::string("nondimensionalize: ") + name + " must be positive");
  };
  positive(p.relative_permittivity, "relative permittivity");
  positive(p.vacuum_permittivity, "vacuum permittivity");
  positive(p.elementary_charge, "elementary charge");
  positive(p.boltzmann, "Boltzmann constant");
  positive(p.temperature, "temperature");
  positive(p.characteristic_concentration, "characteristic concentration");
  positive(p.characteristic_diffusion, "characteristic diffusion");
  if (!(p.channel_end > p.channel_begin)) throw validation_error("nondimensionalize: b_0 must exceed a_0");
  if (!(p.charge_amplitude >= 0.0)) throw validation_error("nondimensionalize: charge amplitude must be non-negative");

  const double length = p.channel_end - p.channel_begin;
  const double kt = p.boltzmann * p.temperature;
  const double c0 = p.characteristic_concentration;
  const double eps2 = p.relative_permittivity * p.vacuum_permittivity * kt /
                      (p.elementary_charge * p.elementary_charge * length * length * c0);

  std::vector<IonSpecies> species;
  for (const auto& s : p.species) {
    positive(s.diffusion, "species diffusion");
    species.push_back({s.valence, s.diffusion / p.characteristic_diffusion, s.radius * std::cbrt(c0)});
  }
  BoundaryConditions bc;
  bc.voltage = p.elementary_charge * p.voltage / kt;
  for (double l : p.left) bc.left.push_back(l / c0);
  for (double r : p.right) bc.right.push_back(r / c0);
  return {std::sqrt(eps2), std::move(species), geometry,
          PermanentCharge(p.charge_amplitude / c0, delta, convention), std::move(bc), excess};
}

}  // namespace pnpflux
