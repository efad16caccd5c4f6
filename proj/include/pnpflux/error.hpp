#pragma once

#include <stdexcept>
#include <string>

namespace pnpflux {

/// Base class for every error raised by the library.
class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid input: violated invariant, out-of-range parameter, unknown config key.
class validation_error : public error {
 public:
  using error::error;
};

/// A function was evaluated outside its mathematical domain
/// (log of a non-positive concentration, packing fraction >= 1, ...).
class domain_error : public error {
 public:
  using error::error;
};

/// Closed-form expressions that are singular for the given arguments.
class degenerate_input_error : public error {
 public:
  using error::error;
};

/// Root bracketing or root count failure.
class root_error : public error {
 public:
  using error::error;
};

/// Adaptive time integration gave up (step size underflow, too many steps).
class integration_error : public error {
 public:
  using error::error;
};

/// Parameter range the closed-form theory does not cover.
class unsupported_case_error : public error {
 public:
  using error::error;
};

/// A mesh lost strict monotonicity.
class monotonicity_error : public error {
 public:
  using error::error;
};

}  // namespace pnpflux
