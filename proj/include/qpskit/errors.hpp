#pragma once

#include <stdexcept>
#include <string>

namespace qpskit {

// Base class for every error thrown by this library. Callers that want a
// single catch site can catch qpskit::Error; the derived types below exist so
// that distinct failure modes stay distinguishable at API boundaries.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A point-charge field was requested closer to a sensor than the minimum
// physical separation (one bond length).
struct DegenerateGeometry : Error {
  using Error::Error;
};

// Transition frequencies were supplied in the wrong label order (f_ex < f_ey);
// the observable pair would silently flip sign, so this is rejected instead.
struct LabelOrder : Error {
  using Error::Error;
};

// A configuration value or constructor argument failed validation. The
// message names the offending field.
struct ConfigInvalid : Error {
  using Error::Error;
};

// Sign-folding was requested for an event in which every pivot candidate is
// missing.
struct NoValidPivot : Error {
  using Error::Error;
};

// The nonlinear fit failed to converge from every start point.
struct NoConvergence : Error {
  using Error::Error;
};

// Reading or writing an artifact file failed.
struct IoError : Error {
  using Error::Error;
};

}  // namespace qpskit
