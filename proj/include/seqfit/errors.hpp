#ifndef SEQFIT_ERRORS_HPP
#define SEQFIT_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace seqfit {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// An operation received an input it cannot act on (empty cloud, collinear
// point set, mesh with no usable faces, ...).
struct DegenerateInput : Error {
  using Error::Error;
};

// Dimensions of two inputs disagree (cloud sizes, tensor shapes, image sizes).
struct ShapeMismatch : Error {
  using Error::Error;
};

// The (sin, cos) pair of a rotation has vanishing norm.
struct DegenerateRotation : Error {
  using Error::Error;
};

// A file's contents do not conform to its format.
struct ParseError : Error {
  using Error::Error;
};

// A configuration value is missing, unknown, or invalid.
struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct MissingGroundTruth : Error {
  using Error::Error;
};

struct CorruptCheckpoint : Error {
  using Error::Error;
};

// An internal invariant was violated (e.g. non-finite values on the tape).
struct InternalError : Error {
  using Error::Error;
};

}  // namespace seqfit

#endif
