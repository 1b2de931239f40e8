#pragma once

#include <stdexcept>
#include <string>

namespace cascade {

/// Base class for all errors raised by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A value or configuration violates a documented invariant.
struct ValidationError : Error {
  using Error::Error;
};

/// File could not be read/written or its contents are malformed.
struct IoError : Error {
  using Error::Error;
};

/// Spine segmentation produced an empty mask.
struct NoSpineFoundError : Error {
  using Error::Error;
};

/// Requested phantom contents do not fit into the spine volume.
struct CapacityError : Error {
  using Error::Error;
};

/// A world coordinate lies outside the volume bounds.
struct OutOfBoundsError : Error {
  using Error::Error;
};

/// A tensor picked up a NaN or Inf.
struct NonFiniteError : Error {
  using Error::Error;
};

/// Training loss became non-finite. Carries the epoch it happened in.
struct DivergenceError : Error {
  int epoch = -1;
  DivergenceError(const std::string& msg, int epoch_) : Error(msg), epoch(epoch_) {}
};

/// A pipeline stage is missing an upstream artifact.
struct DependencyError : Error {
  using Error::Error;
};

}  // namespace cascade
