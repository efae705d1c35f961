#pragma once

#include <stdexcept>
#include <string>

namespace microprobe {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that an op cannot combine.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk data (FVOL, raw rasters, model files, PNG).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Bad user input: manifests, CLI arguments, configs. Maps to exit code 2.
class ValidationError : public Error {
 public:
  using Error::Error;
};

}  // namespace microprobe
