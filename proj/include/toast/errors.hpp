#pragma once

#include <stdexcept>
#include <string>

namespace toast {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration (bad rank, odd latent length for a
/// complex channel, off-simplex weights, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Tensor or latent shape does not match what the component was built for.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Input that has no meaningful answer (all-zero latent, empty buffer, ...).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// Malformed checkpoint, adapter or dataset file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Missing or unreadable dataset files.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or gradient during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace toast
