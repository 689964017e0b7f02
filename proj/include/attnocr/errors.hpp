// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace attnocr {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or layer shapes that cannot be combined.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Image narrower than the encoder's pooling window.
class InputTooNarrowError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Token id or target outside its valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk data (checkpoint, PGM, font, manifest).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid user configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failure; the message carries the offending path.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or parameter during optimization.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace attnocr
