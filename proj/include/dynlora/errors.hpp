// Copyright 2026 The dynlora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace dynlora {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A configuration field is out of range. The message lists every bad field.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed model file (bad magic, version, truncation, shape mismatch).
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf observed where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// An operation was called in a state that does not permit it.
class StateError : public Error {
 public:
  using Error::Error;
};

}  // namespace dynlora
