// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace cmstew {

// Bad run configuration or manifest contents.  CLI exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite loss or gradient during training.  CLI exit code 3.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Missing files, malformed payloads, checksum mismatches.  CLI exit code 4.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Numeric preconditions violated inside a computation (too few samples,
// non-finite intermediate values).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

inline void check_arg(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace cmstew
