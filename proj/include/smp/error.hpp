// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace smp {

/// Every failure raised by the library carries one of these kinds. The CLI
/// maps each kind to exactly one process exit code (see exit_code()).
enum class ErrorKind {
  Shape,
  Domain,
  Contract,
  Config,
  Dataset,
  Io,
  BadMagic,
  BadVersion,
  FingerprintMismatch,
  Truncated,
  Corrupt,
  Numerical,
};

std::string_view to_string(ErrorKind kind);

/// Process exit code for an error kind. Success is 0; codes are unique.
int exit_code(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace smp
