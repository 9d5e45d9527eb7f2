// SPDX-License-Identifier: Apache-2.0
#include "smp/error.hpp"

namespace smp {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Shape: return "shape error";
    case ErrorKind::Domain: return "domain error";
    case ErrorKind::Contract: return "contract error";
    case ErrorKind::Config: return "config error";
    case ErrorKind::Dataset: return "dataset error";
    case ErrorKind::Io: return "io error";
    case ErrorKind::BadMagic: return "bad magic";
    case ErrorKind::BadVersion: return "unknown version";
    case ErrorKind::FingerprintMismatch: return "fingerprint mismatch";
    case ErrorKind::Truncated: return "truncated payload";
    case ErrorKind::Corrupt: return "corrupt payload";
    case ErrorKind::Numerical: return "numerical error";
  }
  return "unknown error";
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return 2;
    case ErrorKind::Dataset: return 3;
    case ErrorKind::Io: return 4;
    case ErrorKind::BadMagic: return 5;
    case ErrorKind::BadVersion: return 6;
    case ErrorKind::FingerprintMismatch: return 7;
    case ErrorKind::Truncated: return 8;
    case ErrorKind::Corrupt: return 9;
    case ErrorKind::Numerical: return 10;
    case ErrorKind::Shape: return 11;
    case ErrorKind::Domain: return 12;
    case ErrorKind::Contract: return 13;
  }
  return 1;
}

}  // namespace smp
