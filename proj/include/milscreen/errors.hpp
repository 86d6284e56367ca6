#pragma once

#include <stdexcept>
#include <string>

namespace milscreen {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor/parameter shapes that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Inputs outside an operation's domain (empty vectors, NaN, bad rates).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Malformed files: bag files, CSVs, graymaps, archives.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid user configuration (unknown country, bad flag combination).
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace milscreen
