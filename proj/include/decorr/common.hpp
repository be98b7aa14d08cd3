#pragma once

#include <stdexcept>
#include <string>

namespace decorr {

// Base class for everything thrown by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or dimension mismatch between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid argument values (labels out of range, empty taps with lambda > 0, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

// Non-finite value produced by a forward operation, or division by exact zero.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid experiment configuration (unknown keys, unresolvable fields).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Dataset files missing, malformed or inconsistent.
class DataError : public Error {
 public:
  using Error::Error;
};

// Filesystem failures outside dataset ingestion (checkpoints, dumps, CSVs).
class IoError : public Error {
 public:
  using Error::Error;
};

// Global element precision. Values are always held in 64-bit buffers; in
// f32 mode every stored value is rounded through IEEE binary32 after each
// forward operation, so a run reproduces 32-bit storage semantics.
enum class Precision { f64, f32 };

void set_default_precision(Precision p);
Precision default_precision();

Precision precision_from_string(const std::string& s);
std::string to_string(Precision p);

}  // namespace decorr
