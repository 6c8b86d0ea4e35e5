#pragma once

#include <stdexcept>
#include <string>

namespace srctrace {

// Base class for every error thrown by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Vector with (near-)zero Euclidean norm where a direction is required.
class ZeroNormError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed input record; message carries the line number.
class ParseError : public Error {
 public:
  using Error::Error;
};

class DuplicateIdError : public Error {
 public:
  using Error::Error;
};

class ShapeMismatchError : public Error {
 public:
  using Error::Error;
};

// Non-finite value where finite input, gradient or loss is required.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

// Balanced batch with fewer than two utterances per class.
class DegenerateBatchError : public Error {
 public:
  using Error::Error;
};

// Cosine-similarity scale parameter w dropped to or below zero.
class InvalidScaleError : public Error {
 public:
  using Error::Error;
};

class EmptyDatasetError : public Error {
 public:
  using Error::Error;
};

class TooFewClassesError : public Error {
 public:
  using Error::Error;
};

class InvalidSpecError : public Error {
 public:
  using Error::Error;
};

// Backward pass fed a cache from a different model revision.
class StaleCacheError : public Error {
 public:
  using Error::Error;
};

class OutOfRangeError : public Error {
 public:
  using Error::Error;
};

// Mutually incompatible configuration (e.g. GE2E with a random sampler).
class ConfigConflictError : public Error {
 public:
  using Error::Error;
};

// Score or embedding set from which the requested statistic cannot be formed.
class DegenerateSetError : public Error {
 public:
  using Error::Error;
};

class TooFewSamplesError : public Error {
 public:
  using Error::Error;
};

}  // namespace srctrace
