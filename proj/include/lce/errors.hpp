#pragma once

#include <stdexcept>
#include <string>

namespace lce {

// Precondition violations on tensor shapes (dimension mismatches, bad axes).
struct ShapeError : std::invalid_argument {
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

// Invalid values or configuration (out-of-range ids, degenerate inputs, ...).
struct ValueError : std::invalid_argument {
  explicit ValueError(const std::string& what) : std::invalid_argument(what) {}
};

// Misuse of the autodiff tape (non-scalar backward, double backward).
struct TapeError : std::logic_error {
  explicit TapeError(const std::string& what) : std::logic_error(what) {}
};

// Malformed input files; carries a line number where one is known.
struct ParseError : std::runtime_error {
  explicit ParseError(const std::string& what) : std::runtime_error(what) {}
  ParseError(const std::string& file, long line, const std::string& what)
      : std::runtime_error(file + ":" + std::to_string(line) + ": " + what) {}
};

// Filesystem / serialization failures.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace lce
