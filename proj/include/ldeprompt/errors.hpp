#pragma once

#include <stdexcept>
#include <string>

namespace ldep {

// Tensor shapes disagree with what an operation needs.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A documented precondition of an operation was violated.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// Malformed sample data (bad labels, wrong image dimensions).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct VersionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace ldep
