#pragma once

#include <stdexcept>
#include <string>

namespace ccdm {

// Invalid or inconsistent experiment configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A prerequisite artifact (checkpoint, dataset, report) is missing.
class DependencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite loss or other numerical breakdown during training/sampling.
class NumericalFault : public std::runtime_error {
 public:
  NumericalFault(const std::string& what, long row = -1)
      : std::runtime_error(what), row_(row) {}

  /// Offending batch row, or -1 when the fault is not row-specific.
  long row() const noexcept { return row_; }

 private:
  long row_;
};

// Malformed dataset or evaluation input.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ccdm
