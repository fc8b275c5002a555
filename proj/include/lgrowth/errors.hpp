#pragma once

#include <stdexcept>
#include <string>

namespace lgrowth {

// Invalid configuration: bad model spec, out-of-range rates, malformed grid
// files, unknown option keys.  CLI exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Unusable data: unparseable CSV, empty columns, missing required inputs.
// CLI exit code 3.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Numerical failure: optimizer or EM did not reach a usable solution, pooling
// had too few surviving chains.  CLI exit code 4.
struct NonConvergenceError : std::runtime_error {
  explicit NonConvergenceError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace lgrowth
