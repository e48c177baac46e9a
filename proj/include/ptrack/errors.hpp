#pragma once

#include <stdexcept>
#include <string>

namespace ptrack {

/// Shape or channel-count mismatch between operands.
struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid argument value (k > N, zero step, empty input, ...).
struct ParameterError : std::runtime_error {
  explicit ParameterError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed or missing input data (files, configs, checkpoints).
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numerical failure during training or evaluation (non-finite loss, empty metric input).
struct EvalError : std::runtime_error {
  explicit EvalError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ptrack
