#pragma once

#include <stdexcept>
#include <string>

namespace muffin {

/// Invalid configuration: bad config file, unknown dataset kind, missing paths.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or insufficient input data (bad JSONL, short sample pools, ...).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Chat-completion service failure that survived the retry policy.
class ServiceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// In-process API misuse: non-scalar backward root, misaligned loss inputs.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Tensor dimension mismatch; the message names both offending shapes.
class ShapeError : public ContractError {
 public:
  using ContractError::ContractError;
};

}  // namespace muffin
