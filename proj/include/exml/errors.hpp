// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace exml {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or indices do not satisfy an operation's input contract.
class InputContractError : public Error {
 public:
  using Error::Error;
};

/// A dataset cannot be split into the requested experiences.
class ScenarioError : public Error {
 public:
  using Error::Error;
};

/// An invalid or incomplete configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A metric cannot be computed (e.g. empty test sets).
class MetricError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss during an iterative optimization.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::size_t iteration)
      : Error(what + " (iteration " + std::to_string(iteration) + ")"),
        iteration_(iteration) {}

  std::size_t iteration() const noexcept { return iteration_; }

 private:
  std::size_t iteration_;
};

/// Trained expert does not reach the configured accuracy floor.
class TrainingFloorError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failure; the message always carries the offending path.
class IoError : public Error {
 public:
  using Error::Error;
};

class MissingFileError : public IoError {
 public:
  using IoError::IoError;
};

class ArchitectureMismatchError : public Error {
 public:
  using Error::Error;
};

class CorruptTensorError : public Error {
 public:
  using Error::Error;
};

/// A synthetic sample whose label belongs to neither the previous ex-model
/// classes nor the current expert classes.
class UnassignableSampleError : public Error {
 public:
  using Error::Error;
};

/// Cosine similarity requested for an all-zero classifier row.
class SimilarityUndefinedError : public Error {
 public:
  using Error::Error;
};

}  // namespace exml
