#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace pbflow {

// Shape or size disagreement between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Input value outside an operation's domain (negative distance,
// non-positive margin, empty input, single-class score set, ...).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

// Batch statistics are undefined: a class with fewer than two members
// in an SD-augmented loss, or a train-mode normalization batch of one.
struct DegenerateBatchError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operation invoked in the wrong mode or sequence (e.g. backward
// through an eval-mode forward cache).
struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};

// Pair sampling cannot produce a valid example from the given inputs.
struct SamplingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Interpolation has no seeds to work from.
struct InterpolationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// File I/O failure or malformed file contents.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A pipeline stage failed; carries the stage name.
struct PipelineError : std::runtime_error {
  PipelineError(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

}  // namespace pbflow
