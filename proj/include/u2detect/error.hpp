#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace u2d {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed template, configuration or argument.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Traces or vectors whose signals, lengths or sampling do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A simulation (reference integrator or forward pass) produced a non-finite state.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::size_t step)
      : Error(what + " (first non-finite state at step " + std::to_string(step) + ")"), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// Gradient descent hit a non-finite loss.
class TrainingDivergedError : public Error {
 public:
  TrainingDivergedError(const std::string& what, std::size_t epoch)
      : Error(what + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

/// An STL interval reaches past the end of the signal.
class HorizonError : public Error {
 public:
  using Error::Error;
};

/// A reference coefficient is zero, so relative deviations are undefined.
class DegenerateReferenceError : public Error {
 public:
  using Error::Error;
};

/// Too few calibration samples for the requested rank.
class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

/// Invalid fault timing or input magnitude in a scenario.
class ScenarioError : public Error {
 public:
  using Error::Error;
};

/// Text input (formula, JSON, CSV) that could not be parsed.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t position)
      : Error(what + " at position " + std::to_string(position)), position_(position) {}
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

}  // namespace u2d
