#pragma once

#include <stdexcept>
#include <string>

namespace tdmargin {

/// Malformed or inconsistent input (case files, out-of-range parameters).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Feeder graph is not a tree rooted at its head node.
class TopologyError : public InputError {
 public:
  using InputError::InputError;
};

/// A solve that the caller required to succeed did not converge.
class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tdmargin
