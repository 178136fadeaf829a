#pragma once

#include <stdexcept>
#include <string>

namespace dapsam {

// Shape or value contract violated by a caller.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf produced during a forward pass or loss evaluation.
class NumericFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Unknown parameter, domain or label name; empty inventories.
class InventoryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Cosine similarity requested on a zero-norm vector (strict API only).
class DegenerateSimilarity : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CorruptCheckpoint : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dapsam
