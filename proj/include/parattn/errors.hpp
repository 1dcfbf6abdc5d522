#pragma once

#include <stdexcept>
#include <string>

namespace parattn {

/// Operand shapes do not agree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid hyperparameter or topology combination.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Attention mask is malformed (wrong shape, or a query row with no allowed key).
class MaskError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Token id outside the vocabulary, or an unusable vocabulary.
class VocabularyError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Corrupt, truncated or version-mismatched file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke an operation's precondition (non-scalar loss, repeated backward, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Training diverged (non-finite loss).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace parattn
