#pragma once

#include <stdexcept>
#include <string>

namespace vpl {

/// Base class for every error thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };
struct ContractError : Error { using Error::Error; };
struct VocabularyError : Error { using Error::Error; };
struct PhaseError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct DegenerateVectorError : Error { using Error::Error; };

}  // namespace vpl
