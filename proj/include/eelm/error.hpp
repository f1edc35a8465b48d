#pragma once

#include <stdexcept>
#include <string>

namespace eelm {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or inner-dimension mismatch in tensor math.
struct DimError : Error { using Error::Error; };
// Violated operation contract (e.g. backward on a non-scalar loss).
struct ContractError : Error { using Error::Error; };
// Token id outside the vocabulary.
struct VocabError : Error { using Error::Error; };
// Sequence longer than the model's maximum.
struct LengthError : Error { using Error::Error; };
// Configuration inconsistency (bad key, dim mismatch against checkpoint, ...).
struct ConfigError : Error { using Error::Error; };
// Malformed or truncated file.
struct FormatError : Error { using Error::Error; };
// Missing/mismatched data (empty dataset, trace/reference mismatch, ...).
struct DataError : Error { using Error::Error; };
// Training mode prerequisites not met.
struct ModeError : Error { using Error::Error; };
// Invalid argument value (negative sigma, ...).
struct ArgumentError : Error { using Error::Error; };
// Pseudo-labeling could not produce usable captions.
struct LabelError : Error { using Error::Error; };
// Pipeline phases invoked out of order.
struct OrderingError : Error { using Error::Error; };
// Non-finite value encountered where finiteness is required.
struct NumericError : Error { using Error::Error; };

}  // namespace eelm
