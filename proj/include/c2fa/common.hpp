#pragma once

#include <stdexcept>
#include <string>

namespace c2fa {

// Shared numeric constants. Every epsilon used by the math lives here so the
// values are auditable in one place.
namespace constants {
inline constexpr double kLogEps = 1e-12;        // added inside log()/ratio arguments
inline constexpr double kNormEps = 1e-12;       // row norms below this are degenerate
inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kProbRowSumTol = 1e-4;  // precondition tolerance for probability rows
inline constexpr double kTargetRowSumTol = 1e-6;
inline constexpr double kTauMin = 1e-4;
inline constexpr double kTauMax = 1.0;
}  // namespace constants

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what_arg) : std::runtime_error(what_arg) {}
};

// Shape disagreement between operands.
class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& what_arg) : Error(what_arg) {}
};

// Parameter value outside its mathematical domain (temperature <= 0, m outside [0,1], ...).
class DomainError : public Error {
public:
    explicit DomainError(const std::string& what_arg) : Error(what_arg) {}
};

// API misuse: caller violated a documented precondition.
class ContractError : public Error {
public:
    explicit ContractError(const std::string& what_arg) : Error(what_arg) {}
};

// Input that would force a NaN (for example normalizing an all-zero row).
class DegenerateInputError : public Error {
public:
    explicit DegenerateInputError(const std::string& what_arg) : Error(what_arg) {}
};

// No eligible candidate left after masking positives.
class SamplingError : public Error {
public:
    explicit SamplingError(const std::string& what_arg) : Error(what_arg) {}
};

// NaN/Inf detected mid-training; carries step diagnostics.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& what_arg) : Error(what_arg) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what_arg) : Error(what_arg) {}
};

class BadMagicError : public IoError {
public:
    explicit BadMagicError(const std::string& what_arg) : IoError(what_arg) {}
};

class VersionMismatchError : public IoError {
public:
    explicit VersionMismatchError(const std::string& what_arg) : IoError(what_arg) {}
};

class TruncationError : public IoError {
public:
    explicit TruncationError(const std::string& what_arg) : IoError(what_arg) {}
};

class CorruptionError : public IoError {
public:
    explicit CorruptionError(const std::string& what_arg) : IoError(what_arg) {}
};

}  // namespace c2fa
