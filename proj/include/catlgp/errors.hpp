#pragma once

#include <stdexcept>
#include <string>

namespace catlgp {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// --- numerical failures (CLI exit code 3) ---
struct DimensionMismatch : Error { using Error::Error; };
struct NotPositiveDefinite : Error { using Error::Error; };
struct NonPositiveVariance : Error { using Error::Error; };
struct DivergenceDetected : Error { using Error::Error; };

// --- bad input (CLI exit code 2) ---
struct IndexOutOfRange : Error { using Error::Error; };
struct EmptyVector : Error { using Error::Error; };
struct InsufficientData : Error { using Error::Error; };
struct InvalidDataset : Error { using Error::Error; };
struct DimensionOutOfRange : Error { using Error::Error; };
struct MalformedCsv : Error { using Error::Error; };
struct SingletonVariable : Error { using Error::Error; };
struct EmptyFile : Error { using Error::Error; };
struct IoFailure : Error { using Error::Error; };
struct TooManyLabels : Error { using Error::Error; };
struct SerializationError : Error { using Error::Error; };
struct InvalidFlag : Error { using Error::Error; };

// True for error classes that signal bad user input rather than a numerical
// breakdown. The CLI maps these to exit code 2, everything else to 3.
inline bool is_input_error(const Error& e) {
    return dynamic_cast<const IndexOutOfRange*>(&e) != nullptr ||
           dynamic_cast<const EmptyVector*>(&e) != nullptr ||
           dynamic_cast<const InsufficientData*>(&e) != nullptr ||
           dynamic_cast<const InvalidDataset*>(&e) != nullptr ||
           dynamic_cast<const DimensionOutOfRange*>(&e) != nullptr ||
           dynamic_cast<const MalformedCsv*>(&e) != nullptr ||
           dynamic_cast<const SingletonVariable*>(&e) != nullptr ||
           dynamic_cast<const EmptyFile*>(&e) != nullptr ||
           dynamic_cast<const IoFailure*>(&e) != nullptr ||
           dynamic_cast<const TooManyLabels*>(&e) != nullptr ||
           dynamic_cast<const SerializationError*>(&e) != nullptr ||
           dynamic_cast<const InvalidFlag*>(&e) != nullptr;
}

} // namespace catlgp
