#pragma once

#include <stdexcept>
#include <string>

namespace traffictl {

/// Base class for all errors raised by the library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Matrix dimension disagreement (the message names both shapes).
struct ShapeError : Error {
    using Error::Error;
};

/// A precondition of an operation was violated.
struct ContractError : Error {
    using Error::Error;
};

/// CSV / JSON / config parse failure, with location where known.
struct ParseError : Error {
    using Error::Error;
};

/// Degenerate input data (constant dataset, empty cluster, ...).
struct DataError : Error {
    using Error::Error;
};

/// Training diverged (NaN loss) or could not proceed.
struct TrainingError : Error {
    using Error::Error;
};

/// Stage artifact is stale, tampered with, or unreadable.
struct ArtifactError : Error {
    using Error::Error;
};

}  // namespace traffictl
