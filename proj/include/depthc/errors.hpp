#pragma once

#include <stdexcept>
#include <string>

namespace depthc {

// Failure taxonomy. Everything thrown by the library derives from Error so
// the CLI can map categories onto exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape/size disagreement between tensors.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Invalid configuration value (divisibility, ranges, unknown variants).
class ConfigError : public Error {
public:
    using Error::Error;
};

// NaN/Inf or other numeric breakdown.
class NumericError : public Error {
public:
    using Error::Error;
};

// API misuse (e.g. backward on a non-scalar loss).
class ContractError : public Error {
public:
    using Error::Error;
};

// Malformed file content.
class ParseError : public Error {
public:
    using Error::Error;
};

// Value outside a representable/storable range.
class RangeError : public Error {
public:
    using Error::Error;
};

// Unknown name (layer, unit, archive entry).
class LookupError : public Error {
public:
    using Error::Error;
};

// Filesystem failure, always carries the path.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace depthc
