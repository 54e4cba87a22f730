#pragma once

#include <stdexcept>
#include <string>

namespace tatl {

// Base class for all library errors so callers can catch everything from
// this library with one handler while still distinguishing subtypes.
class error : public std::runtime_error {
public:
    explicit error(const std::string& what) : std::runtime_error(what) {}
};

// Shape or size disagreement between operands (mask sizes, tensor extents,
// parameter-set layouts).
class dimension_error : public error {
public:
    explicit dimension_error(const std::string& what) : error(what) {}
};

// A scalar argument outside its admissible range (negative coefficients,
// zero iteration budgets, thresholds outside [0,1], ...).
class range_error : public error {
public:
    explicit range_error(const std::string& what) : error(what) {}
};

// Malformed content: bad magic bytes, invalid mask values, manifest records
// that do not parse, inconsistent file payloads.
class data_error : public error {
public:
    explicit data_error(const std::string& what) : error(what) {}
};

// Filesystem-level failure (missing file, unreadable stream, failed write).
// The message names the offending path.
class io_error : public error {
public:
    explicit io_error(const std::string& what) : error(what) {}
};

// Numerical breakdown: non-finite values where finite ones are required,
// division by a vanishing denominator that the algorithm cannot tolerate.
class numerics_error : public error {
public:
    explicit numerics_error(const std::string& what) : error(what) {}
};

}  // namespace tatl
