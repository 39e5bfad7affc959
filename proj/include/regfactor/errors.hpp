#pragma once

#include <stdexcept>
#include <string>

namespace regfactor {

// Operand shapes or extents are incompatible with an operation.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// A caller broke a documented precondition (non-scalar loss, mixed sequences, ...).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// An index is outside a fixed table, e.g. a frame index beyond the embedding rows.
class RangeError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

// NaN/Inf produced or consumed, or an optimizer step that would leave parameters non-finite.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed or unsupported files: netpbm, checkpoints, datasets, config.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace regfactor
