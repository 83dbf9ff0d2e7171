#pragma once

#include <stdexcept>
#include <string>

namespace codequant {

// Error categories map one-to-one onto CLI exit codes.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Raised when an optimization loop or a forward pass produces non-finite values.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A fold or stage was applied out of order or twice.
class StageError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

}  // namespace codequant
