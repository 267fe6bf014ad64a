#pragma once

#include <stdexcept>
#include <string>

namespace fact {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed arguments: shape mismatches, out-of-range indices.
class InvalidInput : public Error {
public:
    using Error::Error;
};

class InvalidConfig : public Error {
public:
    using Error::Error;
};

// Non-finite values. `where` is a block index or sampling step, -1 when not applicable.
class NumericError : public Error {
public:
    NumericError(const std::string& what, int where = -1) : Error(what), where_(where) {}
    int where() const { return where_; }

private:
    int where_;
};

class LoadError : public Error {
public:
    using Error::Error;
};

}  // namespace fact
