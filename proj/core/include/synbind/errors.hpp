#pragma once

#include <stdexcept>
#include <string>

namespace synbind {

// Exit-code buckets used by the CLI: usage=1, data=2, internal=3.
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad input data: unparseable sentence, malformed JSON, missing file.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ParseError : DataError {
    explicit ParseError(const std::string& msg) : DataError(msg) {}
};

struct SchemaError : DataError {
    explicit SchemaError(const std::string& msg) : DataError(msg) {}
};

// Mismatched tensor shapes between caller and callee.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Out-of-range hyperparameter or option value.
struct ParamError : std::runtime_error {
    explicit ParamError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace synbind
