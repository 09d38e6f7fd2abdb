#pragma once

#include <stdexcept>
#include <string>

namespace ghnq {

// Base for every domain failure raised by the library. The CLI maps these to
// exit code 1 and UsageError to exit code 2.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class UsageError : public Error {
public:
    using Error::Error;
};

// Malformed serialized input (graph datasets, checkpoints, CIFAR batches).
class FormatError : public Error {
public:
    using Error::Error;
};

class GraphError : public Error {
public:
    GraphError(int node_id, const std::string& what)
        : Error("node " + std::to_string(node_id) + ": " + what), node_id_(node_id) {}
    int node_id() const noexcept { return node_id_; }

private:
    int node_id_;
};

class ShapeError : public GraphError {
public:
    using GraphError::GraphError;
};

// Non-finite values produced while executing a network.
class NumericError : public GraphError {
public:
    using GraphError::GraphError;
};

} // namespace ghnq
