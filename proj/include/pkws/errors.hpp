#pragma once

#include <stdexcept>
#include <string>

namespace pkws {

/// Malformed usage of an API: bad shapes, bad arguments, broken preconditions.
class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Non-finite value produced where the contract requires finite results.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid or inconsistent configuration (files, keys, strategy requirements).
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Problems with input data: datasets, manifests, episodes, audio files.
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Filesystem and serialization failures (missing file, bad magic, checksum).
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace pkws
