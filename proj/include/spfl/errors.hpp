#pragma once

#include <stdexcept>
#include <string>

namespace spfl {

// Invalid network/trigger/experiment configuration.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed dataset or checkpoint bytes.
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// API called out of order (e.g. backward without a retained forward cache).
struct StateError : std::logic_error {
  explicit StateError(const std::string& msg) : std::logic_error(msg) {}
};

// Non-finite loss during local training; carries round/client context.
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

// A name that should resolve against a built-in table (canonical attacks).
struct UnknownNameError : ConfigError {
  explicit UnknownNameError(const std::string& msg) : ConfigError(msg) {}
};

}  // namespace spfl
