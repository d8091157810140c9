#pragma once

#include <stdexcept>
#include <string>

namespace latinf {

// Violated precondition: bad shapes, out-of-range labels, invalid arguments.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Rejected configuration value (CLI flags, config files, registry entries).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Unknown model id in the registry.
class RegistryError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Missing or unreadable data: dataset directories, images, partitions.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CurationError : public DataError {
 public:
  using DataError::DataError;
};

// Content hash mismatch or malformed binary blob.
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite loss or gradient during optimization.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
[[noreturn]] void throw_contract(const std::string& where, const std::string& what);
}  // namespace detail

#define LATINF_EXPECT(cond, msg)                                          \
  do {                                                                    \
    if (!(cond)) ::latinf::detail::throw_contract(__func__, (msg));       \
  } while (0)

}  // namespace latinf
