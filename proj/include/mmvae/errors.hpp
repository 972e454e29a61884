#pragma once

#include <stdexcept>
#include <string>

namespace mmvae {

// Caller broke an API precondition; indicates a bug in calling code.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// User-supplied configuration is invalid (bad field, bad combination, bad CLI flag).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A serialized file is malformed. Message carries the byte offset where parsing failed.
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& what, std::size_t byte_offset)
      : std::runtime_error(what + " (byte offset " + std::to_string(byte_offset) + ")"),
        offset(byte_offset) {}
  std::size_t offset;
};

// Computation produced or detected a non-finite / out-of-domain value at runtime.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

}  // namespace mmvae
