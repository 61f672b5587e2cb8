#pragma once

#include <stdexcept>
#include <string>

namespace slkd {

// Precondition / shape / config violations. The C API maps this to status 1.
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem and format failures. The C API maps this to status 2.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

}  // namespace slkd
