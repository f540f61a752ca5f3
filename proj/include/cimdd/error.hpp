#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cimdd {

/// Base of every error raised by the library. `kind()` is a stable
/// machine-readable tag used by the CLI's error JSON.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& w) : Error("dimension", w) {}
};
struct ContractError : Error {
  explicit ContractError(const std::string& w) : Error("contract", w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error("config", w) {}
};
struct DeterminismError : Error {
  explicit DeterminismError(const std::string& w) : Error("determinism", w) {}
};
struct CapacityError : Error {
  explicit CapacityError(const std::string& w) : Error("capacity", w) {}
};
struct QueryError : Error {
  explicit QueryError(const std::string& w) : Error("query", w) {}
};
struct UndefinedConditionalError : Error {
  explicit UndefinedConditionalError(const std::string& w)
      : Error("undefined_conditional", w) {}
};
struct DataError : Error {
  explicit DataError(const std::string& w) : Error("data", w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error("numeric", w) {}
};

class FormatError : public Error {
 public:
  FormatError(const std::string& w, std::size_t offset)
      : Error("format", w + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace cimdd
