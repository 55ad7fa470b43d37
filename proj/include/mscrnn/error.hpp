#pragma once

#include <stdexcept>
#include <string>

namespace mscrnn {

// Error categories map one-to-one onto CLI exit codes.
enum class ErrorClass { config = 2, data = 3, numeric = 4 };

class Error : public std::runtime_error {
 public:
  Error(ErrorClass cls, const std::string& what) : std::runtime_error(what), cls_(cls) {}

  ErrorClass error_class() const noexcept { return cls_; }

  const char* class_name() const noexcept {
    switch (cls_) {
      case ErrorClass::config: return "config_error";
      case ErrorClass::data: return "data_error";
      case ErrorClass::numeric: return "numeric_error";
    }
    return "error";
  }

 private:
  ErrorClass cls_;
};

// Bad arguments, shape mismatches, invalid configuration.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorClass::config, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorClass::data, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorClass::numeric, what) {}
};

// Thrown by dataset/model readers; `kind` tells the failure modes apart.
class FormatError : public DataError {
 public:
  enum class Kind { bad_magic, version_mismatch, truncated, checksum, malformed };

  FormatError(Kind kind, const std::string& what) : DataError(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

}  // namespace mscrnn
