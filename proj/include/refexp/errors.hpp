#pragma once

#include <stdexcept>
#include <string>

namespace refexp {

// Base error carrying a short machine-parsable category used by the CLI
// when mapping failures to exit codes and one-line diagnostics.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& message)
      : std::runtime_error(category + ": " + message), category_(std::move(category)) {}

  const std::string& category() const { return category_; }

 private:
  std::string category_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& message) : Error("dimension", message) {}
};

struct IndexError : Error {
  explicit IndexError(const std::string& message) : Error("index", message) {}
};

struct DomainError : Error {
  explicit DomainError(const std::string& message) : Error("domain", message) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& message) : Error("numeric", message) {}
};

struct ParseError : Error {
  explicit ParseError(const std::string& message) : Error("parse", message) {}
};

// Cross-reference or file-consistency violations. The category distinguishes
// the offending artifact, e.g. "feature-integrity" or "annotation-integrity".
struct IntegrityError : Error {
  IntegrityError(std::string category, const std::string& message)
      : Error(std::move(category), message) {}
};

struct MissingFeatureError : Error {
  explicit MissingFeatureError(const std::string& message) : Error("missing-feature", message) {}
};

struct IoError : Error {
  explicit IoError(const std::string& message) : Error("io", message) {}
};

}  // namespace refexp
