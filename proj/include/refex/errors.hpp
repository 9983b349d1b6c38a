#pragma once

#include <stdexcept>
#include <string>

namespace refex {

// Violated precondition (caller bug). Carries enough context to locate the call site.
class contract_violation : public std::logic_error {
 public:
  explicit contract_violation(const std::string& what) : std::logic_error(what) {}
};

// Bad user-supplied configuration. CLI exit code 2.
class config_error : public std::runtime_error {
 public:
  explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

// Missing, malformed or inconsistent data files. CLI exit code 3.
class data_error : public std::runtime_error {
 public:
  explicit data_error(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite values, divergence, failed resampling caps. CLI exit code 4.
class numerical_error : public std::runtime_error {
 public:
  explicit numerical_error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace refex
