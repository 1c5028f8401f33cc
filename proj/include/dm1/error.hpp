#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace dm1 {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shape contract violated. `index()` names the offending operand when
// the failing call takes a list of inputs.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what, std::optional<std::size_t> index = std::nullopt)
      : Error(index ? what + " (input " + std::to_string(*index) + ")" : what), index_(index) {}

  std::optional<std::size_t> index() const { return index_; }

 private:
  std::optional<std::size_t> index_;
};

// Argument outside the domain of an operation (r > t, B < 2, odd d_emb, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Malformed file or config input. `key()` is set when a config key is at fault.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what, std::string key = {})
      : Error(what), key_(std::move(key)) {}

  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  explicit DivergenceError(std::size_t step)
      : Error("non-finite loss at step " + std::to_string(step)), step_(step) {}

  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

}  // namespace dm1
