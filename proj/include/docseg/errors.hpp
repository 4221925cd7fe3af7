#pragma once

#include <stdexcept>
#include <string>

namespace docseg {

/// Invalid configuration or hyperparameters. Reported with exit code 1 by the CLI.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Tensor shapes that do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Bad numeric input (non-finite costs, degenerate boxes).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A caller broke an API contract, e.g. denoising queries at inference.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// File system / format failures. The message always carries the path.
class IoError : public std::runtime_error {
 public:
  IoError(const std::string& path, const std::string& what)
      : std::runtime_error(path + ": " + what), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// Training diverged or produced a non-finite loss term.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace docseg
