#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ipwd {

/// Bad argument to a library call (shape mismatch, non-finite input, ...).
struct InvalidArgument : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Inconsistent or incomplete run configuration.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Malformed, truncated or inconsistent checkpoint file.
struct CheckpointFormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// File could not be opened, read or written.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A non-finite loss or gradient was produced during training.
class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(const std::string& what, std::size_t batch_index, int epoch = 0)
        : std::runtime_error(what + " (epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batch_index) + ")"),
          batch_index_(batch_index),
          epoch_(epoch) {}

    std::size_t batch_index() const noexcept { return batch_index_; }
    int epoch() const noexcept { return epoch_; }

private:
    std::size_t batch_index_;
    int epoch_;
};

/// CSV parse failure; line numbers are 1-based and count the header.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t line)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

}  // namespace ipwd
