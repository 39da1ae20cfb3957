#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace kvsim {

// Base for every error raised by the simulator. Callers that only need to
// distinguish "our" failures from std ones can catch this.
class SimError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public SimError {
public:
    using SimError::SimError;
};

class ParseError : public SimError {
public:
    ParseError(std::size_t line, const std::string& reason)
        : SimError("line " + std::to_string(line) + ": " + reason), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class OrderViolation : public SimError {
public:
    explicit OrderViolation(std::size_t line)
        : SimError("line " + std::to_string(line) + ": arrival time goes backwards"), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class AlreadyCompressed : public SimError {
public:
    AlreadyCompressed() : SimError("kv-cache spec is already compressed") {}
};

class EmptyInput : public SimError {
public:
    using SimError::SimError;
};

class CapacityExceeded : public SimError {
public:
    CapacityExceeded(std::uint64_t requested, std::uint64_t available)
        : SimError("kv pool capacity exceeded: requested " + std::to_string(requested) +
                   " bytes, available " + std::to_string(available)),
          requested_(requested), available_(available) {}
    std::uint64_t requested() const noexcept { return requested_; }
    std::uint64_t available() const noexcept { return available_; }

private:
    std::uint64_t requested_;
    std::uint64_t available_;
};

class InvalidState : public SimError {
public:
    using SimError::SimError;
};

class DoubleFree : public SimError {
public:
    explicit DoubleFree(std::uint64_t handle)
        : SimError("handle " + std::to_string(handle) + " released twice") {}
};

class EmptyBatch : public SimError {
public:
    EmptyBatch() : SimError("no queued request fits the memory budget") {}
};

class MetricError : public SimError {
public:
    using SimError::SimError;
};

class IoError : public SimError {
public:
    using SimError::SimError;
};

}  // namespace kvsim
