#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gradflow {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Unknown builtin tableau, problem or scheme identifier.
class UnknownNameError : public Error {
public:
    UnknownNameError(const std::string& what, const std::string& name)
        : Error("unknown " + what + " '" + name + "'"), name_(name) {}
    const std::string& name() const noexcept { return name_; }

private:
    std::string name_;
};

class TableauError : public Error {
public:
    enum class Kind {
        malformed,
        shape,
        nonpositive_row_sum,
        theta_row_sum,
        negative_theta,
        theta_not_monotone,
        io,
    };

    TableauError(Kind kind, const std::string& msg) : Error(msg), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

/// Some S̃_{j,j} vanished while running the auxiliary-coefficient recursion.
class DegenerateRecursionError : public Error {
public:
    explicit DegenerateRecursionError(int stage)
        : Error("degenerate recursion: S~ vanished at stage " + std::to_string(stage)),
          stage_(stage) {}
    int stage() const noexcept { return stage_; }

private:
    int stage_;
};

class PolishError : public Error {
public:
    PolishError(const std::string& msg, double residual)
        : Error(msg), residual_(residual) {}
    double residual() const noexcept { return residual_; }

private:
    double residual_;
};

class NewtonError : public Error {
public:
    NewtonError(const std::string& msg, std::vector<double> history)
        : Error(msg), history_(std::move(history)) {}
    const std::vector<double>& residual_history() const noexcept { return history_; }

private:
    std::vector<double> history_;
};

class LinearSolveError : public Error {
public:
    using Error::Error;
};

/// The corrected metric L(u) - (k^2/72) D^2L(u)(w,w) lost positive definiteness.
class PositivityError : public Error {
public:
    using Error::Error;
};

/// A state left the domain where the energy or metric is defined
/// (e.g. a non-positive density under a Wasserstein-type metric).
class InadmissibleStateError : public Error {
public:
    using Error::Error;
};

/// Failure inside a time-stepping loop, tagged with the step index.
class StepError : public Error {
public:
    StepError(int step, const std::string& cause)
        : Error("step " + std::to_string(step) + ": " + cause), step_(step) {}
    int step() const noexcept { return step_; }

private:
    int step_;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace gradflow
