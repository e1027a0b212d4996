#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace berrypoll {

/// Every failure raised by the library carries a stable kind string so the
/// CLI can map it to an exit code and log lines stay grep-able.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

/// A named input file or directory does not exist or cannot be opened.
struct InputMissing : Error {
    explicit InputMissing(const std::string& w) : Error("InputMissing", w) {}
};

// imaging
struct NoForeground : Error {
    explicit NoForeground(const std::string& w) : Error("NoForeground", w) {}
};
struct DegenerateAxis : Error {
    explicit DegenerateAxis(const std::string& w) : Error("DegenerateAxis", w) {}
};
struct EmptySides : Error {
    explicit EmptySides(const std::string& w) : Error("EmptySides", w) {}
};
struct AllDesaturated : Error {
    explicit AllDesaturated(const std::string& w) : Error("AllDesaturated", w) {}
};
struct InvalidImage : Error {
    explicit InvalidImage(const std::string& w) : Error("InvalidImage", w) {}
};

/// Wraps an imaging failure with the pipeline stage that produced it.
class StageError : public Error {
public:
    StageError(std::string stage, const Error& cause)
        : Error(cause.kind(), "[" + stage + "] " + cause.what()), stage_(std::move(stage)) {}

    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

// dataset
struct SchemaError : Error {
    explicit SchemaError(const std::string& w) : Error("SchemaError", w) {}
};

class RowError : public Error {
public:
    RowError(std::size_t row, std::string field, const std::string& w)
        : Error("RowError", "row " + std::to_string(row) + ", field '" + field + "': " + w),
          row_(row), field_(std::move(field)) {}

    std::size_t row() const noexcept { return row_; }
    const std::string& field() const noexcept { return field_; }

private:
    std::size_t row_;
    std::string field_;
};

struct OutOfRange : Error {
    explicit OutOfRange(const std::string& w) : Error("OutOfRange", w) {}
};
struct EmptyGroup : Error {
    explicit EmptyGroup(const std::string& w) : Error("EmptyGroup", w) {}
};
struct JoinError : Error {
    explicit JoinError(const std::string& w) : Error("JoinError", w) {}
};

// mixed model
struct UnknownFactor : Error {
    explicit UnknownFactor(const std::string& w) : Error("UnknownFactor", w) {}
};
struct SingleLevelFactor : Error {
    explicit SingleLevelFactor(const std::string& w) : Error("SingleLevelFactor", w) {}
};
struct RankDeficientX : Error {
    explicit RankDeficientX(const std::string& w) : Error("RankDeficientX", w) {}
};
struct NotConverged : Error {
    explicit NotConverged(const std::string& w) : Error("NotConverged", w) {}
};
struct InvalidSpec : Error {
    explicit InvalidSpec(const std::string& w) : Error("InvalidSpec", w) {}
};

// synth
struct LayoutOverflow : Error {
    explicit LayoutOverflow(const std::string& w) : Error("LayoutOverflow", w) {}
};

}  // namespace berrypoll
