#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace circuitforge {

enum class ErrorCode {
    // engine
    MissingTensor,
    ShapeMismatch,
    NonFiniteValue,
    FormatError,
    TokenOutOfRange,
    SeqTooLong,
    PlanShapeMismatch,
    InvalidSpec,
    // tasks
    VocabIncomplete,
    UnsatisfiableTemplate,
    EmptyAnswerSet,
    // patching
    LayerOrderViolation,
    CacheMismatch,
    EmptyDataset,
    DegenerateBaseline,
    // pruning
    AlignmentError,
    CurveTooShort,
    NoHalfReached,
    // pipeline
    EmptyTruth,
    EmptyCircuit,
    MeterMissing,
    // cli / io
    ManifestParseError,
    DidNotConverge,
    InvalidArgument,
    IoError,
};

std::string_view to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
    throw Error(code, what);
}

}  // namespace circuitforge
