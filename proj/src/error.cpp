#include "circuitforge/error.hpp"

namespace circuitforge {

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::MissingTensor: return "MissingTensor";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::NonFiniteValue: return "NonFiniteValue";
        case ErrorCode::FormatError: return "FormatError";
        case ErrorCode::TokenOutOfRange: return "TokenOutOfRange";
        case ErrorCode::SeqTooLong: return "SeqTooLong";
        case ErrorCode::PlanShapeMismatch: return "PlanShapeMismatch";
        case ErrorCode::InvalidSpec: return "InvalidSpec";
        case ErrorCode::VocabIncomplete: return "VocabIncomplete";
        case ErrorCode::UnsatisfiableTemplate: return "UnsatisfiableTemplate";
        case ErrorCode::EmptyAnswerSet: return "EmptyAnswerSet";
        case ErrorCode::LayerOrderViolation: return "LayerOrderViolation";
        case ErrorCode::CacheMismatch: return "CacheMismatch";
        case ErrorCode::EmptyDataset: return "EmptyDataset";
        case ErrorCode::DegenerateBaseline: return "DegenerateBaseline";
        case ErrorCode::AlignmentError: return "AlignmentError";
        case ErrorCode::CurveTooShort: return "CurveTooShort";
        case ErrorCode::NoHalfReached: return "NoHalfReached";
        case ErrorCode::EmptyTruth: return "EmptyTruth";
        case ErrorCode::EmptyCircuit: return "EmptyCircuit";
        case ErrorCode::MeterMissing: return "MeterMissing";
        case ErrorCode::ManifestParseError: return "ManifestParseError";
        case ErrorCode::DidNotConverge: return "DidNotConverge";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::IoError: return "IoError";
    }
    return "Unknown";
}

}  // namespace circuitforge
