#include "modfuse/error.hpp"

namespace modfuse {

const char* to_string(ErrorCode code) noexcept
{
    switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::PatchTooLarge: return "PatchTooLarge";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::BadHeader: return "BadHeader";
    case ErrorCode::UnsupportedDatatype: return "UnsupportedDatatype";
    case ErrorCode::TruncatedData: return "TruncatedData";
    case ErrorCode::InconsistentModalityCount: return "InconsistentModalityCount";
    case ErrorCode::DuplicateCaseId: return "DuplicateCaseId";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::ModalityCountMismatch: return "ModalityCountMismatch";
    case ErrorCode::NoCachedForward: return "NoCachedForward";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::ConfigMismatch: return "ConfigMismatch";
    case ErrorCode::MissingParam: return "MissingParam";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::DegenerateBatch: return "DegenerateBatch";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::EpochOutOfRange: return "EpochOutOfRange";
    case ErrorCode::EmptyRegionList: return "EmptyRegionList";
    case ErrorCode::SpecInfeasible: return "SpecInfeasible";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::EmptyManifest: return "EmptyManifest";
    case ErrorCode::IncompatibleInit: return "IncompatibleInit";
    case ErrorCode::MissingCase: return "MissingCase";
    }
    return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code)
{
}

bool is_config_error(ErrorCode code) noexcept
{
    switch (code) {
    case ErrorCode::ConfigInvalid:
    case ErrorCode::ConfigMismatch:
    case ErrorCode::IncompatibleInit:
    case ErrorCode::InvalidArgument:
        return true;
    default:
        return false;
    }
}

}  // namespace modfuse
