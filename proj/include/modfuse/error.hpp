#pragma once

#include <stdexcept>
#include <string>

namespace modfuse {

enum class ErrorCode {
    InvalidArgument,
    ShapeMismatch,
    PatchTooLarge,
    LabelOutOfRange,
    BadMagic,
    BadHeader,
    UnsupportedDatatype,
    TruncatedData,
    InconsistentModalityCount,
    DuplicateCaseId,
    ConfigInvalid,
    ModalityCountMismatch,
    NoCachedForward,
    VersionMismatch,
    ConfigMismatch,
    MissingParam,
    EmptyMask,
    IndexOutOfRange,
    DegenerateBatch,
    ZeroVector,
    EpochOutOfRange,
    EmptyRegionList,
    SpecInfeasible,
    IoError,
    EmptyManifest,
    IncompatibleInit,
    MissingCase,
};

const char* to_string(ErrorCode code) noexcept;

// Every failure raised by the library carries one of the codes above; the
// message names the offending field, axis, line or case.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message);

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

// True for codes that stem from bad configuration rather than bad data.
bool is_config_error(ErrorCode code) noexcept;

}  // namespace modfuse
