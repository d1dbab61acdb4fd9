#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace supe {

enum class ErrorCode {
    invalid_argument,
    malformed_row,
    duplicate_cell,
    non_finite_value,
    inconsistent_factor,
    not_positive_definite,
    unbalanced_data,
    zero_variance,
    singular_system,
    not_identifiable,
    no_root,
    missing_cell,
    missing_artifact,
    schema_mismatch,
    io_failure,
};

[[nodiscard]] inline std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::invalid_argument: return "invalid_argument";
        case ErrorCode::malformed_row: return "malformed_row";
        case ErrorCode::duplicate_cell: return "duplicate_cell";
        case ErrorCode::non_finite_value: return "non_finite_value";
        case ErrorCode::inconsistent_factor: return "inconsistent_factor";
        case ErrorCode::not_positive_definite: return "not_positive_definite";
        case ErrorCode::unbalanced_data: return "unbalanced_data";
        case ErrorCode::zero_variance: return "zero_variance";
        case ErrorCode::singular_system: return "singular_system";
        case ErrorCode::not_identifiable: return "not_identifiable";
        case ErrorCode::no_root: return "no_root";
        case ErrorCode::missing_cell: return "missing_cell";
        case ErrorCode::missing_artifact: return "missing_artifact";
        case ErrorCode::schema_mismatch: return "schema_mismatch";
        case ErrorCode::io_failure: return "io_failure";
    }
    return "unknown";
}

/// Every failure raised by the library carries a stable machine-readable code.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace supe
