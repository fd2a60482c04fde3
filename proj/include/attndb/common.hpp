#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace attndb {

enum class ErrorCode {
    PlaceholderCollision,
    MultiTokenCategory,
    UnknownToken,
    DimensionMismatch,
    ZeroVector,
    SessionAlreadyActive,
    EmptySession,
    UnknownTokenRole,
    IoFailure,
    ShapeMismatch,
    MissingTokenRole,
    NonFiniteLoss,
    EmptyImageSet,
    TimestepOutOfRange,
    InvalidConfig,
    WeightsUnavailable,
    ScopeResolutionFailure,
    UnknownGroup,
    SamplingFailure,
    MissingArtifacts,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message);
    ErrorCode code() const { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

// Deterministic seed fan-out: every random consumer (init, data sampling,
// timesteps, noise, sampling) derives its own stream from the root seed and a
// purpose tag, so streams never alias across stages or subsystems.
std::uint64_t derive_seed(std::uint64_t root, std::string_view tag);
std::mt19937_64 make_rng(std::uint64_t root, std::string_view tag);

}  // namespace attndb
