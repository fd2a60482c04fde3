#include "attndb/common.hpp"

namespace attndb {

const char* error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::PlaceholderCollision: return "PlaceholderCollision";
        case ErrorCode::MultiTokenCategory: return "MultiTokenCategory";
        case ErrorCode::UnknownToken: return "UnknownToken";
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::ZeroVector: return "ZeroVector";
        case ErrorCode::SessionAlreadyActive: return "SessionAlreadyActive";
        case ErrorCode::EmptySession: return "EmptySession";
        case ErrorCode::UnknownTokenRole: return "UnknownTokenRole";
        case ErrorCode::IoFailure: return "IoFailure";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::MissingTokenRole: return "MissingTokenRole";
        case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
        case ErrorCode::EmptyImageSet: return "EmptyImageSet";
        case ErrorCode::TimestepOutOfRange: return "TimestepOutOfRange";
        case ErrorCode::InvalidConfig: return "InvalidConfig";
        case ErrorCode::WeightsUnavailable: return "WeightsUnavailable";
        case ErrorCode::ScopeResolutionFailure: return "ScopeResolutionFailure";
        case ErrorCode::UnknownGroup: return "UnknownGroup";
        case ErrorCode::SamplingFailure: return "SamplingFailure";
        case ErrorCode::MissingArtifacts: return "MissingArtifacts";
    }
    return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

namespace {

std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t root, std::string_view tag) {
    return splitmix64(splitmix64(root) ^ fnv1a64(tag));
}

std::mt19937_64 make_rng(std::uint64_t root, std::string_view tag) {
    return std::mt19937_64(derive_seed(root, tag));
}

}  // namespace attndb
