#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace attndb {

struct NamedParam {
    std::string name;
    Eigen::MatrixXd* value = nullptr;
};

// Deterministic digest of a parameter group, used to prove freezing
// contracts. Canonical form: for each tensor in declared order, the name,
// the shape as u64 little-endian, then the values as little-endian f64 in
// row-major (i, j) order. Equal values give equal digests, bit for bit.
struct ParamFingerprint {
    std::string group_name;
    std::string digest;  // 64 hex chars (SHA-256)

    bool operator==(const ParamFingerprint& other) const = default;
};

ParamFingerprint fingerprint_params(const std::string& group_name,
                                    const std::vector<NamedParam>& params);

std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_hex(const std::string& data);

}  // namespace attndb
