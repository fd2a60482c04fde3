#include "attndb/fingerprint.hpp"

#include <openssl/evp.h>

#include <cstring>

#include "attndb/common.hpp"

namespace attndb {

namespace {

class Sha256Stream {
public:
    Sha256Stream() : ctx_(EVP_MD_CTX_new()) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1)
            fail(ErrorCode::IoFailure, "sha256 init failed");
    }
    ~Sha256Stream() { EVP_MD_CTX_free(ctx_); }
    Sha256Stream(const Sha256Stream&) = delete;
    Sha256Stream& operator=(const Sha256Stream&) = delete;

    void update(const void* data, std::size_t size) {
        if (EVP_DigestUpdate(ctx_, data, size) != 1)
            fail(ErrorCode::IoFailure, "sha256 update failed");
    }

    void update_u64(std::uint64_t v) {
        unsigned char bytes[8];
        for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
        update(bytes, 8);
    }

    void update_f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        update_u64(bits);
    }

    std::string hex() {
        unsigned char digest[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        if (EVP_DigestFinal_ex(ctx_, digest, &len) != 1)
            fail(ErrorCode::IoFailure, "sha256 final failed");
        static const char* kHex = "0123456789abcdef";
        std::string out;
        out.reserve(2 * len);
        for (unsigned int i = 0; i < len; ++i) {
            out.push_back(kHex[digest[i] >> 4]);
            out.push_back(kHex[digest[i] & 0xf]);
        }
        return out;
    }

private:
    EVP_MD_CTX* ctx_;
};

}  // namespace

ParamFingerprint fingerprint_params(const std::string& group_name,
                                    const std::vector<NamedParam>& params) {
    Sha256Stream sha;
    for (const NamedParam& p : params) {
        sha.update(p.name.data(), p.name.size());
        sha.update_u64(static_cast<std::uint64_t>(p.value->rows()));
        sha.update_u64(static_cast<std::uint64_t>(p.value->cols()));
        for (Eigen::Index i = 0; i < p.value->rows(); ++i)
            for (Eigen::Index j = 0; j < p.value->cols(); ++j) sha.update_f64((*p.value)(i, j));
    }
    return ParamFingerprint{group_name, sha.hex()};
}

std::string sha256_hex(const void* data, std::size_t size) {
    Sha256Stream sha;
    sha.update(data, size);
    return sha.hex();
}

std::string sha256_hex(const std::string& data) { return sha256_hex(data.data(), data.size()); }

}  // namespace attndb
