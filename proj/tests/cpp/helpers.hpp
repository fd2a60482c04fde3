#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "attndb/attention_maps.hpp"
#include "attndb/common.hpp"

namespace attndb::test {

// Random mapset with mixed resolutions; roles "V" and "category" always
// present. Values are uniform in (0, 1), not normalized — pooled statistics
// and the regularizer are defined on arbitrary value collections.
inline AttentionMapSet random_mapset(std::mt19937_64& rng, const std::vector<int>& resolutions,
                                     int n_tokens) {
    std::uniform_real_distribution<double> uni(1e-3, 1.0);
    AttentionMapSet maps;
    for (std::size_t l = 0; l < resolutions.size(); ++l) {
        AttentionRecord rec;
        rec.layer_id = static_cast<int>(l);
        rec.height = resolutions[l];
        rec.width = resolutions[l];
        rec.values.resize(resolutions[l] * resolutions[l], n_tokens);
        for (Eigen::Index i = 0; i < rec.values.rows(); ++i)
            for (Eigen::Index j = 0; j < rec.values.cols(); ++j) rec.values(i, j) = uni(rng);
        maps.layers.push_back(std::move(rec));
    }
    maps.token_index.tokens.resize(n_tokens, "w");
    maps.token_index.roles["V"] = 0;
    maps.token_index.roles["category"] = n_tokens > 1 ? 1 : 0;
    for (int p = 2; p < n_tokens; ++p) maps.token_index.roles["pos:" + std::to_string(p)] = p;
    return maps;
}

// Runs f, which must throw Error; returns the code it threw.
template <typename F>
ErrorCode thrown_code(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    throw std::logic_error("expected an Error, none was thrown");
}

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("attndb_" + tag + "_" + std::to_string(::getpid()) + "_" +
                 std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace attndb::test
