#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace attndb {

class Backend;

// One cross-attention layer's maps for a single pass: post-softmax attention
// probabilities from spatial locations to text tokens, averaged over heads
// and batch items. Rows are locations (y*width + x), columns token positions.
struct AttentionRecord {
    int layer_id = 0;
    int height = 0;
    int width = 0;
    Eigen::MatrixXd values;  // (height*width) x num_tokens

    int num_tokens() const { return static_cast<int>(values.cols()); }
};

// Role -> token position. Each prompt position carries exactly one role:
// "V" for the placeholder, "category" for the super-category token,
// "pos:<i>" otherwise.
struct TokenRoleMap {
    std::map<std::string, int> roles;
    std::vector<std::string> tokens;  // the prompt's token strings, by position
};

struct AttentionMapSet {
    std::vector<AttentionRecord> layers;
    TokenRoleMap token_index;

    int layer_count() const { return static_cast<int>(layers.size()); }
};

struct PooledStats {
    double mean = 0.0;
    double variance = 0.0;  // population variance
};

enum class PoolingMode {
    kConcat,        // one pooled population across layers; larger maps weigh more
    kPerLayerMean,  // average of per-layer means / per-layer population variances
};

int resolve_token_role(const AttentionMapSet& maps, const std::string& role);

PooledStats pooled_stats(const AttentionMapSet& maps, const std::string& role,
                         PoolingMode mode = PoolingMode::kConcat);

// Upsample each layer's token map to out_resolution, sum across layers, then
// min-max normalize to [0, 1]. A constant sum gives an all-zero heatmap.
Eigen::MatrixXd aggregate_heatmap(const AttentionMapSet& maps, const std::string& role,
                                  int out_resolution);

// Writes manifest.json plus one f32 little-endian binary per record and one
// 8-bit grayscale heatmap PNG per token role. Returns the manifest path.
std::filesystem::path dump_maps(const AttentionMapSet& maps, const std::filesystem::path& dir);
AttentionMapSet load_maps(const std::filesystem::path& manifest_path);

// Records mapsets produced by forward passes between begin_capture and
// end_capture. Each pass is already head- and batch-averaged; passes are kept
// separately so callers can inspect per-pass maps or the mean over passes.
// Attaches to the backend on construction and detaches on destruction; only
// one session may be active per backend instance.
class CaptureSession {
public:
    CaptureSession(Backend& backend, TokenRoleMap roles);
    ~CaptureSession();
    CaptureSession(const CaptureSession&) = delete;
    CaptureSession& operator=(const CaptureSession&) = delete;

    void end();  // detach early

    void add_pass(AttentionMapSet pass);  // called by the backend
    int pass_count() const { return static_cast<int>(passes_.size()); }
    const AttentionMapSet& pass(int index) const { return passes_.at(index); }
    const TokenRoleMap& roles() const { return roles_; }

private:
    TokenRoleMap roles_;
    Backend* backend_ = nullptr;
    std::vector<AttentionMapSet> passes_;
};

CaptureSession begin_capture(Backend& backend, const TokenRoleMap& roles);
void end_capture(CaptureSession& session);

// Mean over all recorded passes (identity for a single pass).
AttentionMapSet collect_maps(const CaptureSession& session);

}  // namespace attndb
