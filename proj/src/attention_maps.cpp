#include "attndb/attention_maps.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "attndb/backend.hpp"
#include "attndb/common.hpp"
#include "attndb/grid.hpp"
#include "attndb/image_io.hpp"

namespace attndb {

using nlohmann::json;

int resolve_token_role(const AttentionMapSet& maps, const std::string& role) {
    auto it = maps.token_index.roles.find(role);
    if (it == maps.token_index.roles.end())
        fail(ErrorCode::UnknownTokenRole, "no token role '" + role + "'");
    return it->second;
}

PooledStats pooled_stats(const AttentionMapSet& maps, const std::string& role, PoolingMode mode) {
    const int col = resolve_token_role(maps, role);
    if (maps.layers.empty()) fail(ErrorCode::EmptySession, "pooled_stats on empty map set");

    if (mode == PoolingMode::kConcat) {
        std::size_t n = 0;
        double sum = 0.0;
        for (const AttentionRecord& rec : maps.layers) {
            sum += rec.values.col(col).sum();
            n += static_cast<std::size_t>(rec.values.rows());
        }
        const double mean = sum / static_cast<double>(n);
        double sq = 0.0;
        for (const AttentionRecord& rec : maps.layers)
            sq += (rec.values.col(col).array() - mean).square().sum();
        return {mean, sq / static_cast<double>(n)};
    }

    double mean_acc = 0.0, var_acc = 0.0;
    for (const AttentionRecord& rec : maps.layers) {
        const double m = rec.values.col(col).mean();
        mean_acc += m;
        var_acc += (rec.values.col(col).array() - m).square().mean();
    }
    const double L = static_cast<double>(maps.layer_count());
    return {mean_acc / L, var_acc / L};
}

Eigen::MatrixXd aggregate_heatmap(const AttentionMapSet& maps, const std::string& role,
                                  int out_resolution) {
    const int col = resolve_token_role(maps, role);
    for (const AttentionRecord& rec : maps.layers)
        if (out_resolution < rec.height || out_resolution < rec.width)
            fail(ErrorCode::ShapeMismatch, "out_resolution below layer resolution");

    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(out_resolution, out_resolution);
    for (const AttentionRecord& rec : maps.layers) {
        Eigen::MatrixXd plane(rec.height, rec.width);
        for (int y = 0; y < rec.height; ++y)
            for (int x = 0; x < rec.width; ++x) plane(y, x) = rec.values(y * rec.width + x, col);
        sum += bilinear_resize_plane(plane, out_resolution, out_resolution);
    }
    const double lo = sum.minCoeff();
    const double hi = sum.maxCoeff();
    if (hi - lo < 1e-12) return Eigen::MatrixXd::Zero(out_resolution, out_resolution);
    return (sum.array() - lo) / (hi - lo);
}

namespace {

std::string sanitize_token(const std::string& token) {
    std::string out;
    for (char c : token)
        out.push_back(std::isalnum(static_cast<unsigned char>(c)) || c == '-' ? c : '_');
    return out;
}

std::string heatmap_filename(const AttentionMapSet& maps, const std::string& role, int pos) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "token%02d", pos);
    std::string word = pos < static_cast<int>(maps.token_index.tokens.size())
                           ? maps.token_index.tokens[pos]
                           : role;
    return std::string(buf) + "_" + sanitize_token(word) + ".png";
}

}  // namespace

std::filesystem::path dump_maps(const AttentionMapSet& maps, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) fail(ErrorCode::IoFailure, "cannot create " + dir.string());

    json manifest;
    manifest["format_version"] = 1;
    manifest["prompt_tokens"] = maps.token_index.tokens;
    json roles = json::object();
    for (const auto& [role, pos] : maps.token_index.roles) roles[role] = pos;
    manifest["token_roles"] = roles;

    json layers = json::array();
    for (const AttentionRecord& rec : maps.layers) {
        char name[32];
        std::snprintf(name, sizeof(name), "layer_%02d.f32", rec.layer_id);
        json entry;
        entry["layer_id"] = rec.layer_id;
        entry["height"] = rec.height;
        entry["width"] = rec.width;
        entry["num_tokens"] = rec.num_tokens();
        entry["file"] = name;
        layers.push_back(entry);

        std::ofstream out(dir / name, std::ios::binary);
        if (!out) fail(ErrorCode::IoFailure, "cannot write " + (dir / name).string());
        // row-major [h][w][token], f32 little-endian
        for (int loc = 0; loc < rec.height * rec.width; ++loc)
            for (int t = 0; t < rec.num_tokens(); ++t) {
                const float v = static_cast<float>(rec.values(loc, t));
                out.write(reinterpret_cast<const char*>(&v), sizeof(float));
            }
        if (!out) fail(ErrorCode::IoFailure, "short write to " + (dir / name).string());
    }
    manifest["layers"] = layers;

    int max_res = 1;
    for (const AttentionRecord& rec : maps.layers)
        max_res = std::max({max_res, rec.height, rec.width});

    json heatmaps = json::object();
    for (const auto& [role, pos] : maps.token_index.roles) {
        const std::string file = heatmap_filename(maps, role, pos);
        write_grayscale_png(dir / file, aggregate_heatmap(maps, role, max_res));
        heatmaps[role] = file;
    }
    manifest["heatmaps"] = heatmaps;

    const std::filesystem::path manifest_path = dir / "manifest.json";
    std::ofstream out(manifest_path);
    if (!out) fail(ErrorCode::IoFailure, "cannot write " + manifest_path.string());
    out << manifest.dump(2) << "\n";
    return manifest_path;
}

AttentionMapSet load_maps(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) fail(ErrorCode::IoFailure, "cannot read " + manifest_path.string());
    json manifest = json::parse(in, nullptr, false);
    if (manifest.is_discarded()) fail(ErrorCode::IoFailure, "bad manifest " + manifest_path.string());

    AttentionMapSet maps;
    maps.token_index.tokens = manifest.at("prompt_tokens").get<std::vector<std::string>>();
    for (const auto& [role, pos] : manifest.at("token_roles").items())
        maps.token_index.roles[role] = pos.get<int>();

    const std::filesystem::path dir = manifest_path.parent_path();
    for (const json& entry : manifest.at("layers")) {
        AttentionRecord rec;
        rec.layer_id = entry.at("layer_id").get<int>();
        rec.height = entry.at("height").get<int>();
        rec.width = entry.at("width").get<int>();
        const int tokens = entry.at("num_tokens").get<int>();
        rec.values.resize(rec.height * rec.width, tokens);

        std::ifstream bin(dir / entry.at("file").get<std::string>(), std::ios::binary);
        if (!bin) fail(ErrorCode::IoFailure, "cannot read record binary");
        for (int loc = 0; loc < rec.height * rec.width; ++loc)
            for (int t = 0; t < tokens; ++t) {
                float v = 0.0f;
                bin.read(reinterpret_cast<char*>(&v), sizeof(float));
                rec.values(loc, t) = v;
            }
        if (!bin) fail(ErrorCode::IoFailure, "short read from record binary");
        maps.layers.push_back(std::move(rec));
    }
    return maps;
}

void CaptureSession::add_pass(AttentionMapSet pass) { passes_.push_back(std::move(pass)); }

CaptureSession::CaptureSession(Backend& backend, TokenRoleMap roles)
    : roles_(std::move(roles)), backend_(&backend) {
    if (backend.capture() != nullptr)
        fail(ErrorCode::SessionAlreadyActive, "capture session already active on this backend");
    backend.attach_capture(this);
}

CaptureSession::~CaptureSession() { end(); }

void CaptureSession::end() {
    if (backend_ != nullptr && backend_->capture() == this) backend_->detach_capture();
    backend_ = nullptr;
}

CaptureSession begin_capture(Backend& backend, const TokenRoleMap& roles) {
    return CaptureSession(backend, roles);
}

void end_capture(CaptureSession& session) { session.end(); }

AttentionMapSet collect_maps(const CaptureSession& session) {
    if (session.pass_count() == 0)
        fail(ErrorCode::EmptySession, "no forward pass recorded in capture session");
    AttentionMapSet mean = session.pass(0);
    for (int i = 1; i < session.pass_count(); ++i) {
        const AttentionMapSet& p = session.pass(i);
        for (std::size_t l = 0; l < mean.layers.size(); ++l)
            mean.layers[l].values += p.layers[l].values;
    }
    const double inv = 1.0 / session.pass_count();
    for (AttentionRecord& rec : mean.layers) rec.values *= inv;
    return mean;
}

}  // namespace attndb
