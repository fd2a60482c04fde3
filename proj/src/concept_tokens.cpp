#include "attndb/concept_tokens.hpp"

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>

#include "attndb/common.hpp"

namespace attndb {
namespace {

std::string render_template(const ConceptSpec& spec) {
    std::string out = spec.training_prompt;
    auto replace_all = [&out](const std::string& from, const std::string& to) {
        for (std::size_t pos = out.find(from); pos != std::string::npos;
             pos = out.find(from, pos + to.size()))
            out.replace(pos, from.size(), to);
    };
    replace_all("{placeholder}", spec.placeholder);
    replace_all("{super_category}", spec.super_category);
    return out;
}

}  // namespace

void validate_concept_spec(const Backend& backend, const ConceptSpec& spec) {
    if (spec.placeholder.empty() || spec.super_category.empty())
        fail(ErrorCode::InvalidConfig, "placeholder and super_category must be non-empty");
    // Diagnose multi-word categories before the vocabulary check: the
    // tokenizer is lenient about unknown words, so order matters here.
    const TokenizedPrompt cat = backend.tokenize(spec.super_category);
    if (cat.ids.size() != 1)
        fail(ErrorCode::MultiTokenCategory,
             "super_category must be a single token: " + spec.super_category);
    if (!backend.has_token(spec.super_category))
        fail(ErrorCode::UnknownToken, "super_category not in vocabulary: " + spec.super_category);
    const std::string rendered = render_template(spec);
    const std::string canonical = "a photo of a " + spec.placeholder + " " + spec.super_category;
    if (rendered != canonical)
        fail(ErrorCode::InvalidConfig, "training_prompt must render to \"" + canonical + "\"");
}

TokenHandle inject_concept_token(Backend& backend, const ConceptSpec& spec) {
    validate_concept_spec(backend, spec);
    if (backend.has_token(spec.placeholder))
        fail(ErrorCode::PlaceholderCollision,
             "placeholder already in vocabulary: " + spec.placeholder);
    const int cat_id = backend.token_id(spec.super_category);
    const int id = backend.append_token(spec.placeholder, backend.embedding_row(cat_id));
    return {id, spec.placeholder, &backend};
}

EmbeddingSnapshot snapshot_embedding(const TokenHandle& handle, long step) {
    if (handle.backend == nullptr || handle.token_id < 0)
        fail(ErrorCode::UnknownToken, "invalid token handle");
    EmbeddingSnapshot snap;
    snap.token_id = handle.token_id;
    snap.step = step;
    snap.vector = handle.backend->embedding_row(handle.token_id);
    return snap;
}

double embedding_drift(const EmbeddingSnapshot& a, const EmbeddingSnapshot& b) {
    if (a.vector.size() != b.vector.size())
        fail(ErrorCode::DimensionMismatch, "snapshot dimensions differ");
    const double na = a.vector.norm();
    const double nb = b.vector.norm();
    if (na == 0.0 || nb == 0.0) fail(ErrorCode::ZeroVector, "drift undefined for zero vectors");
    return a.vector.dot(b.vector) / (na * nb);
}

TrainingPrompt build_training_prompt(const Backend& backend, const ConceptSpec& spec) {
    validate_concept_spec(backend, spec);
    if (!backend.has_token(spec.placeholder))
        fail(ErrorCode::UnknownToken, "placeholder must be injected first: " + spec.placeholder);

    TrainingPrompt out;
    out.text = render_template(spec);
    out.tokenized = backend.tokenize(out.text);
    const int placeholder_id = backend.token_id(spec.placeholder);
    const int category_id = backend.token_id(spec.super_category);
    const int n = static_cast<int>(out.tokenized.ids.size());
    for (int j = 0; j < n; ++j) {
        if (out.tokenized.ids[j] == placeholder_id && out.placeholder_pos < 0)
            out.placeholder_pos = j;
        else if (out.tokenized.ids[j] == category_id && out.category_pos < 0)
            out.category_pos = j;
    }
    if (out.placeholder_pos < 0 || out.category_pos < 0)
        fail(ErrorCode::MissingTokenRole, "prompt lost the placeholder or category token");

    out.roles.tokens = out.tokenized.tokens;
    for (int j = 0; j < n; ++j) {
        if (j == out.placeholder_pos)
            out.roles.roles["V"] = j;
        else if (j == out.category_pos)
            out.roles.roles["category"] = j;
        else
            out.roles.roles["pos:" + std::to_string(j)] = j;
    }
    return out;
}

void save_snapshot(const EmbeddingSnapshot& snapshot, const std::filesystem::path& json_path) {
    std::filesystem::path bin_path = json_path;
    bin_path.replace_extension(".bin");

    nlohmann::json meta;
    meta["token_id"] = snapshot.token_id;
    meta["step"] = snapshot.step;
    meta["dim"] = snapshot.vector.size();
    meta["data"] = bin_path.filename().string();
    std::ofstream jf(json_path);
    if (!jf) fail(ErrorCode::IoFailure, "cannot write " + json_path.string());
    jf << meta.dump(2) << "\n";

    std::ofstream bf(bin_path, std::ios::binary);
    if (!bf) fail(ErrorCode::IoFailure, "cannot write " + bin_path.string());
    for (Eigen::Index i = 0; i < snapshot.vector.size(); ++i) {
        const double v = snapshot.vector(i);
        bf.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
}

EmbeddingSnapshot load_snapshot(const std::filesystem::path& json_path) {
    std::ifstream jf(json_path);
    if (!jf) fail(ErrorCode::IoFailure, "cannot read " + json_path.string());
    nlohmann::json meta = nlohmann::json::parse(jf, nullptr, false);
    if (meta.is_discarded()) fail(ErrorCode::IoFailure, "malformed snapshot " + json_path.string());

    EmbeddingSnapshot snap;
    snap.token_id = meta.at("token_id").get<int>();
    snap.step = meta.at("step").get<long>();
    const auto dim = meta.at("dim").get<Eigen::Index>();
    const std::filesystem::path bin_path = json_path.parent_path() / meta.at("data").get<std::string>();
    std::ifstream bf(bin_path, std::ios::binary);
    if (!bf) fail(ErrorCode::IoFailure, "cannot read " + bin_path.string());
    snap.vector.resize(dim);
    for (Eigen::Index i = 0; i < dim; ++i) {
        double v = 0.0;
        bf.read(reinterpret_cast<char*>(&v), sizeof(v));
        if (!bf) fail(ErrorCode::IoFailure, "snapshot sidecar truncated: " + bin_path.string());
        snap.vector(i) = v;
    }
    return snap;
}

}  // namespace attndb
