#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <string>

#include "attndb/backend.hpp"

namespace attndb {

// A personalization target: where its images live, which placeholder token
// stands for it and which single-token super-category seeds the embedding.
struct ConceptSpec {
    std::string concept_id;
    std::filesystem::path image_dir;
    std::string placeholder = "[V]";
    std::string super_category;
    std::string training_prompt = "a photo of a {placeholder} {super_category}";
};

// Throws PlaceholderCollision / MultiTokenCategory / UnknownToken /
// InvalidConfig when the spec cannot drive an injection against `backend`.
void validate_concept_spec(const Backend& backend, const ConceptSpec& spec);

struct TokenHandle {
    int token_id = -1;
    std::string token;
    Backend* backend = nullptr;
};

struct EmbeddingSnapshot {
    int token_id = -1;
    long step = 0;
    Eigen::VectorXd vector;  // value copy, full precision
};

TokenHandle inject_concept_token(Backend& backend, const ConceptSpec& spec);

EmbeddingSnapshot snapshot_embedding(const TokenHandle& handle, long step);

// Cosine similarity of two snapshots. A value >= 0.999 after joint
// finetuning indicates the embedding barely moved.
double embedding_drift(const EmbeddingSnapshot& a, const EmbeddingSnapshot& b);
constexpr double kDriftStuckThreshold = 0.999;

struct TrainingPrompt {
    std::string text;
    TokenizedPrompt tokenized;
    TokenRoleMap roles;
    int placeholder_pos = -1;
    int category_pos = -1;
};

// Renders the spec's template and assigns every prompt position exactly one
// role ("V", "category", or "pos:<i>"). The placeholder must already be
// injected so it tokenizes to itself.
TrainingPrompt build_training_prompt(const Backend& backend, const ConceptSpec& spec);

// JSON record {token_id, step, dim, data} plus an f64 little-endian sidecar.
void save_snapshot(const EmbeddingSnapshot& snapshot, const std::filesystem::path& json_path);
EmbeddingSnapshot load_snapshot(const std::filesystem::path& json_path);

}  // namespace attndb
