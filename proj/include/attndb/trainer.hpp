#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "attndb/backend.hpp"
#include "attndb/concept_tokens.hpp"
#include "attndb/data_pipeline.hpp"
#include "attndb/fingerprint.hpp"
#include "attndb/objectives.hpp"
#include "attndb/optimizer.hpp"

namespace attndb {

// What a stage may update. The text encoder is excluded from every scope.
enum class TrainableScope {
    EMBEDDING_ONLY,            // the placeholder's row of the token-embedding table
    CROSS_ATTENTION,           // q/k/v/out projections of every cross-attention block
    FULL_UNET,                 // cross-attention plus the rest of the denoiser
    EMBEDDING_PLUS_FULL_UNET,  // joint baseline
};

const char* scope_name(TrainableScope scope);

struct StagePlan {
    std::string stage_id;  // "1" | "2" | "3" | "baseline"
    TrainableScope scope = TrainableScope::EMBEDDING_ONLY;
    double learning_rate = 0.0;
    int steps = 0;
    RegWeights reg_weights;
    int batch_size = 8;
};

// The staged schedule: embedding alignment, then cross-attention refinement,
// then full-denoiser identity capture.
std::array<StagePlan, 3> default_schedule();

// Joint embedding+denoiser finetuning, no map regularizer.
StagePlan baseline_plan();

// Maps a scope to concrete parameter views with their gradient stores.
std::vector<ParamView> resolve_scope(Backend& backend, TrainableScope scope,
                                     int placeholder_id);

struct StepLog {
    long step = 0;  // global across stages
    std::string stage;
    double diffusion_loss = 0.0;
    double reg_loss = 0.0;
    double mu_v = 0.0;
    double mu_cat = 0.0;
    double var_v = 0.0;
    double var_cat = 0.0;
};

struct StageResult {
    StagePlan plan;
    std::vector<StepLog> logs;
    std::map<std::string, ParamFingerprint> fingerprints_before;
    std::map<std::string, ParamFingerprint> fingerprints_after;
    EmbeddingSnapshot embedding_before;
    EmbeddingSnapshot embedding_after;
    std::filesystem::path checkpoint_path;  // empty when no run dir configured
    double wall_seconds = 0.0;
};

struct TrainerOptions {
    std::filesystem::path run_dir;  // empty: keep everything in memory
    std::uint64_t seed = 0;
    bool dump_attention = true;
    int attn_dump_passes = 4;  // timesteps spread across the schedule
    PoolingMode pooling = PoolingMode::kConcat;
    bool hflip = false;  // random horizontal flips in the batch stream
};

StageResult run_stage(const StagePlan& plan, Backend& backend, const ConceptSpec& spec,
                      const TokenHandle& handle, BatchStream& stream,
                      const TrainerOptions& options, long step_offset = 0);

struct TrainedArtifacts {
    std::vector<StageResult> stages;
    TokenHandle handle;
    TrainingPrompt prompt;
    std::map<std::string, ParamFingerprint> final_fingerprints;
    EmbeddingSnapshot initial_embedding;
    std::filesystem::path run_dir;
};

// Injects the concept, runs the schedule in order, and (when a run dir is
// set) writes per-stage checkpoints, loss logs, attention dumps, embedding
// snapshots and a final consolidated checkpoint.
TrainedArtifacts run_full(const std::vector<StagePlan>& schedule, Backend& backend,
                          const ConceptSpec& spec, const ImageSet& images,
                          const TrainerOptions& options);

std::string stage_dir_name(const std::string& stage_id);

}  // namespace attndb
