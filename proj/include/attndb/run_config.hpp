#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include "attndb/backend.hpp"
#include "attndb/concept_tokens.hpp"
#include "attndb/trainer.hpp"

namespace attndb {

// One run = one file. Unknown keys are rejected so typos cannot silently
// fall back to defaults.
struct RunConfig {
    std::uint64_t seed = 0;
    std::filesystem::path output_dir = "run";
    std::string backend = "toy";  // "toy" | "pretrained"
    ConceptSpec concept_spec;
    ToyConfig toy;
    std::string weights_path;  // pretrained backend only
    std::array<StagePlan, 3> schedule = default_schedule();
    bool hflip = false;
};

RunConfig parse_run_config(const std::filesystem::path& path);
RunConfig parse_run_config_string(const std::string& text, const std::string& origin = "<string>");

void validate_run_config(const RunConfig& config);

// Canonical form: fixed key order, full float precision; emit-parse round
// trips to an equal structure.
std::string emit_run_config(const RunConfig& config);
void write_run_config(const RunConfig& config, const std::filesystem::path& path);

bool run_config_equal(const RunConfig& a, const RunConfig& b);

}  // namespace attndb
