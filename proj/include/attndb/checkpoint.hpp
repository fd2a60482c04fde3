#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "attndb/backend.hpp"

namespace attndb {

// Versioned binary of named tensors (little-endian f32), plus optional single
// embedding rows. Stages store only the groups they changed.
struct CheckpointInfo {
    std::uint32_t version = 0;
    std::vector<std::string> tensors;
    std::vector<int> embedding_rows;  // token ids of stored rows
};

void save_checkpoint(const std::filesystem::path& path, Backend& backend,
                     const std::vector<std::string>& groups,
                     const std::vector<int>& embedding_rows = {});

// Copies stored tensors back into the backend; dimensions must match, and
// stored embedding rows must reference valid token ids.
void apply_checkpoint(const std::filesystem::path& path, Backend& backend);

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

}  // namespace attndb
