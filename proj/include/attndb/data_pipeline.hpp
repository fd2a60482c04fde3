#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "attndb/attention_maps.hpp"
#include "attndb/backend.hpp"
#include "attndb/grid.hpp"

namespace attndb {

struct ImageSet {
    std::vector<Grid> images;  // decoded RGB, [0, 255]
    std::vector<std::filesystem::path> source_paths;

    int size() const { return static_cast<int>(images.size()); }
};

// Loads every decodable raster file in `dir` (sorted by filename); skips
// non-images with a warning on stderr. Throws EmptyImageSet if none decode.
ImageSet load_concept_images(const std::filesystem::path& dir);

// Center-crop to square, bilinear resize to `resolution`, rescale to [-1, 1].
Grid preprocess(const Grid& image, int resolution);

struct TrainingBatch {
    std::vector<Grid> pixels;  // batch_size grids, resolution^2 x 3, in [-1, 1]
    std::vector<int> prompt_token_ids;
    TokenRoleMap roles;
    std::vector<int> image_indices;  // provenance: which source image filled each slot
};

// Deterministic stream of exactly `total_steps` batches; images are drawn
// uniformly with replacement (concept sets are smaller than the batch size).
class BatchStream {
public:
    BatchStream(const ImageSet& images, TokenizedPrompt prompt, TokenRoleMap roles,
                int batch_size, int total_steps, int resolution, std::uint64_t seed,
                bool hflip = false);

    bool next(TrainingBatch& out);
    int total_steps() const { return total_steps_; }
    int produced() const { return produced_; }

private:
    std::vector<Grid> prepared_;  // preprocessed once
    TokenizedPrompt prompt_;
    TokenRoleMap roles_;
    int batch_size_ = 0;
    int total_steps_ = 0;
    int produced_ = 0;
    bool hflip_ = false;
    std::mt19937_64 rng_;
};

BatchStream make_batches(const ImageSet& images, const TokenizedPrompt& prompt,
                         const TokenRoleMap& roles, int batch_size, int total_steps,
                         int resolution, std::uint64_t seed, bool hflip = false);

Grid hflip_grid(const Grid& in);

}  // namespace attndb
