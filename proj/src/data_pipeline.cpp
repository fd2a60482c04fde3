#include "attndb/data_pipeline.hpp"

#include <algorithm>
#include <iostream>

#include "attndb/common.hpp"
#include "attndb/image_io.hpp"

namespace attndb {

ImageSet load_concept_images(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir))
        fail(ErrorCode::IoFailure, "not a directory: " + dir.string());

    std::vector<fs::path> entries;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file()) entries.push_back(entry.path());
    std::sort(entries.begin(), entries.end());

    ImageSet set;
    for (const fs::path& p : entries) {
        Grid img = decode_image_file(p);
        if (img.locations() == 0) {
            std::cerr << "warning: skipping undecodable file " << p << "\n";
            continue;
        }
        set.images.push_back(std::move(img));
        set.source_paths.push_back(p);
    }
    if (set.images.empty())
        fail(ErrorCode::EmptyImageSet, "no decodable images in " + dir.string());
    return set;
}

Grid preprocess(const Grid& image, int resolution) {
    if (resolution <= 0) fail(ErrorCode::InvalidConfig, "resolution must be positive");
    Grid out = bilinear_resize(center_crop_square(image), resolution, resolution);
    out.values = out.values / 127.5;
    out.values.array() -= 1.0;
    return out;
}

Grid hflip_grid(const Grid& in) {
    Grid out = in;
    for (int y = 0; y < in.h; ++y)
        for (int x = 0; x < in.w; ++x)
            out.values.row(y * in.w + x) = in.values.row(y * in.w + (in.w - 1 - x));
    return out;
}

BatchStream::BatchStream(const ImageSet& images, TokenizedPrompt prompt, TokenRoleMap roles,
                         int batch_size, int total_steps, int resolution, std::uint64_t seed,
                         bool hflip)
    : prompt_(std::move(prompt)),
      roles_(std::move(roles)),
      batch_size_(batch_size),
      total_steps_(total_steps),
      hflip_(hflip),
      rng_(make_rng(seed, "data/batches")) {
    if (batch_size < 1) fail(ErrorCode::InvalidConfig, "batch_size must be >= 1");
    if (total_steps < 0) fail(ErrorCode::InvalidConfig, "total_steps must be >= 0");
    if (images.images.empty()) fail(ErrorCode::EmptyImageSet, "empty image set");
    prepared_.reserve(images.images.size());
    for (const Grid& img : images.images) prepared_.push_back(preprocess(img, resolution));
}

bool BatchStream::next(TrainingBatch& out) {
    if (produced_ >= total_steps_) return false;
    ++produced_;
    out.pixels.clear();
    out.image_indices.clear();
    out.prompt_token_ids = prompt_.ids;
    out.roles = roles_;
    std::uniform_int_distribution<int> pick(0, static_cast<int>(prepared_.size()) - 1);
    std::bernoulli_distribution flip(0.5);
    for (int i = 0; i < batch_size_; ++i) {
        const int idx = pick(rng_);
        out.image_indices.push_back(idx);
        if (hflip_ && flip(rng_))
            out.pixels.push_back(hflip_grid(prepared_[idx]));
        else
            out.pixels.push_back(prepared_[idx]);
    }
    return true;
}

BatchStream make_batches(const ImageSet& images, const TokenizedPrompt& prompt,
                         const TokenRoleMap& roles, int batch_size, int total_steps,
                         int resolution, std::uint64_t seed, bool hflip) {
    return BatchStream(images, prompt, roles, batch_size, total_steps, resolution, seed, hflip);
}

}  // namespace attndb
