#pragma once

#include <Eigen/Dense>
#include <filesystem>

#include "attndb/grid.hpp"

namespace attndb {

// Decodes a raster file (PNG/JPEG/WebP/...) to an RGB grid with values in
// [0, 255]. Returns an empty grid (h == 0) if the file is not a decodable image.
Grid decode_image_file(const std::filesystem::path& path);

// value range [0, 1] -> 8-bit grayscale
void write_grayscale_png(const std::filesystem::path& path, const Eigen::MatrixXd& values);

// value range [-1, 1] -> 8-bit RGB
void write_rgb_png(const std::filesystem::path& path, const Grid& image);

}  // namespace attndb
