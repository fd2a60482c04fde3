#pragma once

#include <Eigen/Dense>

namespace attndb {

// Channel-last spatial tensor stored as (h*w) x c, row-major in locations
// (location index = y*w + x). Used for latents, RGB images and pixel batches.
struct Grid {
    int h = 0;
    int w = 0;
    int c = 0;
    Eigen::MatrixXd values;  // (h*w) x c

    static Grid zeros(int h, int w, int c);

    int locations() const { return h * w; }
    double& at(int y, int x, int ch) { return values(y * w + x, ch); }
    double at(int y, int x, int ch) const { return values(y * w + x, ch); }
};

// Bilinear resampling with half-pixel sample centers, edge-clamped.
Eigen::MatrixXd bilinear_resize_plane(const Eigen::MatrixXd& plane, int out_h, int out_w);
Grid bilinear_resize(const Grid& in, int out_h, int out_w);

Grid center_crop_square(const Grid& in);

}  // namespace attndb
