#include "attndb/grid.hpp"

#include <algorithm>
#include <cmath>

#include "attndb/common.hpp"

namespace attndb {

Grid Grid::zeros(int h, int w, int c) {
    Grid g;
    g.h = h;
    g.w = w;
    g.c = c;
    g.values = Eigen::MatrixXd::Zero(h * w, c);
    return g;
}

Eigen::MatrixXd bilinear_resize_plane(const Eigen::MatrixXd& plane, int out_h, int out_w) {
    const int in_h = static_cast<int>(plane.rows());
    const int in_w = static_cast<int>(plane.cols());
    if (in_h <= 0 || in_w <= 0 || out_h <= 0 || out_w <= 0)
        fail(ErrorCode::ShapeMismatch, "bilinear_resize_plane: empty plane");
    if (in_h == out_h && in_w == out_w) return plane;

    Eigen::MatrixXd out(out_h, out_w);
    const double sy = static_cast<double>(in_h) / out_h;
    const double sx = static_cast<double>(in_w) / out_w;
    for (int y = 0; y < out_h; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(in_h - 1));
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, in_h - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(in_w - 1));
            const int x0 = static_cast<int>(std::floor(fx));
            const int x1 = std::min(x0 + 1, in_w - 1);
            const double wx = fx - x0;
            out(y, x) = (1.0 - wy) * ((1.0 - wx) * plane(y0, x0) + wx * plane(y0, x1)) +
                        wy * ((1.0 - wx) * plane(y1, x0) + wx * plane(y1, x1));
        }
    }
    return out;
}

Grid bilinear_resize(const Grid& in, int out_h, int out_w) {
    Grid out = Grid::zeros(out_h, out_w, in.c);
    for (int ch = 0; ch < in.c; ++ch) {
        Eigen::MatrixXd plane(in.h, in.w);
        for (int y = 0; y < in.h; ++y)
            for (int x = 0; x < in.w; ++x) plane(y, x) = in.at(y, x, ch);
        Eigen::MatrixXd resized = bilinear_resize_plane(plane, out_h, out_w);
        for (int y = 0; y < out_h; ++y)
            for (int x = 0; x < out_w; ++x) out.at(y, x, ch) = resized(y, x);
    }
    return out;
}

Grid center_crop_square(const Grid& in) {
    const int side = std::min(in.h, in.w);
    if (side == in.h && side == in.w) return in;
    const int y0 = (in.h - side) / 2;
    const int x0 = (in.w - side) / 2;
    Grid out = Grid::zeros(side, side, in.c);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
            for (int ch = 0; ch < in.c; ++ch) out.at(y, x, ch) = in.at(y0 + y, x0 + x, ch);
    return out;
}

}  // namespace attndb
