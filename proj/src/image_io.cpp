#include "attndb/image_io.hpp"

#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>

#include "attndb/common.hpp"

namespace attndb {

Grid decode_image_file(const std::filesystem::path& path) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) return Grid{};
    Grid out = Grid::zeros(bgr.rows, bgr.cols, 3);
    for (int y = 0; y < bgr.rows; ++y) {
        const cv::Vec3b* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < bgr.cols; ++x) {
            out.at(y, x, 0) = row[x][2];  // BGR -> RGB
            out.at(y, x, 1) = row[x][1];
            out.at(y, x, 2) = row[x][0];
        }
    }
    return out;
}

void write_grayscale_png(const std::filesystem::path& path, const Eigen::MatrixXd& values) {
    cv::Mat img(static_cast<int>(values.rows()), static_cast<int>(values.cols()), CV_8UC1);
    for (int y = 0; y < img.rows; ++y)
        for (int x = 0; x < img.cols; ++x) {
            const double v = std::clamp(values(y, x), 0.0, 1.0);
            img.at<unsigned char>(y, x) = static_cast<unsigned char>(std::lround(v * 255.0));
        }
    if (!cv::imwrite(path.string(), img))
        fail(ErrorCode::IoFailure, "failed to write " + path.string());
}

void write_rgb_png(const std::filesystem::path& path, const Grid& image) {
    cv::Mat img(image.h, image.w, CV_8UC3);
    for (int y = 0; y < image.h; ++y)
        for (int x = 0; x < image.w; ++x) {
            cv::Vec3b& px = img.at<cv::Vec3b>(y, x);
            for (int ch = 0; ch < 3; ++ch) {
                const double v = std::clamp((image.at(y, x, ch) + 1.0) * 0.5, 0.0, 1.0);
                px[2 - ch] = static_cast<unsigned char>(std::lround(v * 255.0));
            }
        }
    if (!cv::imwrite(path.string(), img))
        fail(ErrorCode::IoFailure, "failed to write " + path.string());
}

}  // namespace attndb
