#pragma once

// PNG/JPEG reading and PNG writing through OpenCV. Files carry no trusted
// resolution, so the caller supplies ppi.

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <string>
#include <vector>

#include "berrypoll/errors.hpp"
#include "berrypoll/imaging.hpp"

namespace berrypoll {

inline RasterImage read_image(const std::string& path, double ppi) {
    cv::Mat m;
    try {
        m = cv::imread(path, cv::IMREAD_COLOR);
    } catch (const cv::Exception& e) {
        throw InvalidImage("cannot decode '" + path + "': " + e.what());
    }
    if (m.empty()) throw InvalidImage("cannot read image '" + path + "'");
    std::vector<Rgb> px(static_cast<std::size_t>(m.rows) * static_cast<std::size_t>(m.cols));
    for (int y = 0; y < m.rows; ++y) {
        const auto* row = m.ptr<cv::Vec3b>(y);
        for (int x = 0; x < m.cols; ++x)
            px[static_cast<std::size_t>(y) * static_cast<std::size_t>(m.cols) + static_cast<std::size_t>(x)] = {
                row[x][2], row[x][1], row[x][0]};
    }
    return RasterImage(m.cols, m.rows, ppi, std::move(px));
}

inline void write_png(const std::string& path, const RasterImage& img) {
    cv::Mat m(img.height(), img.width(), CV_8UC3);
    for (int y = 0; y < img.height(); ++y) {
        auto* row = m.ptr<cv::Vec3b>(y);
        for (int x = 0; x < img.width(); ++x) {
            const Rgb c = img.at(x, y);
            row[x] = {c.b, c.g, c.r};
        }
    }
    if (!cv::imwrite(path, m)) throw InvalidImage("cannot write image '" + path + "'");
}

}  // namespace berrypoll
