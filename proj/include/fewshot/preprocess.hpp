#ifndef FEWSHOT_PREPROCESS_HPP
#define FEWSHOT_PREPROCESS_HPP

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

/**
 * @file preprocess.hpp
 *
 * @brief Fundus photograph normalization: square field-of-view crop, resize to
 * 299 x 299 and luminance background subtraction in YCrCb.
 *
 * Requires OpenCV (core, imgproc, imgcodecs).
 */

namespace fewshot {

struct RgbImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels; // row-major, interleaved R, G, B

    RgbImage() = default;
    RgbImage(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, 0) {
        if (w < 1 || h < 1) {
            throw std::invalid_argument("image dimensions must be positive");
        }
    }

    std::uint8_t* at(int x, int y) { return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
    const std::uint8_t* at(int x, int y) const { return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
};

struct PreprocessOptions {
    int output_size = 299;
    double roi_threshold = 10.0; // on the 0..255 luminance scale
    double sigma = 5.0;
};

struct PreprocessResult {
    RgbImage image;
    cv::Rect roi;
    std::vector<std::string> warnings;
};

namespace detail {

inline cv::Mat to_mat(const RgbImage& img) {
    cv::Mat view(img.height, img.width, CV_8UC3, const_cast<std::uint8_t*>(img.pixels.data()));
    return view.clone();
}

inline RgbImage from_mat(const cv::Mat& rgb) {
    RgbImage out(rgb.cols, rgb.rows);
    for (int y = 0; y < rgb.rows; ++y) {
        std::copy_n(rgb.ptr<std::uint8_t>(y), static_cast<std::size_t>(rgb.cols) * 3, out.at(0, y));
    }
    return out;
}

} // namespace detail

/**
 * Bounding box of pixels whose BT.601 luminance exceeds `threshold`, grown to
 * a square around its center and clipped to the image. Returns an empty
 * rectangle when no pixel passes.
 */
inline cv::Rect field_of_view(const cv::Mat& rgb, double threshold) {
    cv::Mat gray;
    cv::cvtColor(rgb, gray, cv::COLOR_RGB2GRAY);
    cv::Mat mask = gray > threshold;
    if (cv::countNonZero(mask) == 0) {
        return {};
    }
    const cv::Rect box = cv::boundingRect(mask);
    const int side = std::max(box.width, box.height);
    const int cx2 = 2 * box.x + box.width; // twice the center, kept integral
    const int cy2 = 2 * box.y + box.height;
    cv::Rect square((cx2 - side) / 2, (cy2 - side) / 2, side, side);
    return square & cv::Rect(0, 0, rgb.cols, rgb.rows);
}

inline PreprocessResult preprocess_fundus(const RgbImage& input, const PreprocessOptions& options = {}) {
    if (input.width < 1 || input.height < 1 ||
        input.pixels.size() != static_cast<std::size_t>(input.width) * input.height * 3) {
        throw std::invalid_argument("malformed RGB image");
    }
    PreprocessResult out;
    const cv::Mat rgb = detail::to_mat(input);

    out.roi = field_of_view(rgb, options.roi_threshold);
    if (out.roi.area() == 0) {
        const int side = std::min(rgb.cols, rgb.rows);
        out.roi = cv::Rect((rgb.cols - side) / 2, (rgb.rows - side) / 2, side, side);
        out.warnings.push_back("no pixel above the field-of-view threshold; using the centered square");
    }

    cv::Mat resized;
    cv::resize(rgb(out.roi), resized, cv::Size(options.output_size, options.output_size), 0, 0, cv::INTER_LINEAR);

    cv::Mat ycrcb;
    cv::cvtColor(resized, ycrcb, cv::COLOR_RGB2YCrCb);
    std::vector<cv::Mat> planes;
    cv::split(ycrcb, planes);

    cv::Mat luma, background;
    planes[0].convertTo(luma, CV_32F);
    const int radius = static_cast<int>(std::ceil(4.0 * options.sigma));
    cv::GaussianBlur(luma, background, cv::Size(2 * radius + 1, 2 * radius + 1), options.sigma, options.sigma,
                     cv::BORDER_REFLECT_101);
    cv::Mat corrected = luma - background + 128.0f;
    corrected.convertTo(planes[0], CV_8U); // rounds and saturates to [0, 255]

    cv::merge(planes, ycrcb);
    cv::Mat result;
    cv::cvtColor(ycrcb, result, cv::COLOR_YCrCb2RGB);
    out.image = detail::from_mat(result);
    return out;
}

inline RgbImage read_png(const std::string& path) {
    const cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
    if (bgr.empty()) {
        throw std::runtime_error("cannot read image '" + path + "'");
    }
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    return detail::from_mat(rgb);
}

inline void write_png(const std::string& path, const RgbImage& image) {
    cv::Mat bgr;
    cv::cvtColor(detail::to_mat(image), bgr, cv::COLOR_RGB2BGR);
    std::vector<std::uint8_t> bytes;
    if (!cv::imencode(".png", bgr, bytes)) {
        throw std::runtime_error("cannot encode image for '" + path + "'");
    }
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw std::runtime_error("cannot write image '" + path + "'");
    }
}

} // namespace fewshot

#endif
