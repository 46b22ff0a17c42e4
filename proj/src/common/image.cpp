#include "cytodiff/common/image.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cstring>

#include "cytodiff/common/error.hpp"

namespace cytodiff {

namespace {

Image from_bgr(const cv::Mat& bgr) {
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    Image out(rgb.cols, rgb.rows);
    for (int y = 0; y < rgb.rows; ++y) {
        std::memcpy(out.at(0, y), rgb.ptr<std::uint8_t>(y), static_cast<std::size_t>(rgb.cols) * 3);
    }
    return out;
}

cv::Mat to_bgr(const Image& image) {
    cv::Mat rgb(image.height, image.width, CV_8UC3, const_cast<std::uint8_t*>(image.pixels.data()));
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    return bgr;
}

std::optional<Image> normalize_decoded(cv::Mat decoded) {
    if (decoded.empty()) return std::nullopt;
    if (decoded.depth() != CV_8U) {
        cv::Mat converted;
        const double scale = decoded.depth() == CV_16U ? 1.0 / 257.0 : 1.0;
        decoded.convertTo(converted, CV_8U, scale);
        decoded = converted;
    }
    if (decoded.channels() == 1) {
        cv::cvtColor(decoded, decoded, cv::COLOR_GRAY2BGR);
    } else if (decoded.channels() == 4) {
        cv::cvtColor(decoded, decoded, cv::COLOR_BGRA2BGR);
    }
    return from_bgr(decoded);
}

}  // namespace

std::optional<Image> decode_image(const std::filesystem::path& path) {
    try {
        return normalize_decoded(cv::imread(path.string(), cv::IMREAD_ANYCOLOR | cv::IMREAD_ANYDEPTH));
    } catch (const cv::Exception&) {
        return std::nullopt;
    }
}

Image load_image(const std::filesystem::path& path, int resolution) {
    auto decoded = decode_image(path);
    if (!decoded) throw DataError("cannot decode image: " + path.string());
    if (decoded->width == resolution && decoded->height == resolution) return std::move(*decoded);
    return resize_image(*decoded, resolution, resolution);
}

Image resize_image(const Image& image, int width, int height) {
    if (image.width == width && image.height == height) return image;
    cv::Mat src(image.height, image.width, CV_8UC3, const_cast<std::uint8_t*>(image.pixels.data()));
    cv::Mat dst;
    const bool shrinking = width < image.width || height < image.height;
    cv::resize(src, dst, cv::Size(width, height), 0, 0, shrinking ? cv::INTER_AREA : cv::INTER_LINEAR);
    Image out(width, height);
    for (int y = 0; y < height; ++y) {
        std::memcpy(out.at(0, y), dst.ptr<std::uint8_t>(y), static_cast<std::size_t>(width) * 3);
    }
    return out;
}

std::vector<std::uint8_t> encode_png(const Image& image) {
    std::vector<std::uint8_t> out;
    if (!cv::imencode(".png", to_bgr(image), out)) throw DataError("PNG encode failed");
    return out;
}

std::optional<Image> decode_png(const std::vector<std::uint8_t>& bytes) {
    if (bytes.empty()) return std::nullopt;
    try {
        return normalize_decoded(cv::imdecode(bytes, cv::IMREAD_ANYCOLOR | cv::IMREAD_ANYDEPTH));
    } catch (const cv::Exception&) {
        return std::nullopt;
    }
}

void write_png(const std::filesystem::path& path, const Image& image) {
    bool ok = false;
    try {
        ok = cv::imwrite(path.string(), to_bgr(image));
    } catch (const cv::Exception&) {
        ok = false;
    }
    if (!ok) throw DataError("cannot write PNG: " + path.string());
}

std::vector<double> channel_means(const Image& image) {
    std::vector<double> sums(3, 0.0);
    const std::size_t n = static_cast<std::size_t>(image.width) * image.height;
    for (std::size_t i = 0; i < n; ++i) {
        for (int c = 0; c < 3; ++c) sums[c] += image.pixels[i * 3 + c];
    }
    for (auto& s : sums) s /= static_cast<double>(n);
    return sums;
}

}  // namespace cytodiff
