#include <algorithm>
#include <cmath>

#include <opencv2/imgproc.hpp>

#include "cytodiff/common/seed.hpp"
#include "cytodiff/dataset.hpp"

namespace cytodiff::dataset {

namespace {

std::uint8_t clamp_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

Image rotate(const Image& image, double degrees) {
    cv::Mat src(image.height, image.width, CV_8UC3, const_cast<std::uint8_t*>(image.pixels.data()));
    const cv::Point2f center((image.width - 1) * 0.5f, (image.height - 1) * 0.5f);
    const cv::Mat m = cv::getRotationMatrix2D(center, degrees, 1.0);
    Image out(image.width, image.height);
    cv::Mat dst(out.height, out.width, CV_8UC3, out.pixels.data());
    cv::warpAffine(src, dst, m, src.size(), cv::INTER_LINEAR, cv::BORDER_REFLECT_101);
    return out;
}

void flip_horizontal(Image& image) {
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width / 2; ++x) {
            std::swap_ranges(image.at(x, y), image.at(x, y) + 3, image.at(image.width - 1 - x, y));
        }
    }
}

void flip_vertical(Image& image) {
    const std::size_t row = static_cast<std::size_t>(image.width) * 3;
    for (int y = 0; y < image.height / 2; ++y) {
        std::swap_ranges(image.at(0, y), image.at(0, y) + row, image.at(0, image.height - 1 - y));
    }
}

double gray(const std::uint8_t* p) { return 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]; }

void jitter(Image& image, const ColorJitter& cj, std::mt19937_64& rng) {
    auto factor = [&](double amount) {
        std::uniform_real_distribution<double> d(std::max(0.0, 1.0 - amount), 1.0 + amount);
        return d(rng);
    };
    const std::size_t n = static_cast<std::size_t>(image.width) * image.height;
    auto* px = image.pixels.data();

    if (cj.brightness > 0) {
        const double b = factor(cj.brightness);
        for (std::size_t i = 0; i < n * 3; ++i) px[i] = clamp_byte(px[i] * b);
    }
    if (cj.contrast > 0) {
        const double c = factor(cj.contrast);
        double mean = 0;
        for (std::size_t i = 0; i < n; ++i) mean += gray(px + i * 3);
        mean /= static_cast<double>(n);
        for (std::size_t i = 0; i < n * 3; ++i) px[i] = clamp_byte((px[i] - mean) * c + mean);
    }
    if (cj.saturation > 0) {
        const double s = factor(cj.saturation);
        for (std::size_t i = 0; i < n; ++i) {
            const double g = gray(px + i * 3);
            for (int ch = 0; ch < 3; ++ch) px[i * 3 + ch] = clamp_byte((px[i * 3 + ch] - g) * s + g);
        }
    }
    if (cj.hue > 0) {
        std::uniform_real_distribution<double> d(-cj.hue, cj.hue);
        const double shift_degrees = d(rng) * 360.0;
        cv::Mat rgb(image.height, image.width, CV_8UC3, px);
        cv::Mat f, hsv;
        rgb.convertTo(f, CV_32FC3, 1.0 / 255.0);
        cv::cvtColor(f, hsv, cv::COLOR_RGB2HSV);
        for (int y = 0; y < hsv.rows; ++y) {
            auto* row = hsv.ptr<cv::Vec3f>(y);
            for (int x = 0; x < hsv.cols; ++x) {
                float h = row[x][0] + static_cast<float>(shift_degrees);
                h = std::fmod(h, 360.0f);
                if (h < 0) h += 360.0f;
                row[x][0] = h;
            }
        }
        cv::cvtColor(hsv, f, cv::COLOR_HSV2RGB);
        f.convertTo(rgb, CV_8UC3, 255.0);
    }
}

}  // namespace

AugmentationPolicy AugmentationPolicy::standard() {
    AugmentationPolicy p;
    p.rotation_degrees = 180.0;
    p.horizontal_flip = 0.5;
    p.vertical_flip = 0.5;
    p.color_jitter = {0.1, 0.1, 0.1, 0.02};
    return p;
}

bool AugmentationPolicy::is_identity() const {
    return rotation_degrees == 0 && horizontal_flip == 0 && vertical_flip == 0 && color_jitter == ColorJitter{};
}

Image apply_augmentation(const Image& image, const AugmentationPolicy& policy, std::mt19937_64& rng) {
    Image out = image;
    if (policy.rotation_degrees > 0) {
        std::uniform_real_distribution<double> angle(-policy.rotation_degrees, policy.rotation_degrees);
        out = rotate(out, angle(rng));
    }
    if (policy.horizontal_flip > 0 && std::bernoulli_distribution(std::min(1.0, policy.horizontal_flip))(rng)) {
        flip_horizontal(out);
    }
    if (policy.vertical_flip > 0 && std::bernoulli_distribution(std::min(1.0, policy.vertical_flip))(rng)) {
        flip_vertical(out);
    }
    jitter(out, policy.color_jitter, rng);
    return out;
}

Image prepare_sample(const Image& decoded, const ImageRecord& record, std::size_t record_index,
                     const AugmentationPolicy& policy, std::uint64_t global_seed, std::uint64_t epoch) {
    if (!AugmentationPolicy::applies_to(record.split) || policy.is_identity()) return decoded;
    std::mt19937_64 rng(derive_seed(global_seed, {record_index, epoch}));
    return apply_augmentation(decoded, policy, rng);
}

Image load_sample(const ImageRecord& record, std::size_t record_index, int resolution,
                  const AugmentationPolicy& policy, std::uint64_t global_seed, std::uint64_t epoch) {
    return prepare_sample(load_image(record.path, resolution), record, record_index, policy, global_seed, epoch);
}

}  // namespace cytodiff::dataset
