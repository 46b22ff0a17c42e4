#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace cytodiff {

/// Interleaved 8-bit RGB image, row-major.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;  // width * height * 3

    Image() = default;
    Image(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, 0) {}

    bool empty() const { return width <= 0 || height <= 0; }
    std::size_t index(int x, int y) const { return (static_cast<std::size_t>(y) * width + x) * 3; }
    std::uint8_t* at(int x, int y) { return pixels.data() + index(x, y); }
    const std::uint8_t* at(int x, int y) const { return pixels.data() + index(x, y); }

    bool operator==(const Image&) const = default;
};

/// Decodes any format the image codec supports into 8-bit RGB. Returns
/// nullopt for unreadable or undecodable files.
std::optional<Image> decode_image(const std::filesystem::path& path);

/// Decodes then resizes to a square resolution (area interpolation when
/// shrinking, bilinear otherwise). Throws DataError when undecodable.
Image load_image(const std::filesystem::path& path, int resolution);

Image resize_image(const Image& image, int width, int height);

std::vector<std::uint8_t> encode_png(const Image& image);
std::optional<Image> decode_png(const std::vector<std::uint8_t>& bytes);

/// Writes PNG; throws DataError on failure.
void write_png(const std::filesystem::path& path, const Image& image);

/// Per-channel means in [0, 255].
std::vector<double> channel_means(const Image& image);

}  // namespace cytodiff
