#include "fixtures.hpp"

#include <atomic>
#include <cstdio>
#include <random>

#include <unistd.h>

namespace cytodiff::testing {

namespace fs = std::filesystem;

TempDir::TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("cytodiff_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
}

TempDir::~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
}

Image pattern_image(int label, int index, int size) {
    Image img(size, size);
    std::mt19937 rng(static_cast<unsigned>(label * 100003 + index));
    std::uniform_int_distribution<int> d(0, 255);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(d(rng));
    return img;
}

void write_toy_corpus(const fs::path& root, const std::vector<std::pair<std::string, int>>& class_counts, int size) {
    for (std::size_t c = 0; c < class_counts.size(); ++c) {
        const auto& [name, count] = class_counts[c];
        fs::create_directories(root / name);
        for (int i = 0; i < count; ++i) {
            char file[32];
            std::snprintf(file, sizeof file, "img_%05d.png", i);
            write_png(root / name / file, pattern_image(static_cast<int>(c), i, size));
        }
    }
}

}  // namespace cytodiff::testing
