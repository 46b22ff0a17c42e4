#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "cytodiff/common/image.hpp"

namespace cytodiff::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir();
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& child) const { return path_ / child; }

private:
    std::filesystem::path path_;
};

/// Small deterministic image whose pixels depend on (label, index).
Image pattern_image(int label, int index, int size = 8);

/// Writes `<root>/<name>/img_<i>.png` for each (name, count).
void write_toy_corpus(const std::filesystem::path& root,
                      const std::vector<std::pair<std::string, int>>& class_counts, int size = 8);

}  // namespace cytodiff::testing
