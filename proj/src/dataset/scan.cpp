#include <algorithm>
#include <cctype>

#include "cytodiff/common/error.hpp"
#include "cytodiff/dataset.hpp"

namespace cytodiff::dataset {

namespace fs = std::filesystem;

namespace {

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

bool has_extension(const fs::path& p, const std::vector<std::string>& extensions) {
    auto ext = lower(p.extension().string());
    if (!ext.empty() && ext.front() == '.') ext.erase(0, 1);
    return std::any_of(extensions.begin(), extensions.end(), [&](const std::string& e) { return lower(e) == ext; });
}

std::vector<fs::path> list_images(const fs::path& dir, const std::vector<std::string>& extensions) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && has_extension(entry.path(), extensions)) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    return files;
}

void require_class_dirs(const fs::path& root, const ClassRegistry& registry) {
    std::error_code ec;
    bool any_dir = false;
    if (fs::is_directory(root, ec)) {
        for (const auto& entry : fs::directory_iterator(root)) {
            if (entry.is_directory()) {
                any_dir = true;
                break;
            }
        }
    }
    if (!any_dir) throw DataError("no class directories found under " + root.string());

    std::string missing;
    for (const auto& label : registry.labels()) {
        if (!fs::is_directory(root / label.name)) missing += (missing.empty() ? "" : ", ") + label.name;
    }
    if (!missing.empty()) throw DataError("missing class directories under " + root.string() + ": " + missing);
}

}  // namespace

ScanResult scan_corpus(const fs::path& root, const ClassRegistry& registry, Origin origin, const ScanOptions& options) {
    require_class_dirs(root, registry);
    ScanResult result{DatasetManifest(registry, options.seed), {}};
    std::string empty_classes;
    for (const auto& label : registry.labels()) {
        std::size_t accepted = 0;
        for (auto& path : list_images(root / label.name, options.extensions)) {
            if (options.verify_decodable && !decode_image(path)) {
                result.skipped.push_back({path, "not a decodable image"});
                continue;
            }
            result.manifest.add({path, label.index, origin, std::nullopt, Split::unassigned});
            ++accepted;
        }
        if (accepted == 0) empty_classes += (empty_classes.empty() ? "" : ", ") + label.name;
    }
    if (!empty_classes.empty()) throw DataError("classes with zero decodable images: " + empty_classes);
    return result;
}

std::vector<std::size_t> count_corpus_files(const fs::path& root, const ClassRegistry& registry,
                                            const std::vector<std::string>& extensions) {
    require_class_dirs(root, registry);
    std::vector<std::size_t> counts;
    for (const auto& label : registry.labels()) counts.push_back(list_images(root / label.name, extensions).size());
    return counts;
}

}  // namespace cytodiff::dataset
