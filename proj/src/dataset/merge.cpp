#include <algorithm>

#include "cytodiff/common/error.hpp"
#include "cytodiff/dataset.hpp"

namespace cytodiff::dataset {

DatasetManifest merge_synthetic(const DatasetManifest& manifest, const DatasetManifest& synth_corpus,
                                std::size_t per_class_count, const MergeOptions& options) {
    if (per_class_count == 0) return manifest;
    if (!(synth_corpus.registry() == manifest.registry())) {
        throw DataError("synthetic corpus class registry differs from the manifest registry");
    }

    const auto& registry = manifest.registry();
    std::vector<std::vector<const ImageRecord*>> by_class(registry.size());
    for (const auto& r : synth_corpus.records()) by_class[static_cast<std::size_t>(r.label)].push_back(&r);

    std::string shortfalls;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        if (by_class[c].size() < per_class_count) {
            shortfalls += (shortfalls.empty() ? "" : "; ") + registry.at(static_cast<int>(c)).name + " short by " +
                          std::to_string(per_class_count - by_class[c].size());
        }
    }
    if (!shortfalls.empty()) throw DataError("not enough synthetic images: " + shortfalls);

    std::optional<int> fold;
    for (const auto& r : manifest.records()) {
        if (r.fold) {
            fold = r.fold;
            break;
        }
    }

    DatasetManifest out = manifest;
    const SplitSizes eval_sizes = options.allow_synthetic_eval ? split_sizes(per_class_count, options.fractions)
                                                               : SplitSizes{per_class_count, 0, 0};
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        auto files = by_class[c];
        std::sort(files.begin(), files.end(), [](const auto* a, const auto* b) { return a->path < b->path; });
        for (std::size_t i = 0; i < per_class_count; ++i) {
            Split split = Split::train;
            if (i >= eval_sizes.train) split = i < eval_sizes.train + eval_sizes.validation ? Split::validation : Split::test;
            out.add({files[i]->path, static_cast<int>(c), Origin::synthetic, fold, split});
        }
    }
    return out;
}

DatasetManifest merge_synthetic(const DatasetManifest& manifest, const std::filesystem::path& synth_root,
                                std::size_t per_class_count, const MergeOptions& options) {
    if (per_class_count == 0) return manifest;
    auto scanned = scan_corpus(synth_root, manifest.registry(), Origin::synthetic, options.scan);
    return merge_synthetic(manifest, scanned.manifest, per_class_count, options);
}

}  // namespace cytodiff::dataset
