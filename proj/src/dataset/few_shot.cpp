#include <algorithm>

#include "cytodiff/common/error.hpp"
#include "cytodiff/common/seed.hpp"
#include "cytodiff/dataset.hpp"

namespace cytodiff::dataset {

namespace fs = std::filesystem;

namespace {

bool same_file(const fs::path& requested, const fs::path& record_path) {
    if (requested == record_path) return true;
    std::error_code ec;
    return fs::equivalent(requested, record_path, ec);
}

}  // namespace

FewShotSelection select_few_shot(const DatasetManifest& manifest, std::string_view class_name, int shot_count,
                                 const FewShotSource& source, const std::set<int>& allowed_shots) {
    const ClassLabel& cls = manifest.registry().find(class_name);
    if (!allowed_shots.contains(shot_count)) {
        throw ConfigError("shot count " + std::to_string(shot_count) + " is not one of the allowed values");
    }

    const bool any_assigned = std::any_of(manifest.records().begin(), manifest.records().end(),
                                          [](const ImageRecord& r) { return r.split != Split::unassigned; });
    std::vector<const ImageRecord*> candidates;
    for (const auto& r : manifest.records()) {
        if (r.label != cls.index || r.origin != Origin::real) continue;
        if (any_assigned ? r.split == Split::train : true) candidates.push_back(&r);
    }
    if (candidates.size() < static_cast<std::size_t>(shot_count)) {
        throw DataError("insufficient real records (" + std::to_string(candidates.size()) + " < " +
                        std::to_string(shot_count) + ") for class '" + cls.name + "'");
    }

    FewShotSelection sel{cls, shot_count, {}, SelectionMode::seeded_random};
    if (const auto* paths = std::get_if<std::vector<fs::path>>(&source)) {
        sel.mode = SelectionMode::manual_list;
        if (paths->size() != static_cast<std::size_t>(shot_count)) {
            throw ConfigError("manual list has " + std::to_string(paths->size()) + " paths, expected " +
                              std::to_string(shot_count));
        }
        for (const auto& p : *paths) {
            auto it = std::find_if(candidates.begin(), candidates.end(),
                                   [&](const ImageRecord* r) { return same_file(p, r->path); });
            if (it == candidates.end()) {
                throw DataError("few-shot path is not a real training record of class '" + cls.name + "': " + p.string());
            }
            sel.records.push_back(**it);
        }
        return sel;
    }

    const auto seed = std::get<std::uint64_t>(source);
    std::vector<std::size_t> order(candidates.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(derive_seed(seed, {static_cast<std::uint64_t>(cls.index)}));
    std::shuffle(order.begin(), order.end(), rng);
    for (int i = 0; i < shot_count; ++i) sel.records.push_back(*candidates[order[static_cast<std::size_t>(i)]]);
    return sel;
}

}  // namespace cytodiff::dataset
