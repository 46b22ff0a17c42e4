#include <algorithm>
#include <cmath>
#include <numeric>

#include "cytodiff/common/error.hpp"
#include "cytodiff/common/hash.hpp"
#include "cytodiff/common/seed.hpp"
#include "cytodiff/dataset.hpp"

namespace cytodiff::dataset {

namespace {

std::size_t rounded_share(double fraction, std::size_t n) {
    if (fraction <= 0.0) return 0;
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))));
}

void validate_fractions(const SplitFractions& f) {
    if (f.train < 0 || f.validation < 0 || f.test < 0) throw ConfigError("split fractions must be nonnegative");
    if (std::abs(f.train + f.validation + f.test - 1.0) > 1e-9) {
        throw ConfigError("split fractions must sum to 1.0");
    }
}

}  // namespace

SplitSizes split_sizes(std::size_t n, const SplitFractions& fractions) {
    SplitSizes s;
    s.test = rounded_share(fractions.test, n);
    s.validation = rounded_share(fractions.validation, n);
    if (s.test + s.validation >= n) throw DataError("class too small for the requested split fractions");
    s.train = n - s.test - s.validation;
    return s;
}

std::vector<SplitAssignment> stratified_kfold(const DatasetManifest& manifest, int k, const SplitFractions& fractions,
                                              std::uint64_t seed, FoldScheme scheme, bool include_synthetic) {
    if (k < 2) throw ConfigError("k must be at least 2");
    validate_fractions(fractions);

    const auto& registry = manifest.registry();
    std::vector<std::vector<std::size_t>> members(registry.size());
    for (std::size_t i = 0; i < manifest.size(); ++i) {
        const auto& r = manifest.records()[i];
        if (r.origin == Origin::real || include_synthetic) members[static_cast<std::size_t>(r.label)].push_back(i);
    }
    for (std::size_t c = 0; c < members.size(); ++c) {
        if (members[c].size() < 3) {
            throw DataError("class '" + registry.at(static_cast<int>(c)).name + "' has " +
                            std::to_string(members[c].size()) + " samples; at least 3 are needed for stratified splits");
        }
    }

    std::vector<SplitAssignment> folds(static_cast<std::size_t>(k));
    for (int f = 0; f < k; ++f) {
        folds[f].fold_id = f;
        folds[f].fractions = fractions;
        folds[f].labels.assign(manifest.size(), Split::train);
    }

    for (std::size_t c = 0; c < members.size(); ++c) {
        const std::size_t n = members[c].size();
        const SplitSizes sizes = split_sizes(n, fractions);
        std::vector<std::size_t> order = members[c];
        std::mt19937_64 rng(derive_seed(seed, {c}));
        if (scheme == FoldScheme::rotated_disjoint) std::shuffle(order.begin(), order.end(), rng);

        for (int f = 0; f < k; ++f) {
            std::size_t offset = 0;
            if (scheme == FoldScheme::rotated_disjoint) {
                offset = static_cast<std::size_t>(f) * n / static_cast<std::size_t>(k);
            } else {
                order = members[c];
                std::mt19937_64 fold_rng(derive_seed(seed, {c, static_cast<std::uint64_t>(f) + 1}));
                std::shuffle(order.begin(), order.end(), fold_rng);
            }
            auto& labels = folds[f].labels;
            for (std::size_t j = 0; j < sizes.test; ++j) labels[order[(offset + j) % n]] = Split::test;
            for (std::size_t j = 0; j < sizes.validation; ++j) {
                labels[order[(offset + sizes.test + j) % n]] = Split::validation;
            }
        }
    }
    return folds;
}

DatasetManifest apply_assignment(const DatasetManifest& manifest, const SplitAssignment& assignment) {
    if (assignment.labels.size() != manifest.size()) {
        throw DataError("split assignment covers " + std::to_string(assignment.labels.size()) + " records, manifest has " +
                        std::to_string(manifest.size()));
    }
    DatasetManifest out = manifest;
    for (std::size_t i = 0; i < out.size(); ++i) out.assign(i, assignment.fold_id, assignment.labels[i]);
    return out;
}

std::string assignment_hash(const SplitAssignment& assignment) {
    std::string buf = std::to_string(assignment.fold_id) + ":";
    for (auto s : assignment.labels) buf.push_back(static_cast<char>('0' + static_cast<int>(s)));
    return sha256_hex(buf);
}

}  // namespace cytodiff::dataset
