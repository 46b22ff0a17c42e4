#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "cytodiff/common/binary_io.hpp"
#include "cytodiff/common/error.hpp"
#include "cytodiff/dataset.hpp"
#include "fixtures.hpp"

namespace cytodiff::dataset {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;
using testing::write_toy_corpus;

ClassRegistry toy_registry() { return ClassRegistry({"a", "b", "c"}); }

// Manifest with `counts[c]` real records of class c and no files behind them.
DatasetManifest synthetic_manifest(const std::vector<int>& counts, std::uint64_t seed = 0) {
    std::vector<std::string> names;
    for (std::size_t c = 0; c < counts.size(); ++c) names.push_back("class" + std::to_string(c));
    DatasetManifest m(ClassRegistry(names), seed);
    for (std::size_t c = 0; c < counts.size(); ++c) {
        for (int i = 0; i < counts[c]; ++i) {
            m.add({"/virtual/" + names[c] + "/" + std::to_string(i) + ".png", static_cast<int>(c), Origin::real,
                   std::nullopt, Split::unassigned});
        }
    }
    return m;
}

// Brute-force recount of split sizes per class for one assignment.
std::map<std::pair<int, Split>, std::size_t> recount(const DatasetManifest& m, const SplitAssignment& a) {
    std::map<std::pair<int, Split>, std::size_t> out;
    for (std::size_t i = 0; i < m.size(); ++i) out[{m.records()[i].label, a.labels[i]}]++;
    return out;
}

TEST(ClassRegistry, RejectsDegenerateRegistries) {
    EXPECT_THROW(ClassRegistry({"only"}), ConfigError);
    EXPECT_THROW(ClassRegistry({"a", "a"}), ConfigError);
    EXPECT_THROW(ClassRegistry::from_labels({{"a", 0}, {"b", 2}}), ConfigError);
    auto r = ClassRegistry::from_labels({{"b", 1}, {"a", 0}});
    EXPECT_EQ(r.at(0).name, "a");
    EXPECT_EQ(munich_aml_registry().size(), 15u);
}

TEST(ScanCorpus, CountsMatchFilesOnDisk) {
    TempDir dir;
    write_toy_corpus(dir.path(), {{"a", 500}, {"b", 50}, {"c", 10}});
    auto result = scan_corpus(dir.path(), toy_registry(), Origin::real);
    auto counts = result.manifest.class_counts();
    EXPECT_EQ(counts[0], (ClassCount{500, 0}));
    EXPECT_EQ(counts[1], (ClassCount{50, 0}));
    EXPECT_EQ(counts[2], (ClassCount{10, 0}));
    EXPECT_TRUE(result.skipped.empty());
}

TEST(ScanCorpus, MunichSizedCorpus) {
    TempDir dir;
    const auto registry = munich_aml_registry();
    // Counts are arbitrary; only the total matters here.
    const std::vector<int> counts{79, 424, 78, 15, 11, 3937, 15, 26, 1789, 42, 3268, 109, 8484, 18, 70};
    const auto png = encode_png(testing::pattern_image(0, 0, 4));
    int total = 0;
    for (std::size_t c = 0; c < counts.size(); ++c) {
        fs::create_directories(dir / registry.at(static_cast<int>(c)).name);
        for (int i = 0; i < counts[c]; ++i) {
            write_file_bytes(dir / registry.at(static_cast<int>(c)).name / (std::to_string(i) + ".png"), png);
        }
        total += counts[c];
    }
    ASSERT_EQ(total, 18365);
    auto result = scan_corpus(dir.path(), registry, Origin::real);
    EXPECT_EQ(result.manifest.size(), 18365u);
    EXPECT_EQ(result.manifest.registry().size(), 15u);
}

TEST(ScanCorpus, EmptyRootIsAnError) {
    TempDir dir;
    try {
        scan_corpus(dir.path(), toy_registry(), Origin::real);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("no class directories found"), std::string::npos);
    }
}

TEST(ScanCorpus, ListsAllMissingClasses) {
    TempDir dir;
    write_toy_corpus(dir.path(), {{"a", 2}});
    try {
        scan_corpus(dir.path(), toy_registry(), Origin::real);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("b"), std::string::npos);
        EXPECT_NE(msg.find("c"), std::string::npos);
    }
}

TEST(ScanCorpus, ReportsUnreadableFilesAndRejectsEmptyClasses) {
    TempDir dir;
    write_toy_corpus(dir.path(), {{"a", 3}, {"b", 3}, {"c", 1}});
    std::ofstream(dir / "a/broken.png") << "not an image";
    auto result = scan_corpus(dir.path(), toy_registry(), Origin::real);
    ASSERT_EQ(result.skipped.size(), 1u);
    EXPECT_EQ(result.skipped[0].path.filename(), "broken.png");
    EXPECT_EQ(result.manifest.class_counts()[0].n_real, 3u);

    fs::remove(dir / "c/img_00000.png");
    std::ofstream(dir / "c/bad.jpg") << "junk";
    EXPECT_THROW(scan_corpus(dir.path(), toy_registry(), Origin::real), DataError);
}

TEST(Manifest, JsonLinesRoundTrip) {
    auto m = synthetic_manifest({5, 4, 3}, 42);
    m = apply_assignment(m, stratified_kfold(m, 2, {}, 42)[1]);
    m.add({"/x/syn.png", 2, Origin::synthetic, std::nullopt, Split::train});
    const auto text = serialize_manifest(m);
    EXPECT_EQ(parse_manifest(text), m);
    EXPECT_NE(text.find("\"schema_version\":1"), std::string::npos);
    EXPECT_NE(text.find("\"fold\":null"), std::string::npos);
}

TEST(StratifiedKFold, TwentySamplesSplitTwelveFourFour) {
    auto m = synthetic_manifest({20, 20});
    for (const auto& fold : stratified_kfold(m, 5, {0.6, 0.2, 0.2}, 1)) {
        auto counts = recount(m, fold);
        EXPECT_EQ((counts[{0, Split::train}]), 12u);
        EXPECT_EQ((counts[{0, Split::validation}]), 4u);
        EXPECT_EQ((counts[{0, Split::test}]), 4u);
    }
}

TEST(StratifiedKFold, DeterministicForSeed) {
    auto m = synthetic_manifest({30, 12, 7});
    auto a = stratified_kfold(m, 5, {}, 99);
    auto b = stratified_kfold(m, 5, {}, 99);
    for (int f = 0; f < 5; ++f) {
        EXPECT_EQ(serialize_manifest(apply_assignment(m, a[f])), serialize_manifest(apply_assignment(m, b[f])));
    }
    auto c = stratified_kfold(m, 5, {}, 100);
    EXPECT_NE(a[0].labels, c[0].labels);
}

TEST(StratifiedKFold, ToyCorpusProportionsAndDisjointTests) {
    auto m = synthetic_manifest({500, 50, 10});
    const std::vector<std::array<std::size_t, 3>> expected{{300, 100, 100}, {30, 10, 10}, {6, 2, 2}};
    auto folds = stratified_kfold(m, 5, {}, 7);
    ASSERT_EQ(folds.size(), 5u);
    std::vector<int> times_in_test(m.size(), 0);
    for (const auto& fold : folds) {
        auto counts = recount(m, fold);
        for (int c = 0; c < 3; ++c) {
            EXPECT_LE(std::abs(static_cast<long>(counts[{c, Split::train}]) - static_cast<long>(expected[c][0])), 1);
            EXPECT_LE(std::abs(static_cast<long>(counts[{c, Split::validation}]) - static_cast<long>(expected[c][1])), 1);
            EXPECT_LE(std::abs(static_cast<long>(counts[{c, Split::test}]) - static_cast<long>(expected[c][2])), 1);
        }
        for (std::size_t i = 0; i < m.size(); ++i) times_in_test[i] += fold.labels[i] == Split::test;
    }
    // n_class divisible by k: test partitions tile each class exactly.
    EXPECT_TRUE(std::all_of(times_in_test.begin(), times_in_test.end(), [](int t) { return t == 1; }));
}

TEST(StratifiedKFold, RejectsTinyClassesByName) {
    auto m = synthetic_manifest({10, 2});
    try {
        stratified_kfold(m, 5, {}, 1);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("class1"), std::string::npos);
    }
    EXPECT_THROW(stratified_kfold(synthetic_manifest({10, 10}), 1, {}, 1), ConfigError);
    EXPECT_THROW(stratified_kfold(synthetic_manifest({10, 10}), 5, {0.5, 0.2, 0.2}, 1), ConfigError);
}

// Property: ±1 stratification, every split populated, for random class sizes,
// seeds and both fold schemes.
TEST(StratifiedKFold, StratificationProperty) {
    std::mt19937 rng(5);
    for (int trial = 0; trial < 60; ++trial) {
        const int classes = 2 + static_cast<int>(rng() % 4);
        std::vector<int> sizes;
        for (int c = 0; c < classes; ++c) sizes.push_back(5 + static_cast<int>(rng() % 200));
        auto m = synthetic_manifest(sizes);
        const auto scheme = trial % 2 ? FoldScheme::independent : FoldScheme::rotated_disjoint;
        const SplitFractions fr{0.6, 0.2, 0.2};
        for (const auto& fold : stratified_kfold(m, 5, fr, rng(), scheme)) {
            auto counts = recount(m, fold);
            for (int c = 0; c < classes; ++c) {
                const double n = sizes[c];
                EXPECT_LE(std::abs(counts[{c, Split::train}] - fr.train * n), 1.0);
                EXPECT_LE(std::abs(counts[{c, Split::validation}] - fr.validation * n), 1.0);
                EXPECT_LE(std::abs(counts[{c, Split::test}] - fr.test * n), 1.0);
                EXPECT_GE((counts[{c, Split::test}]), 1u);
                EXPECT_GE((counts[{c, Split::validation}]), 1u);
            }
        }
    }
}

TEST(StratifiedKFold, SyntheticRecordsStayInTrain) {
    auto m = synthetic_manifest({10, 10});
    m.add({"/virtual/s.png", 0, Origin::synthetic, std::nullopt, Split::unassigned});
    for (const auto& fold : stratified_kfold(m, 5, {}, 3)) EXPECT_EQ(fold.labels.back(), Split::train);
}

TEST(FewShot, ManualListSelectsExactlyThosePaths) {
    auto m = synthetic_manifest({40, 20});
    std::vector<fs::path> chosen;
    for (int i = 0; i < 16; ++i) chosen.push_back(m.records()[static_cast<std::size_t>(i * 2)].path);
    auto sel = select_few_shot(m, "class0", 16, chosen);
    EXPECT_EQ(sel.mode, SelectionMode::manual_list);
    ASSERT_EQ(sel.records.size(), 16u);
    for (int i = 0; i < 16; ++i) EXPECT_EQ(sel.records[static_cast<std::size_t>(i)].path, chosen[static_cast<std::size_t>(i)]);

    chosen.back() = m.records()[45].path;  // belongs to class1
    EXPECT_THROW(select_few_shot(m, "class0", 16, chosen), DataError);
}

TEST(FewShot, SeededRandomIsDeterministic) {
    auto m = synthetic_manifest({40, 20});
    auto a = select_few_shot(m, "class1", 1, std::uint64_t{11});
    auto b = select_few_shot(m, "class1", 1, std::uint64_t{11});
    ASSERT_EQ(a.records.size(), 1u);
    EXPECT_EQ(a.records[0], b.records[0]);
    EXPECT_EQ(a.records[0].label, 1);
}

TEST(FewShot, InsufficientRealRecords) {
    auto m = synthetic_manifest({40, 5});
    try {
        select_few_shot(m, "class1", 8, std::uint64_t{1});
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("insufficient real records (5 < 8)"), std::string::npos);
    }
    EXPECT_THROW(select_few_shot(m, "class0", 3, std::uint64_t{1}), ConfigError);
}

TEST(FewShot, DrawsOnlyFromRealTrainingRecords) {
    auto m = apply_assignment(synthetic_manifest({40, 40}), stratified_kfold(synthetic_manifest({40, 40}), 5, {}, 2)[0]);
    m.add({"/virtual/syn.png", 0, Origin::synthetic, 0, Split::train});
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        for (const auto& r : select_few_shot(m, "class0", 16, seed).records) {
            EXPECT_EQ(r.origin, Origin::real);
            EXPECT_EQ(r.split, Split::train);
            EXPECT_EQ(r.label, 0);
        }
    }
}

class MergeTest : public ::testing::Test {
protected:
    void SetUp() override {
        write_toy_corpus(dir / "real", {{"a", 20}, {"b", 10}, {"c", 5}});
        write_toy_corpus(dir / "synth", {{"a", 120}, {"b", 120}, {"c", 120}});
        base = scan_corpus(dir / "real", toy_registry(), Origin::real).manifest;
        base = apply_assignment(base, stratified_kfold(base, 5, {}, 1)[2]);
    }
    TempDir dir;
    DatasetManifest base;
};

TEST_F(MergeTest, ZeroCountIsIdentity) { EXPECT_EQ(merge_synthetic(base, dir / "synth", 0), base); }

TEST_F(MergeTest, AddsExactCountToTrainOnly) {
    auto merged = merge_synthetic(base, dir / "synth", 100);
    for (const auto& c : merged.class_counts()) EXPECT_EQ(c.n_synthetic, 100u);
    // Monotonicity: original records unchanged, in place.
    for (std::size_t i = 0; i < base.size(); ++i) EXPECT_EQ(merged.records()[i], base.records()[i]);
    for (std::size_t i = base.size(); i < merged.size(); ++i) {
        EXPECT_EQ(merged.records()[i].origin, Origin::synthetic);
        EXPECT_EQ(merged.records()[i].split, Split::train);
        EXPECT_EQ(merged.records()[i].fold, 2);
    }
}

TEST_F(MergeTest, ShortfallNamesClass) {
    fs::remove(dir / "synth/b/img_00000.png");
    try {
        merge_synthetic(base, dir / "synth", 120);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("b short by 1"), std::string::npos);
    }
}

TEST_F(MergeTest, SyntheticEvalRequiresExplicitFlag) {
    MergeOptions opts;
    opts.allow_synthetic_eval = true;
    auto merged = merge_synthetic(base, dir / "synth", 100, opts);
    std::map<Split, int> per_split;
    for (std::size_t i = base.size(); i < merged.size(); ++i) per_split[merged.records()[i].split]++;
    EXPECT_EQ(per_split[Split::train], 180);
    EXPECT_EQ(per_split[Split::validation], 60);
    EXPECT_EQ(per_split[Split::test], 60);
}

TEST(Merge, FiveThousandPerClassOverFifteenClasses) {
    TempDir dir;
    const auto registry = munich_aml_registry();
    const auto png = encode_png(testing::pattern_image(1, 1, 2));
    for (const auto& label : registry.labels()) {
        fs::create_directories(dir / "synth" / label.name);
        for (int i = 0; i < 5000; ++i) write_file_bytes(dir / "synth" / label.name / (std::to_string(i) + ".png"), png);
    }
    DatasetManifest base(registry, 0);
    auto merged = merge_synthetic(base, dir / "synth", 5000);
    EXPECT_EQ(merged.totals().n_synthetic, 75000u);
    EXPECT_EQ(merged.indices_in(Split::train).size(), 75000u);
}

TEST(Augmentation, ZeroPolicyIsIdentity) {
    auto img = testing::pattern_image(0, 3, 16);
    std::mt19937_64 rng(1);
    EXPECT_EQ(apply_augmentation(img, AugmentationPolicy{}, rng), img);
}

TEST(Augmentation, HorizontalFlipIsAnInvolution) {
    auto img = testing::pattern_image(0, 4, 9);
    AugmentationPolicy p;
    p.horizontal_flip = 1.0;
    std::mt19937_64 rng(1);
    auto once = apply_augmentation(img, p, rng);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            for (int c = 0; c < 3; ++c) ASSERT_EQ(once.at(x, y)[c], img.at(img.width - 1 - x, y)[c]);
        }
    }
    EXPECT_EQ(apply_augmentation(once, p, rng), img);
}

TEST(Augmentation, SameRngStateSameOutput) {
    auto img = testing::pattern_image(2, 1, 24);
    const auto p = AugmentationPolicy::standard();
    std::mt19937_64 rng_a(77), rng_b(77);
    auto a = apply_augmentation(img, p, rng_a);
    auto b = apply_augmentation(img, p, rng_b);
    EXPECT_EQ(a.pixels, b.pixels);
    EXPECT_EQ(a.width, img.width);
    EXPECT_EQ(a.height, img.height);
    EXPECT_NE(a, img);
}

TEST(Augmentation, OnlyTrainSplitIsAugmented) {
    auto img = testing::pattern_image(1, 1, 16);
    const auto p = AugmentationPolicy::standard();
    ImageRecord rec{"/x.png", 0, Origin::real, 0, Split::validation};
    for (Split s : {Split::validation, Split::test, Split::unassigned}) {
        rec.split = s;
        EXPECT_EQ(prepare_sample(img, rec, 3, p, 9, 4), img);
    }
    rec.split = Split::train;
    auto e4 = prepare_sample(img, rec, 3, p, 9, 4);
    EXPECT_EQ(e4, prepare_sample(img, rec, 3, p, 9, 4));
    EXPECT_NE(e4, prepare_sample(img, rec, 3, p, 9, 5));
}

TEST(Augmentation, LoadSampleMatchesDecodedFileOutsideTrain) {
    TempDir dir;
    write_toy_corpus(dir.path(), {{"a", 1}}, 12);
    ImageRecord rec{dir / "a/img_00000.png", 0, Origin::real, 0, Split::test};
    EXPECT_EQ(load_sample(rec, 0, 12, AugmentationPolicy::standard(), 1, 1), *decode_image(rec.path));
}

}  // namespace
}  // namespace cytodiff::dataset
