#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "cytodiff/common/error.hpp"
#include "cytodiff/experiments.hpp"
#include "cytodiff/generation.hpp"
#include "fixtures.hpp"

namespace cytodiff::experiments {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

class Toy : public ::testing::Test {
protected:
    void SetUp() override {
        generation::write_stub_corpus(dir_ / "real", {{"segmented_neutrophil", 40}, {"monocyte", 20}, {"basophil", 10}},
                                      4, 16);
    }

    ExperimentConfig config(Regime regime, const std::string& out) const {
        ExperimentConfig c;
        c.regime = regime;
        c.classes = {"segmented_neutrophil", "monocyte", "basophil"};
        c.real_root = dir_ / "real";
        c.folds = 3;
        c.seed = 21;
        c.backend = BackendChoice::stub;
        c.generation.resolution = 16;
        c.classifier.resolution = 16;
        c.classifier.width = 4;
        c.train.lr_init = 5e-3;
        c.train.warmup_epochs = 1;
        c.train.total_epochs = 3;
        c.train.batch_train = 16;
        c.output_dir = dir_ / out;
        return c;
    }

    testing::TempDir dir_;
};

TEST_F(Toy, RealOnlyProducesValidationAndTestRows) {
    const auto r = run_regime(config(Regime::real_only, "real_only"));
    ASSERT_EQ(r.table.rows.size(), 2u);
    EXPECT_EQ(r.table.rows[0].split, "validation");
    EXPECT_EQ(r.table.rows[1].split, "test");
    EXPECT_EQ(r.table.rows[1].dataset, "real");
    EXPECT_EQ(r.test_folds.size(), 3u);
    EXPECT_EQ(r.test.folds, 3);
    const double spread = r.test.accuracy_stat.std + r.test.macro_f1_stat.std + r.test.mean_auc_stat.std;
    EXPECT_GT(spread, 0.0);
    EXPECT_TRUE(fs::exists(dir_ / "real_only" / "metrics.csv"));
    EXPECT_TRUE(fs::exists(dir_ / "real_only" / "run_manifest.json"));
    const auto m = manifest_from_json(slurp(dir_ / "real_only" / "run_manifest.json"));
    EXPECT_EQ(m.fold_seeds.size(), 3u);
    EXPECT_EQ(m.split_hashes.size(), 3u);
    EXPECT_FALSE(m.incomplete);
    for (const auto& out : m.outputs) EXPECT_TRUE(fs::exists(dir_ / "real_only" / out)) << out;
}

TEST_F(Toy, MixedWithZeroSyntheticMatchesRealOnly) {
    const auto real = run_regime(config(Regime::real_only, "a"));
    auto c = config(Regime::mixed, "b");
    c.synthetic_per_class = 0;
    const auto mixed = run_regime(c);
    ASSERT_EQ(real.test_folds.size(), mixed.test_folds.size());
    for (std::size_t f = 0; f < real.test_folds.size(); ++f) {
        EXPECT_EQ(real.test_folds[f].accuracy, mixed.test_folds[f].accuracy);
        EXPECT_EQ(real.test_folds[f].macro_f1, mixed.test_folds[f].macro_f1);
        EXPECT_EQ(real.test_folds[f].mean_auc, mixed.test_folds[f].mean_auc);
    }
}

TEST_F(Toy, SyntheticOnlyTrainSplitHasNoRealRecords) {
    auto c = config(Regime::synthetic_only, "s");
    c.synthetic_per_class = 12;
    const auto r = run_regime(c);
    EXPECT_EQ(r.table.rows[1].dataset, "synthetic(12/class)");

    const dataset::ClassRegistry reg(c.classes);
    const auto real = dataset::scan_corpus(c.real_root, reg, dataset::Origin::real).manifest;
    const auto synth = dataset::scan_corpus(c.output_dir / "synthetic", reg, dataset::Origin::synthetic).manifest;
    const auto split = dataset::stratified_kfold(real, 3, {}, c.seed)[1];
    const auto m = regime_manifest(c, real, &synth, split, 12);
    std::size_t train = 0;
    for (const auto& rec : m.records()) {
        if (rec.split != dataset::Split::train) continue;
        ++train;
        EXPECT_EQ(rec.origin, dataset::Origin::synthetic);
    }
    EXPECT_EQ(train, 36u);
    for (const auto i : m.indices_in(dataset::Split::test)) EXPECT_EQ(m.records()[i].origin, dataset::Origin::real);
}

TEST_F(Toy, MixedTestStaysRealUnlessRequested) {
    auto c = config(Regime::mixed, "m");
    const dataset::ClassRegistry reg(c.classes);
    const auto real = dataset::scan_corpus(c.real_root, reg, dataset::Origin::real).manifest;
    generation::write_stub_corpus(dir_ / "synth", {{"segmented_neutrophil", 10}, {"monocyte", 10}, {"basophil", 10}},
                                  99, 16);
    const auto synth = dataset::scan_corpus(dir_ / "synth", reg, dataset::Origin::synthetic).manifest;
    const auto split = dataset::stratified_kfold(real, 3, {}, c.seed)[0];
    auto m = regime_manifest(c, real, &synth, split, 10);
    for (const auto i : m.indices_in(dataset::Split::test)) EXPECT_EQ(m.records()[i].origin, dataset::Origin::real);
    c.synthetic_eval = true;
    m = regime_manifest(c, real, &synth, split, 10);
    std::size_t synthetic_test = 0;
    for (const auto i : m.indices_in(dataset::Split::test)) {
        synthetic_test += m.records()[i].origin == dataset::Origin::synthetic;
    }
    EXPECT_GT(synthetic_test, 0u);
}

TEST_F(Toy, SweepReusesFoldsAndZeroPointIsBaseline) {
    auto c = config(Regime::mixed, "sweep");
    c.schedule = {0, 6, 12};
    std::vector<std::pair<std::size_t, int>> started;
    RunHooks hooks;
    hooks.on_fold_start = [&](std::size_t n, int f) { started.emplace_back(n, f); };
    const auto sweep = run_scaling_sweep(c, hooks);
    ASSERT_EQ(sweep.points.size(), 3u);
    EXPECT_EQ(started.size(), 9u);
    EXPECT_EQ(sweep.table.rows.size(), 6u);
    EXPECT_EQ(sweep.manifest.split_hashes.size(), 3u);

    const auto base = run_regime(config(Regime::real_only, "base"));
    EXPECT_EQ(sweep.points[0].test.accuracy_stat.mean, base.test.accuracy_stat.mean);
    EXPECT_EQ(sweep.points[0].test.macro_f1_stat.mean, base.test.macro_f1_stat.mean);
    EXPECT_EQ(sweep.manifest.split_hashes, base.manifest.split_hashes);

    const auto svg = slurp(sweep.plot);
    EXPECT_NE(svg.find("<svg"), std::string::npos);
    std::size_t bars = 0;
    for (auto pos = svg.find("class=\"errorbar\""); pos != std::string::npos; pos = svg.find("class=\"errorbar\"", pos + 1)) {
        ++bars;
    }
    EXPECT_EQ(bars, 6u);
    const auto csv = slurp(c.output_dir / "sweep.csv");
    EXPECT_NE(csv.find("f1_basophil"), std::string::npos);
}

TEST_F(Toy, SweepChecksAvailabilityBeforeTraining) {
    generation::write_stub_corpus(dir_ / "few", {{"segmented_neutrophil", 5}, {"monocyte", 5}, {"basophil", 3}}, 99,
                                  16);
    auto c = config(Regime::mixed, "short");
    c.backend = BackendChoice::none;
    c.synthetic_root = dir_ / "few";
    c.schedule = {2, 4};
    bool started = false;
    RunHooks hooks;
    hooks.on_fold_start = [&](std::size_t, int) { started = true; };
    try {
        run_scaling_sweep(c, hooks);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("basophil"), std::string::npos);
    }
    EXPECT_FALSE(started);
}

TEST_F(Toy, FoldFailureKeepsFinishedFoldsAndMarksIncomplete) {
    RunHooks hooks;
    hooks.on_fold_start = [](std::size_t, int f) {
        if (f == 2) throw DataError("simulated failure");
    };
    auto c = config(Regime::real_only, "broken");
    EXPECT_THROW(run_regime(c, hooks), IncompleteRunError);
    const auto m = manifest_from_json(slurp(c.output_dir / "run_manifest.json"));
    EXPECT_TRUE(m.incomplete);
    ASSERT_EQ(m.failures.size(), 1u);
    EXPECT_NE(m.failures[0].find("simulated"), std::string::npos);
    EXPECT_TRUE(fs::exists(c.output_dir / "folds" / "fold0_test.json"));
    EXPECT_TRUE(fs::exists(c.output_dir / "folds" / "fold1_test.json"));
    EXPECT_FALSE(fs::exists(c.output_dir / "metrics.csv"));
}

TEST_F(Toy, RerunReproducesMetricsBitForBit) {
    auto c = config(Regime::mixed, "first");
    c.synthetic_per_class = 8;
    run_regime(c);
    rerun(c.output_dir / "run_manifest.json", dir_ / "second");
    EXPECT_EQ(slurp(dir_ / "first" / "metrics.csv"), slurp(dir_ / "second" / "metrics.csv"));
    EXPECT_EQ(slurp(dir_ / "first" / "aggregate_test.json"), slurp(dir_ / "second" / "aggregate_test.json"));
}

TEST_F(Toy, RerunRejectsChangedDataset) {
    auto c = config(Regime::real_only, "first");
    c.folds = 2;
    run_regime(c);
    generation::write_stub_corpus(dir_ / "extra", {{"basophil", 1}}, 77, 16);
    fs::copy_file(dir_ / "extra" / "basophil" / "img_00000.png", dir_ / "real" / "basophil" / "zz_extra.png");
    EXPECT_THROW(rerun(c.output_dir / "run_manifest.json", dir_ / "second"), DataError);
}

TEST(ExperimentConfig, Invariants) {
    ExperimentConfig c;
    c.classes = {"a", "b"};
    c.real_root = "/tmp";
    c.output_dir = "/tmp/out";
    EXPECT_NO_THROW(c.validate());
    c.regime = Regime::mixed;
    EXPECT_THROW(c.validate(), ConfigError);  // no synthetic source
    c.backend = BackendChoice::stub;
    EXPECT_NO_THROW(c.validate());
    c.schedule = {100, 100};
    EXPECT_THROW(c.validate(true), ConfigError);
    c.schedule = {};
    EXPECT_THROW(c.validate(true), ConfigError);
    c.schedule = {0, 100, 300};
    EXPECT_NO_THROW(c.validate(true));
    c.regime = Regime::synthetic_only;
    EXPECT_THROW(c.validate(true), ConfigError);
    EXPECT_THROW(c.validate(false), ConfigError);
    c.classes = {"a"};
    c.regime = Regime::real_only;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ExperimentConfig, JsonRoundTrip) {
    ExperimentConfig c;
    c.regime = Regime::mixed;
    c.classes = {"x", "y", "z"};
    c.real_root = "/data/real";
    c.synthetic_root = "/data/synth";
    c.schedule = {0, 100, 200};
    c.seed = 12345678901234ULL;
    c.backend = BackendChoice::service;
    c.fold_scheme = dataset::FoldScheme::independent;
    c.train.lambda1 = 0.3;
    c.classifier.family = training::Family::contrastive_prompt;
    const auto text = config_to_json(c);
    EXPECT_EQ(config_to_json(config_from_json(text)), text);
    EXPECT_THROW(config_from_json("{\"regime\": \"both\"}"), ConfigError);
    EXPECT_THROW(config_from_json("[1,2"), ConfigError);
}

TEST(Report, CsvRoundTripAndHeaders) {
    ReportTable t;
    t.rows.push_back({"cnn_head/tinyconv", "test", "real", {0.1 + 0.2, 1.0 / 3}, {2.0 / 3, 0.0}, {0.999, 1e-17}});
    t.rows.push_back({"contrastive", "validation", "real+synthetic(5000/class)", {0.5, 0.25}, {0.75, 0.125}, {1, 0}});
    const auto csv = table_csv(t);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "Model,Split,Dataset,Accuracy,F1_macro,AUC,Accuracy_std,F1_macro_std,AUC_std");
    EXPECT_EQ(parse_table_csv(csv), t);

    testing::TempDir dir;
    const auto paths = emit_report(t, {Format::csv, Format::text}, dir / "report");
    ASSERT_EQ(paths.size(), 2u);
    EXPECT_EQ(parse_table_csv(slurp(paths[0])), t);
    EXPECT_NE(slurp(paths[1]).find("+/-"), std::string::npos);

    EXPECT_THROW(emit_report(ReportTable{}, {Format::csv}, dir.path()), DataError);
    std::ofstream(dir / "file") << "x";
    EXPECT_THROW(emit_report(t, {Format::csv}, dir / "file" / "sub"), DataError);
}

}  // namespace
}  // namespace cytodiff::experiments
