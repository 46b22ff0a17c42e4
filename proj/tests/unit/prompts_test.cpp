#include <gtest/gtest.h>

#include "cytodiff/common/binary_io.hpp"
#include "cytodiff/common/error.hpp"
#include "cytodiff/prompts.hpp"
#include "fixtures.hpp"

namespace cytodiff::prompts {
namespace {

TEST(RenderPrompt, BasophilDefault) {
    const auto text = render_prompt(default_library().at("basophil"));
    EXPECT_EQ(text.rfind("Photorealistic basophil under microscope, peripheral blood smear, large bilobed nucleus", 0), 0u);
    EXPECT_EQ(text,
              "Photorealistic basophil under microscope, peripheral blood smear, large bilobed nucleus, dark "
              "blue-purple granules densely packed in cytoplasm, surrounded by red blood cells, medical cytology, high "
              "detail, clinical pathology, Wright-Giemsa stain, white background, soft lighting, 40x magnification, "
              "ultra-detailed, sharp focus, macro lens");
}

TEST(RenderPrompt, SingletonAndIdempotence) {
    PromptTemplate t{"monocyte", {"monocyte"}};
    EXPECT_EQ(render_prompt(t), "monocyte");
    PromptTemplate two{"x", {"a", "b"}};
    EXPECT_EQ(render_prompt(two), render_prompt(two));
    EXPECT_THROW(render_prompt(PromptTemplate{"x", {}}), ConfigError);
}

TEST(ValidateLibrary, DefaultCoversMunichClasses) {
    const auto report = validate_library(default_library(), dataset::munich_aml_registry());
    EXPECT_TRUE(report.valid());
}

TEST(ValidateLibrary, MissingClassIsNamed) {
    auto lib = default_library();
    PromptLibrary trimmed(lib.version());
    for (const auto& t : lib.templates()) {
        if (t.class_name != "monoblast") trimmed.set(t);
    }
    const auto report = validate_library(trimmed, dataset::munich_aml_registry());
    EXPECT_FALSE(report.valid());
    ASSERT_EQ(report.missing.size(), 1u);
    EXPECT_EQ(report.missing[0], "monoblast");
}

TEST(ValidateLibrary, DuplicateAndEmptyPromptsReported) {
    PromptLibrary lib("v");
    lib.set({"a", {"same", "words"}});
    lib.set({"b", {"same", "words"}});
    lib.set({"c", {}});
    const auto report = validate_library(lib, dataset::ClassRegistry({"a", "b", "c"}));
    EXPECT_FALSE(report.valid());
    ASSERT_EQ(report.duplicates.size(), 1u);
    EXPECT_EQ(report.duplicates[0], (std::pair<std::string, std::string>{"a", "b"}));
    ASSERT_EQ(report.empty.size(), 1u);
    EXPECT_EQ(report.empty[0], "c");
}

TEST(PromptFile, RoundTripsByteIdentically) {
    testing::TempDir dir;
    const auto lib = default_library();
    save_library(dir / "p.json", lib);
    const auto first = read_file_bytes(dir / "p.json");
    const auto loaded = load_library(dir / "p.json");
    save_library(dir / "q.json", loaded);
    EXPECT_EQ(first, read_file_bytes(dir / "q.json"));
    EXPECT_EQ(loaded.version(), lib.version());
    EXPECT_EQ(loaded.rendered("eosinophil"), lib.rendered("eosinophil"));
    EXPECT_EQ(loaded.canonical(), std::vector<std::string>{"basophil"});
}

TEST(PromptFile, RejectsMissingVersion) { EXPECT_THROW(parse_library(R"({"a": ["x"]})"), ConfigError); }

}  // namespace
}  // namespace cytodiff::prompts
