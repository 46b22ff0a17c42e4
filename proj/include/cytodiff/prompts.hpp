#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cytodiff/dataset.hpp"

namespace cytodiff::prompts {

/// Ordered descriptor phrases for one class (morphology, stain,
/// magnification, style). Rendering joins them with ", ".
struct PromptTemplate {
    std::string class_name;
    std::vector<std::string> phrases;

    bool operator==(const PromptTemplate&) const = default;
};

std::string render_prompt(const PromptTemplate& tmpl);

class PromptLibrary {
public:
    PromptLibrary() = default;
    explicit PromptLibrary(std::string version) : version_(std::move(version)) {}

    const std::string& version() const { return version_; }
    /// Classes whose prompts were validated by experts rather than shipped as
    /// editable defaults.
    const std::vector<std::string>& canonical() const { return canonical_; }
    void set_canonical(std::vector<std::string> names) { canonical_ = std::move(names); }

    void set(PromptTemplate tmpl);
    const PromptTemplate* find(const std::string& class_name) const;
    const PromptTemplate& at(const std::string& class_name) const;
    /// Rendered prompt for a class; cached after the first call.
    const std::string& rendered(const std::string& class_name) const;

    const std::vector<PromptTemplate>& templates() const { return templates_; }

private:
    std::string version_;
    std::vector<std::string> canonical_;
    std::vector<PromptTemplate> templates_;  // insertion order is file order
    mutable std::map<std::string, std::string> rendered_cache_;
};

struct ValidationReport {
    std::vector<std::string> missing;
    std::vector<std::string> unknown;  // templates for unregistered classes
    std::vector<std::string> empty;
    std::vector<std::pair<std::string, std::string>> duplicates;

    bool valid() const { return missing.empty() && unknown.empty() && empty.empty() && duplicates.empty(); }
};

ValidationReport validate_library(const PromptLibrary& library, const dataset::ClassRegistry& registry);

/// Prompt file: JSON object mapping class name to a phrase array, plus a
/// "version" string and an optional "canonical" class list.
std::string serialize_library(const PromptLibrary& library);
PromptLibrary parse_library(const std::string& text);
void save_library(const std::filesystem::path& path, const PromptLibrary& library);
PromptLibrary load_library(const std::filesystem::path& path);

/// Built-in prompts for the 15 Munich AML classes. Only the basophil prompt
/// is canonical; the others are editable defaults.
PromptLibrary default_library();

}  // namespace cytodiff::prompts
