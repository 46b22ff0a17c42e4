#include "cytodiff/prompts.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "cytodiff/common/error.hpp"
#include "json.hpp"

namespace cytodiff::prompts {

using ordered_json = nlohmann::ordered_json;

std::string render_prompt(const PromptTemplate& tmpl) {
    if (tmpl.phrases.empty()) throw ConfigError("prompt template for '" + tmpl.class_name + "' has no phrases");
    std::string out = tmpl.phrases.front();
    for (std::size_t i = 1; i < tmpl.phrases.size(); ++i) {
        out += ", ";
        out += tmpl.phrases[i];
    }
    return out;
}

void PromptLibrary::set(PromptTemplate tmpl) {
    rendered_cache_.erase(tmpl.class_name);
    for (auto& t : templates_) {
        if (t.class_name == tmpl.class_name) {
            t = std::move(tmpl);
            return;
        }
    }
    templates_.push_back(std::move(tmpl));
}

const PromptTemplate* PromptLibrary::find(const std::string& class_name) const {
    for (const auto& t : templates_) {
        if (t.class_name == class_name) return &t;
    }
    return nullptr;
}

const PromptTemplate& PromptLibrary::at(const std::string& class_name) const {
    const auto* t = find(class_name);
    if (!t) throw ConfigError("no prompt for class '" + class_name + "'");
    return *t;
}

const std::string& PromptLibrary::rendered(const std::string& class_name) const {
    auto it = rendered_cache_.find(class_name);
    if (it == rendered_cache_.end()) it = rendered_cache_.emplace(class_name, render_prompt(at(class_name))).first;
    return it->second;
}

ValidationReport validate_library(const PromptLibrary& library, const dataset::ClassRegistry& registry) {
    ValidationReport report;
    for (const auto& label : registry.labels()) {
        if (!library.find(label.name)) report.missing.push_back(label.name);
    }
    std::vector<std::pair<std::string, std::string>> rendered;
    for (const auto& t : library.templates()) {
        if (!registry.index_of(t.class_name)) report.unknown.push_back(t.class_name);
        if (t.phrases.empty() ||
            std::all_of(t.phrases.begin(), t.phrases.end(), [](const std::string& p) { return p.empty(); })) {
            report.empty.push_back(t.class_name);
            continue;
        }
        rendered.emplace_back(t.class_name, render_prompt(t));
    }
    for (std::size_t i = 0; i < rendered.size(); ++i) {
        for (std::size_t j = i + 1; j < rendered.size(); ++j) {
            if (rendered[i].second == rendered[j].second) report.duplicates.emplace_back(rendered[i].first, rendered[j].first);
        }
    }
    return report;
}

std::string serialize_library(const PromptLibrary& library) {
    ordered_json j;
    j["version"] = library.version();
    if (!library.canonical().empty()) j["canonical"] = library.canonical();
    for (const auto& t : library.templates()) j[t.class_name] = t.phrases;
    return j.dump(2) + "\n";
}

PromptLibrary parse_library(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const ordered_json::exception& e) {
        throw ConfigError(std::string("malformed prompt file: ") + e.what());
    }
    if (!j.is_object() || !j.contains("version") || !j["version"].is_string()) {
        throw ConfigError("prompt file needs a string 'version' field");
    }
    PromptLibrary lib(j["version"].get<std::string>());
    for (const auto& [key, value] : j.items()) {
        if (key == "version") continue;
        if (key == "canonical") {
            lib.set_canonical(value.get<std::vector<std::string>>());
            continue;
        }
        if (!value.is_array()) throw ConfigError("prompt for '" + key + "' must be an array of phrases");
        lib.set({key, value.get<std::vector<std::string>>()});
    }
    return lib;
}

void save_library(const std::filesystem::path& path, const PromptLibrary& library) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write prompt file: " + path.string());
    out << serialize_library(library);
}

PromptLibrary load_library(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read prompt file: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_library(ss.str());
}

PromptLibrary default_library() {
    const std::vector<std::string> style{"surrounded by red blood cells", "medical cytology", "high detail",
                                         "clinical pathology", "Wright-Giemsa stain", "white background",
                                         "soft lighting", "40x magnification", "ultra-detailed", "sharp focus",
                                         "macro lens"};
    auto make = [&](const std::string& name, const std::string& cell, std::vector<std::string> morphology) {
        PromptTemplate t{name, {"Photorealistic " + cell + " under microscope", "peripheral blood smear"}};
        t.phrases.insert(t.phrases.end(), morphology.begin(), morphology.end());
        t.phrases.insert(t.phrases.end(), style.begin(), style.end());
        return t;
    };

    PromptLibrary lib("munich-aml-defaults-1");
    lib.set_canonical({"basophil"});
    lib.set(make("basophil", "basophil",
                 {"large bilobed nucleus", "dark blue-purple granules densely packed in cytoplasm"}));
    lib.set(make("eosinophil", "eosinophil",
                 {"bilobed nucleus", "abundant bright orange-red granules filling the cytoplasm"}));
    lib.set(make("erythroblast", "erythroblast",
                 {"small round dense nucleus", "deep blue cytoplasm", "high nuclear to cytoplasmic ratio"}));
    lib.set(make("smudge_cell", "smudge cell",
                 {"ruptured cell with smeared nuclear chromatin", "no intact cytoplasm", "irregular outline"}));
    lib.set(make("atypical_lymphocyte", "atypical reactive lymphocyte",
                 {"enlarged irregular nucleus", "abundant basophilic cytoplasm indenting around red cells"}));
    lib.set(make("typical_lymphocyte", "small mature lymphocyte",
                 {"round dense nucleus", "scant pale blue cytoplasm rim"}));
    lib.set(make("metamyelocyte", "metamyelocyte",
                 {"kidney-shaped indented nucleus", "pink cytoplasm with fine neutrophilic granules"}));
    lib.set(make("monoblast", "monoblast",
                 {"large round or slightly oval nucleus", "fine lacy chromatin with prominent nucleoli",
                  "bluish cytoplasm with fine vacuoles"}));
    lib.set(make("monocyte", "monocyte",
                 {"folded horseshoe-shaped nucleus", "grey-blue cytoplasm with vacuoles"}));
    lib.set(make("myelocyte", "myelocyte",
                 {"round eccentric nucleus without nucleoli", "pinkish cytoplasm with secondary granules"}));
    lib.set(make("myeloblast", "myeloblast",
                 {"large round nucleus with fine chromatin and nucleoli", "scant agranular blue cytoplasm",
                  "occasional Auer rods"}));
    lib.set(make("band_neutrophil", "band neutrophil",
                 {"curved band-shaped unsegmented nucleus", "pale pink granular cytoplasm"}));
    lib.set(make("segmented_neutrophil", "segmented neutrophil",
                 {"nucleus with three to five segments joined by thin strands", "pale pink granular cytoplasm"}));
    lib.set(make("promyelocyte_bilobed", "bilobed promyelocyte",
                 {"bilobed nucleus", "abundant coarse azurophilic granules", "basophilic cytoplasm"}));
    lib.set(make("promyelocyte", "promyelocyte",
                 {"large oval nucleus with nucleolus", "abundant coarse purple azurophilic granules",
                  "perinuclear clearing"}));
    return lib;
}

}  // namespace cytodiff::prompts
