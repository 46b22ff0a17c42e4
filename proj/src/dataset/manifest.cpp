#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "cytodiff/common/error.hpp"
#include "cytodiff/common/hash.hpp"
#include "cytodiff/dataset.hpp"

namespace cytodiff::dataset {

using nlohmann::json;

ClassRegistry::ClassRegistry(const std::vector<std::string>& names) {
    std::vector<ClassLabel> labels;
    for (std::size_t i = 0; i < names.size(); ++i) labels.push_back({names[i], static_cast<int>(i)});
    *this = from_labels(std::move(labels));
}

ClassRegistry ClassRegistry::from_labels(std::vector<ClassLabel> labels) {
    if (labels.size() < 2) throw ConfigError("class registry needs at least 2 classes");
    std::sort(labels.begin(), labels.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
    std::set<std::string> seen;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i].index != static_cast<int>(i)) {
            throw ConfigError("class indices must be contiguous from 0; found gap at " + std::to_string(i));
        }
        if (labels[i].name.empty()) throw ConfigError("empty class name at index " + std::to_string(i));
        if (!seen.insert(labels[i].name).second) throw ConfigError("duplicate class name '" + labels[i].name + "'");
    }
    ClassRegistry r;
    r.labels_ = std::move(labels);
    return r;
}

const ClassLabel& ClassRegistry::at(int index) const {
    if (index < 0 || static_cast<std::size_t>(index) >= labels_.size()) {
        throw ConfigError("class index out of range: " + std::to_string(index));
    }
    return labels_[static_cast<std::size_t>(index)];
}

const ClassLabel& ClassRegistry::find(std::string_view name) const {
    auto idx = index_of(name);
    if (!idx) throw ConfigError("unknown class '" + std::string(name) + "'");
    return labels_[static_cast<std::size_t>(*idx)];
}

std::optional<int> ClassRegistry::index_of(std::string_view name) const {
    for (const auto& l : labels_) {
        if (l.name == name) return l.index;
    }
    return std::nullopt;
}

std::vector<std::string> ClassRegistry::names() const {
    std::vector<std::string> out;
    for (const auto& l : labels_) out.push_back(l.name);
    return out;
}

ClassRegistry munich_aml_registry() {
    return ClassRegistry({"basophil", "eosinophil", "erythroblast", "smudge_cell", "atypical_lymphocyte",
                          "typical_lymphocyte", "metamyelocyte", "monoblast", "monocyte", "myelocyte", "myeloblast",
                          "band_neutrophil", "segmented_neutrophil", "promyelocyte_bilobed", "promyelocyte"});
}

std::string_view to_string(Origin origin) { return origin == Origin::real ? "real" : "synthetic"; }

std::string_view to_string(Split split) {
    switch (split) {
        case Split::train: return "train";
        case Split::validation: return "validation";
        case Split::test: return "test";
        case Split::unassigned: return "unassigned";
    }
    return "unassigned";
}

Origin parse_origin(std::string_view text) {
    if (text == "real") return Origin::real;
    if (text == "synthetic") return Origin::synthetic;
    throw DataError("unknown origin '" + std::string(text) + "'");
}

Split parse_split(std::string_view text) {
    if (text == "train") return Split::train;
    if (text == "validation") return Split::validation;
    if (text == "test") return Split::test;
    if (text == "unassigned") return Split::unassigned;
    throw DataError("unknown split '" + std::string(text) + "'");
}

DatasetManifest::DatasetManifest(ClassRegistry registry, std::uint64_t seed)
    : registry_(std::move(registry)), seed_(seed) {}

void DatasetManifest::add(ImageRecord record) {
    if (record.label < 0 || static_cast<std::size_t>(record.label) >= registry_.size()) {
        throw DataError("record label " + std::to_string(record.label) + " not in class registry: " +
                        record.path.string());
    }
    records_.push_back(std::move(record));
}

std::vector<ClassCount> DatasetManifest::class_counts() const {
    std::vector<ClassCount> counts(registry_.size());
    for (const auto& r : records_) {
        auto& c = counts[static_cast<std::size_t>(r.label)];
        (r.origin == Origin::real ? c.n_real : c.n_synthetic) += 1;
    }
    return counts;
}

ClassCount DatasetManifest::totals() const {
    ClassCount t;
    for (const auto& c : class_counts()) {
        t.n_real += c.n_real;
        t.n_synthetic += c.n_synthetic;
    }
    return t;
}

std::vector<std::size_t> DatasetManifest::indices_in(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records_.size(); ++i) {
        if (records_[i].split == split) out.push_back(i);
    }
    return out;
}

void DatasetManifest::assign(std::size_t index, std::optional<int> fold, Split split) {
    auto& r = records_.at(index);
    r.fold = fold;
    r.split = split;
}

std::string serialize_manifest(const DatasetManifest& manifest) {
    std::ostringstream out;
    json header;
    header["schema_version"] = kManifestSchemaVersion;
    header["seed"] = manifest.seed();
    header["class_registry"] = manifest.registry().names();
    out << header.dump() << '\n';
    for (const auto& r : manifest.records()) {
        json line;
        line["path"] = r.path.generic_string();
        line["label"] = manifest.registry().at(r.label).name;
        line["origin"] = to_string(r.origin);
        line["fold"] = r.fold ? json(*r.fold) : json(nullptr);
        line["split"] = to_string(r.split);
        out << line.dump() << '\n';
    }
    return out.str();
}

DatasetManifest parse_manifest(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line)) throw DataError("manifest is empty");
    DatasetManifest manifest;
    try {
        const auto header = json::parse(line);
        const int version = header.at("schema_version").get<int>();
        if (version != kManifestSchemaVersion) {
            throw DataError("unsupported manifest schema version " + std::to_string(version));
        }
        manifest = DatasetManifest(ClassRegistry(header.at("class_registry").get<std::vector<std::string>>()),
                                   header.at("seed").get<std::uint64_t>());
        std::size_t line_no = 1;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            const auto j = json::parse(line);
            ImageRecord r;
            r.path = j.at("path").get<std::string>();
            const auto label = j.at("label").get<std::string>();
            const auto idx = manifest.registry().index_of(label);
            if (!idx) throw DataError("line " + std::to_string(line_no) + ": label '" + label + "' not in registry");
            r.label = *idx;
            r.origin = parse_origin(j.at("origin").get<std::string>());
            if (!j.at("fold").is_null()) r.fold = j.at("fold").get<int>();
            r.split = parse_split(j.at("split").get<std::string>());
            manifest.add(std::move(r));
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed manifest: ") + e.what());
    }
    return manifest;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write manifest: " + path.string());
    out << serialize_manifest(manifest);
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read manifest: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_manifest(ss.str());
}

std::string manifest_hash(const DatasetManifest& manifest) { return sha256_hex(serialize_manifest(manifest)); }

}  // namespace cytodiff::dataset
