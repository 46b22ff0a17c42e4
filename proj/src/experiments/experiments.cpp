#include "cytodiff/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "cytodiff/common/error.hpp"
#include "cytodiff/common/hash.hpp"
#include "cytodiff/common/seed.hpp"
#include "cytodiff/generation.hpp"
#include "cytodiff/lora.hpp"
#include "cytodiff/prompts.hpp"
#include "json.hpp"

#ifndef CYTODIFF_SOURCE_REVISION
#define CYTODIFF_SOURCE_REVISION "unknown"
#endif

namespace cytodiff::experiments {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

std::string source_revision() { return CYTODIFF_SOURCE_REVISION; }

std::string_view to_string(Regime regime) {
    switch (regime) {
        case Regime::real_only: return "real_only";
        case Regime::synthetic_only: return "synthetic_only";
        case Regime::mixed: return "mixed";
    }
    return "real_only";
}

std::string_view to_string(BackendChoice backend) {
    switch (backend) {
        case BackendChoice::none: return "none";
        case BackendChoice::stub: return "stub";
        case BackendChoice::service: return "service";
    }
    return "none";
}

Regime parse_regime(std::string_view text) {
    if (text == "real_only" || text == "real") return Regime::real_only;
    if (text == "synthetic_only" || text == "synthetic") return Regime::synthetic_only;
    if (text == "mixed") return Regime::mixed;
    throw ConfigError("unknown regime '" + std::string(text) + "'");
}

BackendChoice parse_backend(std::string_view text) {
    if (text == "none") return BackendChoice::none;
    if (text == "stub") return BackendChoice::stub;
    if (text == "service") return BackendChoice::service;
    throw ConfigError("unknown backend '" + std::string(text) + "'");
}

void ExperimentConfig::validate(bool sweep) const {
    if (classes.size() < 2) throw ConfigError("experiment needs at least two classes");
    if (real_root.empty()) throw ConfigError("real_root is required");
    if (folds < 1) throw ConfigError("folds must be >= 1");
    if (jobs < 1) throw ConfigError("jobs must be >= 1");
    if (output_dir.empty()) throw ConfigError("output_dir is required");
    if (generation.resolution < 8) throw ConfigError("generation resolution must be >= 8");
    train.validate();
    const bool needs_synth = regime != Regime::real_only;
    if (sweep) {
        if (schedule.empty()) throw ConfigError("sweep schedule is empty");
        for (std::size_t i = 1; i < schedule.size(); ++i) {
            if (schedule[i] <= schedule[i - 1]) throw ConfigError("sweep schedule must be strictly increasing");
        }
        if (regime == Regime::real_only) throw ConfigError("a sweep needs the mixed or synthetic_only regime");
        if (regime == Regime::synthetic_only && schedule.front() == 0) {
            throw ConfigError("synthetic_only sweep points need at least one synthetic image per class");
        }
    } else if (regime == Regime::synthetic_only && synthetic_per_class == 0) {
        throw ConfigError("synthetic_only needs synthetic_per_class > 0");
    }
    if (needs_synth && !synthetic_root && backend == BackendChoice::none) {
        throw ConfigError(std::string(to_string(regime)) + " needs a synthetic_root or a generation backend");
    }
}

// ---------------------------------------------------------------------------
// Config and manifest JSON

std::string config_to_json(const ExperimentConfig& c) {
    ordered_json j;
    j["regime"] = to_string(c.regime);
    j["classes"] = c.classes;
    j["real_root"] = c.real_root.string();
    j["synthetic_root"] = c.synthetic_root ? ordered_json(c.synthetic_root->string()) : ordered_json(nullptr);
    j["synthetic_per_class"] = c.synthetic_per_class;
    j["schedule"] = c.schedule;
    j["folds"] = c.folds;
    j["fold_scheme"] = c.fold_scheme == dataset::FoldScheme::rotated_disjoint ? "rotated_disjoint" : "independent";
    j["fractions"] = {{"train", c.fractions.train}, {"validation", c.fractions.validation}, {"test", c.fractions.test}};
    j["seed"] = c.seed;
    j["backend"] = to_string(c.backend);
    j["backend_url"] = c.backend_url ? ordered_json(*c.backend_url) : ordered_json(nullptr);
    j["generation"] = {{"resolution", c.generation.resolution},
                       {"seed", c.generation.seed},
                       {"steps", c.generation.steps},
                       {"guidance_scale", c.generation.guidance_scale}};
    j["prompts"] = c.prompts ? ordered_json(c.prompts->string()) : ordered_json(nullptr);
    j["adapter_dir"] = c.adapter_dir ? ordered_json(c.adapter_dir->string()) : ordered_json(nullptr);
    j["synthetic_eval"] = c.synthetic_eval;
    j["jobs"] = c.jobs;
    j["classifier"] = ordered_json::parse(training::spec_to_json(c.classifier));
    j["train"] = ordered_json::parse(training::config_to_json(c.train));
    j["output_dir"] = c.output_dir.string();
    return j.dump(2) + "\n";
}

ExperimentConfig config_from_json(const std::string& text) {
    ExperimentConfig c;
    try {
        const auto j = ordered_json::parse(text);
        if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
        auto path_or_null = [&](const char* key, std::optional<fs::path>& out) {
            if (j.contains(key) && !j[key].is_null()) out = j[key].get<std::string>();
        };
        if (j.contains("regime")) c.regime = parse_regime(j["regime"].get<std::string>());
        if (j.contains("classes")) c.classes = j["classes"].get<std::vector<std::string>>();
        if (j.contains("real_root")) c.real_root = j["real_root"].get<std::string>();
        path_or_null("synthetic_root", c.synthetic_root);
        if (j.contains("synthetic_per_class")) c.synthetic_per_class = j["synthetic_per_class"].get<std::size_t>();
        if (j.contains("schedule")) c.schedule = j["schedule"].get<std::vector<std::size_t>>();
        if (j.contains("folds")) c.folds = j["folds"].get<int>();
        if (j.contains("fold_scheme")) {
            const auto s = j["fold_scheme"].get<std::string>();
            if (s == "rotated_disjoint") c.fold_scheme = dataset::FoldScheme::rotated_disjoint;
            else if (s == "independent") c.fold_scheme = dataset::FoldScheme::independent;
            else throw ConfigError("unknown fold_scheme '" + s + "'");
        }
        if (j.contains("fractions")) {
            const auto& f = j["fractions"];
            c.fractions = {f.at("train").get<double>(), f.at("validation").get<double>(), f.at("test").get<double>()};
        }
        if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
        if (j.contains("backend")) c.backend = parse_backend(j["backend"].get<std::string>());
        if (j.contains("backend_url")) {
            c.backend_url = j["backend_url"].is_null() ? std::nullopt : std::optional(j["backend_url"].get<std::string>());
        }
        if (j.contains("generation")) {
            const auto& g = j["generation"];
            if (g.contains("resolution")) c.generation.resolution = g["resolution"].get<int>();
            if (g.contains("seed")) c.generation.seed = g["seed"].get<std::uint64_t>();
            if (g.contains("steps")) c.generation.steps = g["steps"].get<int>();
            if (g.contains("guidance_scale")) c.generation.guidance_scale = g["guidance_scale"].get<double>();
        }
        path_or_null("prompts", c.prompts);
        path_or_null("adapter_dir", c.adapter_dir);
        if (j.contains("synthetic_eval")) c.synthetic_eval = j["synthetic_eval"].get<bool>();
        if (j.contains("jobs")) c.jobs = j["jobs"].get<int>();
        if (j.contains("classifier")) c.classifier = training::spec_from_json(j["classifier"].dump());
        if (j.contains("train")) c.train = training::config_from_json(j["train"].dump());
        if (j.contains("output_dir")) c.output_dir = j["output_dir"].get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed experiment config: ") + e.what());
    }
    return c;
}

namespace {

std::string read_text(const fs::path& path, bool config) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        const std::string msg = "cannot read " + path.string();
        if (config) throw ConfigError(msg);
        throw DataError(msg);
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    std::ofstream out(path, std::ios::binary);
    if (!out || !(out << text) || !out.flush()) throw DataError("cannot write " + path.string());
}

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

ExperimentConfig load_config(const fs::path& path) { return config_from_json(read_text(path, true)); }

std::string manifest_to_json(const RunManifest& m) {
    ordered_json j;
    j["kind"] = m.kind;
    j["config"] = ordered_json::parse(m.config_json);
    j["source_revision"] = m.source_revision;
    j["dataset_hash"] = m.dataset_hash;
    j["synthetic_digest"] = m.synthetic_digest;
    j["adapter_hashes"] = m.adapter_hashes;
    j["prompt_version"] = m.prompt_version;
    j["fold_seeds"] = m.fold_seeds;
    j["split_hashes"] = m.split_hashes;
    j["started_at"] = m.started_at;
    j["finished_at"] = m.finished_at;
    j["outputs"] = m.outputs;
    j["incomplete"] = m.incomplete;
    j["failures"] = m.failures;
    return j.dump(2) + "\n";
}

RunManifest manifest_from_json(const std::string& text) {
    try {
        const auto j = ordered_json::parse(text);
        RunManifest m;
        m.kind = j.at("kind").get<std::string>();
        m.config_json = j.at("config").dump(2) + "\n";
        m.source_revision = j.at("source_revision").get<std::string>();
        m.dataset_hash = j.at("dataset_hash").get<std::string>();
        m.synthetic_digest = j.at("synthetic_digest").get<std::string>();
        m.adapter_hashes = j.at("adapter_hashes").get<std::map<std::string, std::string>>();
        m.prompt_version = j.at("prompt_version").get<std::string>();
        m.fold_seeds = j.at("fold_seeds").get<std::vector<std::uint64_t>>();
        m.split_hashes = j.at("split_hashes").get<std::vector<std::string>>();
        m.started_at = j.at("started_at").get<std::string>();
        m.finished_at = j.at("finished_at").get<std::string>();
        m.outputs = j.at("outputs").get<std::vector<std::string>>();
        m.incomplete = j.at("incomplete").get<bool>();
        m.failures = j.at("failures").get<std::vector<std::string>>();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed run manifest: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// Tables

bool ReportRow::operator==(const ReportRow& o) const {
    auto same = [](const metrics::MetricStat& a, const metrics::MetricStat& b) {
        return a.mean == b.mean && a.std == b.std;
    };
    return model == o.model && split == o.split && dataset == o.dataset && same(accuracy, o.accuracy) &&
           same(macro_f1, o.macro_f1) && same(auc, o.auc);
}

namespace {

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char ch : s) {
        if (ch == '"') out += '"';
        out += ch;
    }
    return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields(1);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                fields.back() += '"';
                ++i;
            } else if (ch == '"') {
                quoted = false;
            } else {
                fields.back() += ch;
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            fields.emplace_back();
        } else {
            fields.back() += ch;
        }
    }
    return fields;
}

const char* kTableHeader = "Model,Split,Dataset,Accuracy,F1_macro,AUC,Accuracy_std,F1_macro_std,AUC_std";

}  // namespace

std::string table_csv(const ReportTable& table) {
    std::string out = std::string(kTableHeader) + "\n";
    for (const auto& r : table.rows) {
        out += csv_field(r.model) + "," + csv_field(r.split) + "," + csv_field(r.dataset) + "," +
               fmt17(r.accuracy.mean) + "," + fmt17(r.macro_f1.mean) + "," + fmt17(r.auc.mean) + "," +
               fmt17(r.accuracy.std) + "," + fmt17(r.macro_f1.std) + "," + fmt17(r.auc.std) + "\n";
    }
    return out;
}

ReportTable parse_table_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != kTableHeader) throw DataError("report CSV has an unexpected header");
    ReportTable t;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != 9) throw DataError("report CSV row has " + std::to_string(f.size()) + " fields");
        try {
            t.rows.push_back({f[0], f[1], f[2], {std::stod(f[3]), std::stod(f[6])}, {std::stod(f[4]), std::stod(f[7])},
                              {std::stod(f[5]), std::stod(f[8])}});
        } catch (const std::exception&) {
            throw DataError("report CSV row has a non-numeric value: " + line);
        }
    }
    return t;
}

std::string table_text(const ReportTable& table) {
    std::size_t wm = 5, ws = 5, wd = 7;
    for (const auto& r : table.rows) {
        wm = std::max(wm, r.model.size());
        ws = std::max(ws, r.split.size());
        wd = std::max(wd, r.dataset.size());
    }
    auto cell = [](const metrics::MetricStat& s) {
        char buf[48];
        std::snprintf(buf, sizeof buf, "%.4f +/- %.4f", s.mean, s.std);
        return std::string(buf);
    };
    char buf[512];
    std::snprintf(buf, sizeof buf, "%-*s  %-*s  %-*s  %-17s  %-17s  %-17s\n", static_cast<int>(wm), "Model",
                  static_cast<int>(ws), "Split", static_cast<int>(wd), "Dataset", "Accuracy", "F1 macro", "AUC");
    std::string out = buf;
    for (const auto& r : table.rows) {
        std::snprintf(buf, sizeof buf, "%-*s  %-*s  %-*s  %-17s  %-17s  %-17s\n", static_cast<int>(wm),
                      r.model.c_str(), static_cast<int>(ws), r.split.c_str(), static_cast<int>(wd), r.dataset.c_str(),
                      cell(r.accuracy).c_str(), cell(r.macro_f1).c_str(), cell(r.auc).c_str());
        out += buf;
    }
    return out;
}

std::vector<fs::path> emit_report(const ReportTable& table, const std::set<Format>& formats, const fs::path& dir,
                                  const std::string& stem) {
    if (table.rows.empty()) throw DataError("report table is empty");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw DataError("cannot create report directory " + dir.string());
    std::vector<fs::path> out;
    if (formats.count(Format::csv)) {
        out.push_back(dir / (stem + ".csv"));
        write_text(out.back(), table_csv(table));
    }
    if (formats.count(Format::text)) {
        out.push_back(dir / (stem + ".txt"));
        write_text(out.back(), table_text(table));
    }
    return out;
}

std::string sweep_svg(const std::vector<SweepPoint>& points) {
    if (points.empty()) throw DataError("no sweep points to plot");
    const double W = 640, H = 420, left = 70, right = 20, top = 30, bottom = 60;
    double xmin = static_cast<double>(points.front().per_class), xmax = static_cast<double>(points.back().per_class);
    if (xmax == xmin) {
        xmin -= 1;
        xmax += 1;
    }
    double ymin = 1, ymax = 0;
    for (const auto& p : points) {
        for (const auto& s : {p.test.accuracy_stat, p.test.macro_f1_stat}) {
            ymin = std::min(ymin, s.mean - s.std);
            ymax = std::max(ymax, s.mean + s.std);
        }
    }
    ymin = std::max(0.0, ymin - 0.05);
    ymax = std::min(1.0, ymax + 0.05);
    if (ymax <= ymin) ymax = ymin + 0.1;
    auto X = [&](double v) { return left + (v - xmin) / (xmax - xmin) * (W - left - right); };
    auto Y = [&](double v) { return top + (ymax - v) / (ymax - ymin) * (H - top - bottom); };

    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(2);
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << " " << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s << "<line x1=\"" << left << "\" y1=\"" << H - bottom << "\" x2=\"" << W - right << "\" y2=\"" << H - bottom
      << "\" stroke=\"black\"/>\n";
    s << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << H - bottom
      << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 5; ++i) {
        const double v = ymin + (ymax - ymin) * i / 5.0;
        s << "<line x1=\"" << left - 4 << "\" y1=\"" << Y(v) << "\" x2=\"" << left << "\" y2=\"" << Y(v)
          << "\" stroke=\"black\"/>\n";
        s << "<text x=\"" << left - 8 << "\" y=\"" << Y(v) + 4 << "\" text-anchor=\"end\">" << v << "</text>\n";
    }
    for (const auto& p : points) {
        const double x = X(static_cast<double>(p.per_class));
        s << "<text x=\"" << x << "\" y=\"" << H - bottom + 18 << "\" text-anchor=\"middle\">" << p.per_class
          << "</text>\n";
    }
    s << "<text x=\"" << (left + W - right) / 2 << "\" y=\"" << H - 15
      << "\" text-anchor=\"middle\">synthetic images per class</text>\n";
    s << "<text x=\"18\" y=\"" << (top + H - bottom) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
      << (top + H - bottom) / 2 << ")\">test score (mean over folds)</text>\n";

    struct Series {
        const char* name;
        const char* color;
        metrics::MetricStat metrics::MetricsReport::*field;
    };
    const Series series[] = {{"accuracy", "#1f77b4", &metrics::MetricsReport::accuracy_stat},
                             {"macro F1", "#d62728", &metrics::MetricsReport::macro_f1_stat}};
    int legend = 0;
    for (const auto& ser : series) {
        s << "<polyline class=\"" << ser.name << "\" fill=\"none\" stroke=\"" << ser.color << "\" points=\"";
        for (const auto& p : points) {
            s << X(static_cast<double>(p.per_class)) << "," << Y((p.test.*ser.field).mean) << " ";
        }
        s << "\"/>\n";
        for (const auto& p : points) {
            const auto& st = p.test.*ser.field;
            const double x = X(static_cast<double>(p.per_class));
            s << "<g class=\"errorbar\" stroke=\"" << ser.color << "\">";
            s << "<line x1=\"" << x << "\" y1=\"" << Y(st.mean - st.std) << "\" x2=\"" << x << "\" y2=\""
              << Y(st.mean + st.std) << "\"/>";
            for (double v : {st.mean - st.std, st.mean + st.std}) {
                s << "<line x1=\"" << x - 4 << "\" y1=\"" << Y(v) << "\" x2=\"" << x + 4 << "\" y2=\"" << Y(v)
                  << "\"/>";
            }
            s << "</g>\n";
            s << "<circle cx=\"" << x << "\" cy=\"" << Y(st.mean) << "\" r=\"3\" fill=\"" << ser.color << "\"/>\n";
        }
        s << "<text x=\"" << W - right - 90 << "\" y=\"" << top + 14 + 16 * legend << "\" fill=\"" << ser.color
          << "\">" << ser.name << "</text>\n";
        ++legend;
    }
    s << "</svg>\n";
    return s.str();
}

// ---------------------------------------------------------------------------
// Orchestration

namespace {

struct Inputs {
    dataset::ClassRegistry registry;
    dataset::DatasetManifest real;
    std::optional<dataset::DatasetManifest> synthetic;  // scanned synthetic corpus
    std::string synthetic_digest;
    std::map<std::string, std::string> adapter_hashes;
    std::string prompt_version;
    training::ClassifierSpec spec;
};

prompts::PromptLibrary load_prompts(const ExperimentConfig& c) {
    return c.prompts ? prompts::load_library(*c.prompts) : prompts::default_library();
}

std::unique_ptr<generation::GenerationBackend> make_backend(const ExperimentConfig& c) {
    if (c.backend == BackendChoice::stub) return std::make_unique<generation::StubBackend>();
    if (c.backend_url) return std::make_unique<generation::ServiceBackend>(generation::ServiceOptions{*c.backend_url});
    return std::make_unique<generation::ServiceBackend>(generation::ServiceBackend::from_environment());
}

std::string digest_of(const dataset::DatasetManifest& merged) {
    std::string text;
    for (const auto& r : merged.records()) {
        if (r.origin != dataset::Origin::synthetic) continue;
        text += std::to_string(r.label) + " " + r.path.filename().string() + " " + sha256_file(r.path) + "\n";
    }
    return sha256_hex(text);
}

// Loads the real corpus and, when `needed` > 0, makes sure the synthetic
// corpus holds at least that many images per class. Everything here runs
// before any training starts.
Inputs prepare_inputs(const ExperimentConfig& c, std::size_t needed) {
    Inputs in;
    in.registry = dataset::ClassRegistry(c.classes);
    dataset::ScanOptions scan;
    scan.seed = c.seed;
    in.real = dataset::scan_corpus(fs::absolute(c.real_root), in.registry, dataset::Origin::real, scan).manifest;

    const auto library = load_prompts(c);
    in.prompt_version = library.version();

    std::map<std::string, lora::LoraAdapter> adapters;
    if (c.adapter_dir) {
        for (const auto& name : c.classes) {
            const fs::path p = *c.adapter_dir / (name + ".lora");
            if (!fs::exists(p)) continue;
            adapters[name] = lora::load_adapter(p);
            in.adapter_hashes[name] = sha256_file(p);
        }
    }

    in.spec = c.classifier;
    if (in.spec.num_classes == 0) in.spec.num_classes = static_cast<int>(c.classes.size());
    if (in.spec.family == training::Family::contrastive_prompt && in.spec.class_prompts.empty()) {
        for (const auto& name : c.classes) {
            const auto* t = library.find(name);
            in.spec.class_prompts.push_back(t ? library.rendered(name) : name);
        }
    }
    in.spec.validate();

    if (needed == 0) return in;
    const fs::path root = fs::absolute(c.synthetic_root ? *c.synthetic_root : c.output_dir / "synthetic");
    const std::vector<std::string> exts = dataset::ScanOptions{}.extensions;
    std::vector<std::size_t> have(c.classes.size(), 0);
    if (fs::is_directory(root)) have = dataset::count_corpus_files(root, in.registry, exts);
    std::string shortfalls;
    for (std::size_t k = 0; k < have.size(); ++k) {
        if (have[k] < needed) {
            shortfalls += (shortfalls.empty() ? "" : "; ") + c.classes[k] + " has " + std::to_string(have[k]);
        }
    }
    if (!shortfalls.empty()) {
        if (c.backend == BackendChoice::none) {
            throw DataError("synthetic corpus " + root.string() + " cannot supply " + std::to_string(needed) +
                            " images per class (" + shortfalls + ")");
        }
        auto backend = make_backend(c);
        for (std::size_t k = 0; k < have.size(); ++k) {
            if (have[k] >= needed) continue;
            const auto& name = c.classes[k];
            const auto* tmpl = library.find(name);
            if (!tmpl) throw ConfigError("no prompt for class '" + name + "'");
            generation::GenerationRequest req;
            req.cls = in.registry.find(name);
            req.count = static_cast<int>(needed);
            req.seed = derive_seed(c.generation.seed, {fnv1a64(name)});
            req.sampler.steps = c.generation.steps;
            req.sampler.guidance_scale = c.generation.guidance_scale;
            req.resolution = c.generation.resolution;
            auto it = adapters.find(name);
            generation::generate_to_directory(*backend, req, library.rendered(name),
                                              it == adapters.end() ? nullptr : &it->second, root, "synth", true);
        }
    }
    dataset::ScanOptions synth_scan;
    synth_scan.seed = c.seed;
    synth_scan.verify_decodable = false;
    in.synthetic = dataset::scan_corpus(root, in.registry, dataset::Origin::synthetic, synth_scan).manifest;
    in.synthetic_digest =
        digest_of(dataset::merge_synthetic(dataset::DatasetManifest(in.registry, 0), *in.synthetic, needed));
    return in;
}

std::string model_name(const training::ClassifierSpec& spec) {
    return std::string(training::to_string(spec.family)) + "/" + spec.backbone;
}

std::string dataset_label(Regime regime, std::size_t per_class) {
    switch (regime) {
        case Regime::real_only: return "real";
        case Regime::mixed:
            return per_class == 0 ? "real" : "real+synthetic(" + std::to_string(per_class) + "/class)";
        case Regime::synthetic_only: return "synthetic(" + std::to_string(per_class) + "/class)";
    }
    return "";
}

struct FoldOutcome {
    bool done = false;
    std::string error;
    metrics::MetricsReport validation, test;
    std::vector<training::EpochStats> epochs;
    std::size_t train_records = 0;
};

struct FoldSet {
    std::vector<FoldOutcome> folds;
    std::vector<std::string> failures;
};

// Runs every fold as an independent job; at most `jobs` run at once. After
// the first failure no new fold is started.
FoldSet run_folds(const ExperimentConfig& c, const Inputs& in, const std::vector<dataset::SplitAssignment>& splits,
                  const std::vector<std::uint64_t>& seeds, std::size_t per_class, training::ImageCache& cache,
                  const RunHooks& hooks) {
    FoldSet set;
    set.folds.resize(splits.size());
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    auto worker = [&] {
        for (;;) {
            if (failed.load()) return;
            const std::size_t f = next.fetch_add(1);
            if (f >= splits.size()) return;
            auto& out = set.folds[f];
            try {
                if (hooks.on_fold_start) hooks.on_fold_start(per_class, static_cast<int>(f));
                const auto m =
                    regime_manifest(c, in.real, in.synthetic ? &*in.synthetic : nullptr, splits[f], per_class);
                out.train_records = m.indices_in(dataset::Split::train).size();
                auto cfg = c.train;
                cfg.seed = seeds[f];
                const auto trained = training::train_classifier(in.spec, m, cfg, &cache);
                const auto names = in.registry.names();
                const auto val = training::evaluate(trained.model, m, dataset::Split::validation, &cache);
                const auto test = training::evaluate(trained.model, m, dataset::Split::test, &cache);
                out.validation = metrics::make_report(names, val.truth, val.predicted, val.probabilities);
                out.test = metrics::make_report(names, test.truth, test.predicted, test.probabilities);
                out.epochs = trained.epochs;
                out.done = true;
            } catch (const std::exception& e) {
                out.error = "fold " + std::to_string(f) + ": " + e.what();
                failed.store(true);
            }
        }
    };
    const int n = std::min<int>(c.jobs, static_cast<int>(splits.size()));
    if (n <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < n; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (const auto& f : set.folds) {
        if (!f.error.empty()) set.failures.push_back(f.error);
    }
    return set;
}

RunManifest base_manifest(const ExperimentConfig& c, const Inputs& in, const std::string& kind,
                          const std::vector<dataset::SplitAssignment>& splits, const std::vector<std::uint64_t>& seeds) {
    RunManifest m;
    m.kind = kind;
    ExperimentConfig echo = c;
    echo.real_root = fs::absolute(c.real_root);
    if (echo.synthetic_root) echo.synthetic_root = fs::absolute(*echo.synthetic_root);
    if (echo.prompts) echo.prompts = fs::absolute(*echo.prompts);
    if (echo.adapter_dir) echo.adapter_dir = fs::absolute(*echo.adapter_dir);
    if (echo.classifier.pretrained_backbone) {
        echo.classifier.pretrained_backbone = fs::absolute(*echo.classifier.pretrained_backbone);
    }
    m.config_json = config_to_json(echo);
    m.source_revision = source_revision();
    m.dataset_hash = dataset::manifest_hash(in.real);
    m.synthetic_digest = in.synthetic_digest;
    m.adapter_hashes = in.adapter_hashes;
    m.prompt_version = in.prompt_version;
    m.fold_seeds = seeds;
    for (const auto& s : splits) m.split_hashes.push_back(dataset::assignment_hash(s));
    m.started_at = utc_now();
    return m;
}

std::string rel(const fs::path& p, const fs::path& root) { return fs::relative(p, root).generic_string(); }

// Fold reports and epoch logs of the finished folds.
void write_fold_artifacts(const FoldSet& set, const fs::path& dir, const std::string& prefix, RunManifest& manifest) {
    for (std::size_t f = 0; f < set.folds.size(); ++f) {
        const auto& o = set.folds[f];
        if (!o.done) continue;
        const std::string base = prefix + "fold" + std::to_string(f);
        const fs::path v = dir / "folds" / (base + "_validation.json");
        const fs::path t = dir / "folds" / (base + "_test.json");
        const fs::path e = dir / "epochs" / (base + ".csv");
        write_text(v, metrics::report_to_json(o.validation));
        write_text(t, metrics::report_to_json(o.test));
        write_text(e, training::epoch_csv(o.epochs));
        for (const auto& p : {v, t, e}) manifest.outputs.push_back(rel(p, dir));
    }
}

void finish_manifest(RunManifest& m, const fs::path& dir) {
    m.finished_at = utc_now();
    write_text(dir / "run_manifest.json", manifest_to_json(m));
}

void fail_incomplete(RunManifest& m, const FoldSet& set, const fs::path& dir) {
    m.incomplete = true;
    m.failures = set.failures;
    finish_manifest(m, dir);
    throw IncompleteRunError("run incomplete, finished folds kept in " + dir.string() + ": " + set.failures.front());
}

std::vector<metrics::MetricsReport> collect(const FoldSet& set, bool test) {
    std::vector<metrics::MetricsReport> out;
    for (const auto& f : set.folds) out.push_back(test ? f.test : f.validation);
    return out;
}

ReportRow make_row(const std::string& model, const std::string& split, const std::string& data,
                   const metrics::MetricsReport& r) {
    return {model, split, data, r.accuracy_stat, r.macro_f1_stat, r.mean_auc_stat};
}

std::vector<std::uint64_t> fold_seeds(const ExperimentConfig& c) {
    std::vector<std::uint64_t> s;
    for (int f = 0; f < c.folds; ++f) s.push_back(derive_seed(c.seed, {0xf01dULL, static_cast<std::uint64_t>(f)}));
    return s;
}

std::vector<dataset::SplitAssignment> make_splits(const ExperimentConfig& c, const Inputs& in) {
    return dataset::stratified_kfold(in.real, c.folds, c.fractions, c.seed, c.fold_scheme);
}

}  // namespace

dataset::DatasetManifest regime_manifest(const ExperimentConfig& c, const dataset::DatasetManifest& real,
                                         const dataset::DatasetManifest* synthetic,
                                         const dataset::SplitAssignment& split, std::size_t per_class) {
    auto m = dataset::apply_assignment(real, split);
    if (c.regime == Regime::real_only) return m;
    if (c.regime == Regime::synthetic_only) {
        for (std::size_t i = 0; i < m.size(); ++i) {
            const auto& r = m.records()[i];
            if (r.split == dataset::Split::train) m.assign(i, r.fold, dataset::Split::unassigned);
        }
    }
    if (per_class == 0) return m;
    if (!synthetic) throw DataError("regime needs a synthetic corpus");
    dataset::MergeOptions opts;
    opts.allow_synthetic_eval = c.synthetic_eval;
    opts.fractions = c.fractions;
    return dataset::merge_synthetic(m, *synthetic, per_class, opts);
}

RegimeResult run_regime(const ExperimentConfig& config, const RunHooks& hooks) {
    config.validate(false);
    const std::size_t per_class = config.regime == Regime::real_only ? 0 : config.synthetic_per_class;
    const Inputs in = prepare_inputs(config, per_class);
    const auto splits = make_splits(config, in);
    const auto seeds = fold_seeds(config);
    const fs::path& dir = config.output_dir;

    RegimeResult result;
    result.manifest = base_manifest(config, in, "regime", splits, seeds);
    training::ImageCache cache;
    const FoldSet set = run_folds(config, in, splits, seeds, per_class, cache, hooks);
    write_fold_artifacts(set, dir, "", result.manifest);
    if (!set.failures.empty()) fail_incomplete(result.manifest, set, dir);

    result.validation_folds = collect(set, false);
    result.test_folds = collect(set, true);
    result.validation = metrics::aggregate_folds(result.validation_folds);
    result.test = metrics::aggregate_folds(result.test_folds);
    const auto model = model_name(in.spec);
    const auto data = dataset_label(config.regime, per_class);
    result.table.rows = {make_row(model, "validation", data, result.validation),
                         make_row(model, "test", data, result.test)};
    write_text(dir / "aggregate_test.json", metrics::report_to_json(result.test));
    write_text(dir / "aggregate_validation.json", metrics::report_to_json(result.validation));
    result.manifest.outputs.push_back("aggregate_test.json");
    result.manifest.outputs.push_back("aggregate_validation.json");
    for (const auto& p : emit_report(result.table, {Format::csv, Format::text}, dir)) {
        result.manifest.outputs.push_back(rel(p, dir));
    }
    finish_manifest(result.manifest, dir);
    return result;
}

SweepResult run_scaling_sweep(const ExperimentConfig& config, const RunHooks& hooks) {
    config.validate(true);
    const Inputs in = prepare_inputs(config, config.schedule.back());
    const auto splits = make_splits(config, in);
    const auto seeds = fold_seeds(config);
    const fs::path& dir = config.output_dir;

    SweepResult result;
    result.manifest = base_manifest(config, in, "sweep", splits, seeds);
    const auto model = model_name(in.spec);
    training::ImageCache cache;
    std::string csv = "per_class,train_records,accuracy,accuracy_std,f1_macro,f1_macro_std,auc,auc_std";
    for (const auto& name : config.classes) csv += ",f1_" + name + ",f1_" + name + "_std";
    csv += "\n";

    for (const std::size_t n : config.schedule) {
        const FoldSet set = run_folds(config, in, splits, seeds, n, cache, hooks);
        write_fold_artifacts(set, dir, "p" + std::to_string(n) + "_", result.manifest);
        if (!set.failures.empty()) fail_incomplete(result.manifest, set, dir);
        SweepPoint point;
        point.per_class = n;
        point.folds = collect(set, true);
        point.test = metrics::aggregate_folds(point.folds);
        const auto val = metrics::aggregate_folds(collect(set, false));
        result.table.rows.push_back(make_row(model, "validation", dataset_label(config.regime, n), val));
        result.table.rows.push_back(make_row(model, "test", dataset_label(config.regime, n), point.test));

        std::size_t records = 0;
        for (const auto& f : set.folds) records += f.train_records;
        csv += std::to_string(n) + "," + fmt17(static_cast<double>(records) / static_cast<double>(set.folds.size()));
        for (const auto& s : {point.test.accuracy_stat, point.test.macro_f1_stat, point.test.mean_auc_stat}) {
            csv += "," + fmt17(s.mean) + "," + fmt17(s.std);
        }
        for (const auto& s : point.test.per_class_f1_stat) csv += "," + fmt17(s.mean) + "," + fmt17(s.std);
        csv += "\n";
        result.points.push_back(std::move(point));
    }

    write_text(dir / "sweep.csv", csv);
    result.plot = dir / "sweep.svg";
    write_text(result.plot, sweep_svg(result.points));
    result.manifest.outputs.push_back("sweep.csv");
    result.manifest.outputs.push_back("sweep.svg");
    for (const auto& p : emit_report(result.table, {Format::csv, Format::text}, dir)) {
        result.manifest.outputs.push_back(rel(p, dir));
    }
    finish_manifest(result.manifest, dir);
    return result;
}

void rerun(const fs::path& manifest_path, const fs::path& output_dir) {
    const RunManifest old = manifest_from_json(read_text(manifest_path, false));
    ExperimentConfig c = config_from_json(old.config_json);
    c.output_dir = output_dir;
    dataset::ScanOptions scan;
    scan.seed = c.seed;
    const auto real =
        dataset::scan_corpus(fs::absolute(c.real_root), dataset::ClassRegistry(c.classes), dataset::Origin::real, scan).manifest;
    if (dataset::manifest_hash(real) != old.dataset_hash) {
        throw DataError("real dataset under " + c.real_root.string() + " changed since the recorded run");
    }
    RunManifest fresh;
    if (old.kind == "regime") {
        fresh = run_regime(c).manifest;
    } else if (old.kind == "sweep") {
        fresh = run_scaling_sweep(c).manifest;
    } else {
        throw DataError("unknown run kind '" + old.kind + "'");
    }
    if (fresh.synthetic_digest != old.synthetic_digest) {
        throw DataError("synthetic corpus differs from the recorded run");
    }
}

}  // namespace cytodiff::experiments
