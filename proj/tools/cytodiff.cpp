// cytodiff command line.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "cytodiff/common/error.hpp"
#include "cytodiff/common/hash.hpp"
#include "cytodiff/common/image.hpp"
#include "cytodiff/common/seed.hpp"
#include "cytodiff/common/tensor_file.hpp"
#include "cytodiff/dataset.hpp"
#include "cytodiff/experiments.hpp"
#include "cytodiff/generation.hpp"
#include "cytodiff/lora.hpp"
#include "cytodiff/metrics.hpp"
#include "cytodiff/prompts.hpp"
#include "cytodiff/training.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cytodiff;

namespace {

constexpr std::uint64_t kReferenceModelSeed = 7;

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ConfigError("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

const fs::path& make_parent(const fs::path& p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    return p;
}

void write_text(const fs::path& p, const std::string& text) {
    make_parent(p);
    std::ofstream out(p, std::ios::binary);
    if (!out || !(out << text)) throw DataError("cannot write " + p.string());
}

// Flags first, then the --config file on top: keys present in the file win.
json overlay(json base, const std::string& config_path) {
    if (config_path.empty()) return base;
    json file;
    try {
        file = json::parse(read_text(config_path));
    } catch (const json::parse_error& e) {
        throw ConfigError("malformed config " + config_path + ": " + e.what());
    }
    if (!file.is_object()) throw ConfigError("config " + config_path + " must be a JSON object");
    base.merge_patch(file);
    return base;
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

dataset::ClassRegistry registry_from(const std::string& classes) {
    if (classes.empty() || classes == "munich_aml") return dataset::munich_aml_registry();
    return dataset::ClassRegistry(split_list(classes));
}

dataset::SplitFractions parse_fractions(const std::string& text) {
    const auto parts = split_list(text);
    if (parts.size() != 3) throw ConfigError("--fractions needs three comma-separated values");
    try {
        return {std::stod(parts[0]), std::stod(parts[1]), std::stod(parts[2])};
    } catch (const std::exception&) {
        throw ConfigError("--fractions values must be numbers");
    }
}

prompts::PromptLibrary library_from(const std::string& path) {
    return path.empty() ? prompts::default_library() : prompts::load_library(path);
}

struct Options {
    // shared
    std::string config, out, manifest, classes, prompts_file;
    std::uint64_t seed = 0;
    // dataset
    std::string root, origin = "real", fractions = "0.6,0.2,0.2", scheme = "rotated_disjoint", synth_root;
    int k = 5, resolution = 32;
    std::size_t per_class = 0;
    bool allow_synthetic_eval = false;
    std::vector<std::string> counts;
    // prompts
    std::string cls;
    // lora
    int shots = 8, rank = 16, steps = 200, d_model = 32, heads = 4;
    float alpha = 16.f, lora_lr = 1e-3f;
    bool unet_only = false;
    int gen_resolution = 0;
    // generate
    int count = 1;
    std::string backend = "stub", adapter, run_id = "gen", mode = "text_to_image";
    std::vector<std::string> init_images;
    bool resume = false;
    // train / evaluate
    std::string family = "cnn", loss_mode = "equal", pretrained, log, checkpoint, split = "test";
    int fold = -1, epochs = 100, warmup = 30, batch = 64, width = 8;
    double lambda1 = 0.5, lr = 1e-4;
    // report
    std::vector<std::string> rows, points;
    // run / sweep
    std::string regime, schedule;
    int jobs = 1;
};

// --------------------------------------------------------------------------
// dataset

void cmd_scan(const Options& o) {
    auto reg = registry_from(o.classes);
    dataset::ScanOptions scan;
    scan.seed = o.seed;
    auto res = dataset::scan_corpus(o.root, reg, dataset::parse_origin(o.origin), scan);
    for (const auto& s : res.skipped) std::cerr << "skipped " << s.path.string() << ": " << s.reason << "\n";
    dataset::write_manifest(make_parent(o.out), res.manifest);
    std::cout << res.manifest.size() << " records -> " << o.out << "\n";
}

void cmd_split(const Options& o) {
    const auto m = dataset::read_manifest(o.manifest);
    const auto scheme = o.scheme == "independent" ? dataset::FoldScheme::independent
                                                  : dataset::FoldScheme::rotated_disjoint;
    const auto folds = dataset::stratified_kfold(m, o.k, parse_fractions(o.fractions), o.seed, scheme);
    fs::create_directories(o.out);
    for (const auto& a : folds) {
        const fs::path p = fs::path(o.out) / ("fold_" + std::to_string(a.fold_id) + ".jsonl");
        dataset::write_manifest(p, dataset::apply_assignment(m, a));
        std::cout << p.string() << " " << dataset::assignment_hash(a) << "\n";
    }
}

void cmd_merge(const Options& o) {
    const auto m = dataset::read_manifest(o.manifest);
    dataset::MergeOptions opts;
    opts.allow_synthetic_eval = o.allow_synthetic_eval;
    opts.fractions = parse_fractions(o.fractions);
    const auto merged = dataset::merge_synthetic(m, fs::path(o.synth_root), o.per_class, opts);
    dataset::write_manifest(make_parent(o.out), merged);
    const auto t = merged.totals();
    std::cout << t.n_real << " real + " << t.n_synthetic << " synthetic -> " << o.out << "\n";
}

void cmd_make_toy(const Options& o) {
    std::vector<std::pair<std::string, int>> counts;
    for (const auto& c : o.counts) {
        const auto eq = c.find('=');
        if (eq == std::string::npos) throw ConfigError("--count entries look like class=N, got '" + c + "'");
        counts.emplace_back(c.substr(0, eq), std::stoi(c.substr(eq + 1)));
    }
    const auto n = generation::write_stub_corpus(o.out, counts, o.seed, o.resolution);
    std::cout << n << " images -> " << o.out << "\n";
}

// --------------------------------------------------------------------------
// prompts

void cmd_prompts_validate(const Options& o) {
    const auto lib = library_from(o.prompts_file);
    const auto rep = prompts::validate_library(lib, registry_from(o.classes));
    for (const auto& m : rep.missing) std::cout << "missing: " << m << "\n";
    for (const auto& u : rep.unknown) std::cout << "unknown: " << u << "\n";
    for (const auto& e : rep.empty) std::cout << "empty: " << e << "\n";
    for (const auto& [a, b] : rep.duplicates) std::cout << "duplicate: " << a << " / " << b << "\n";
    if (!rep.valid()) throw ConfigError("prompt library failed validation");
    std::cout << "ok (version " << lib.version() << ")\n";
}

void cmd_prompts_show(const Options& o) {
    std::cout << library_from(o.prompts_file).rendered(o.cls) << "\n";
}

void cmd_prompts_init(const Options& o) {
    prompts::save_library(make_parent(o.out), prompts::default_library());
    std::cout << "wrote " << o.out << "\n";
}

// --------------------------------------------------------------------------
// lora-train

void cmd_lora_train(const Options& o) {
    json cfg = {{"class", o.cls},       {"shots", o.shots}, {"rank", o.rank},       {"alpha", o.alpha},
                {"steps", o.steps},     {"lr", o.lora_lr},  {"d_model", o.d_model}, {"heads", o.heads},
                {"unet_only", o.unet_only}};
    cfg = overlay(cfg, o.config);
    const auto m = dataset::read_manifest(o.manifest);
    const std::string cls = cfg["class"];
    const auto sel = dataset::select_few_shot(m, cls, cfg["shots"].get<int>(), o.seed);
    const auto lib = library_from(o.prompts_file);
    const int d = cfg["d_model"];
    const std::string prompt = lib.rendered(cls);
    std::vector<lora::DenoisingExample> data;
    for (const auto& r : sel.records) data.push_back({lora::image_tokens(load_image(r.path, 64), d), lora::prompt_tokens(prompt, d)});

    const lora::ReferenceModel model(d, cfg["heads"].get<int>(), kReferenceModelSeed);
    std::vector<lora::AttentionTargetSpec> specs;
    if (cfg["unet_only"].get<bool>()) {
        specs.push_back({});
    } else {
        specs = lora::AttentionTargetSpec::all_attention();
    }
    const auto names = lora::resolve_targets(specs, model.projection_names());
    std::vector<lora::TargetShape> shapes;
    for (const auto& s : model.projection_shapes()) {
        if (std::find(names.begin(), names.end(), s.name) != names.end()) shapes.push_back(s);
    }
    auto adapter = lora::init_adapter(shapes, cfg["rank"].get<int>(), cfg["alpha"].get<float>(), o.seed);
    lora::TrainAdapterOptions opts;
    opts.steps = cfg["steps"];
    opts.learning_rate = cfg["lr"];
    opts.seed = derive_seed(o.seed, {1});
    const float before = lora::evaluate_denoising_loss(model, adapter, data, o.seed, 64);
    auto res = lora::train_adapter(model, adapter, data, opts);
    const float after = lora::evaluate_denoising_loss(model, res.adapter, data, o.seed, 64);
    lora::save_adapter(make_parent(o.out), res.adapter);
    std::printf("%s: %zu shots, denoising loss %.6f -> %.6f, sha256 %s\n", cls.c_str(), sel.records.size(), before,
                after, sha256_file(o.out).c_str());
}

// --------------------------------------------------------------------------
// generate

void cmd_generate(const Options& o, CLI::App& sub) {
    json cfg = {{"class", o.cls},         {"count", o.count},   {"backend", o.backend},
                {"resolution", sub.count("--resolution") ? o.resolution : 512}, {"mode", o.mode}, {"steps", 30},
                {"guidance_scale", 7.5},  {"strength", 0.7},    {"run_id", o.run_id},
                {"backend_url", nullptr}};
    cfg = overlay(cfg, o.config);
    const std::string cls = cfg["class"];
    const auto reg = registry_from(o.classes);
    generation::GenerationRequest req;
    req.cls = reg.find(cls);
    req.count = cfg["count"];
    req.seed = o.seed;
    req.resolution = cfg["resolution"];
    req.mode = generation::parse_mode(cfg["mode"].get<std::string>());
    req.sampler = {cfg["steps"].get<int>(), cfg["guidance_scale"].get<double>(), cfg["strength"].get<double>()};
    for (const auto& p : o.init_images) req.init_images.emplace_back(p);

    std::unique_ptr<generation::GenerationBackend> backend;
    const std::string which = cfg["backend"];
    if (which == "stub") {
        backend = std::make_unique<generation::StubBackend>();
    } else if (which == "service" && cfg["backend_url"].is_string()) {
        backend = std::make_unique<generation::ServiceBackend>(generation::ServiceOptions{cfg["backend_url"].get<std::string>()});
    } else if (which == "service") {
        backend = std::make_unique<generation::ServiceBackend>(generation::ServiceBackend::from_environment());
    } else {
        throw ConfigError("unknown backend '" + which + "'");
    }
    std::optional<lora::LoraAdapter> adapter;
    if (!o.adapter.empty()) adapter = lora::load_adapter(o.adapter);
    const auto lib = library_from(o.prompts_file);
    const auto batch = generation::generate_to_directory(*backend, req, lib.rendered(cls), adapter ? &*adapter : nullptr,
                                                         o.out, cfg["run_id"].get<std::string>(), o.resume);
    std::printf("%d images of %s via %s in %.2fs -> %s\n", req.count, cls.c_str(), batch.backend_id.c_str(),
                batch.wall_time, o.out.c_str());
}

// --------------------------------------------------------------------------
// train / evaluate

training::TrainConfig train_config(const Options& o, CLI::App& sub) {
    training::TrainConfig c;
    c.seed = o.seed;
    c.loss_mode = training::parse_loss_mode(o.loss_mode);
    c.lambda1 = o.lambda1;
    c.total_epochs = o.epochs;
    c.warmup_epochs = sub.count("--warmup") ? o.warmup : std::min(c.warmup_epochs, o.epochs - 1);
    c.lr_init = o.lr;
    c.batch_train = o.batch;
    json j = json::parse(training::config_to_json(c));
    if (!o.config.empty()) {
        json file = overlay(json::object(), o.config);
        if (file.contains("train")) file = file["train"];
        j.merge_patch(file);
    }
    return training::config_from_json(j.dump());
}

void cmd_train(const Options& o, CLI::App& sub) {
    auto m = dataset::read_manifest(o.manifest);
    bool assigned = false;
    for (const auto& r : m.records()) assigned = assigned || r.split != dataset::Split::unassigned;
    if (!assigned) {
        if (o.fold < 0) throw ConfigError("manifest has no split; pass --fold");
        const auto folds = dataset::stratified_kfold(m, o.k, parse_fractions(o.fractions), o.seed);
        if (o.fold >= o.k) throw ConfigError("--fold must be below --k");
        m = dataset::apply_assignment(m, folds[static_cast<std::size_t>(o.fold)]);
    } else if (o.fold >= 0) {
        for (const auto& r : m.records()) {
            if (r.fold && *r.fold != o.fold) {
                throw ConfigError("manifest carries fold " + std::to_string(*r.fold) + ", not " + std::to_string(o.fold));
            }
        }
    }
    training::ClassifierSpec spec;
    spec.family = training::parse_family(o.family);
    spec.num_classes = static_cast<int>(m.registry().size());
    spec.resolution = o.resolution;
    spec.width = o.width;
    if (!o.pretrained.empty()) spec.pretrained_backbone = o.pretrained;
    if (!o.config.empty()) {
        json file = overlay(json::object(), o.config);
        if (file.contains("classifier")) {
            json s = json::parse(training::spec_to_json(spec));
            s.merge_patch(file["classifier"]);
            spec = training::spec_from_json(s.dump());
        }
    }
    if (spec.family == training::Family::contrastive_prompt && spec.class_prompts.empty()) {
        const auto lib = library_from(o.prompts_file);
        for (const auto& name : m.registry().names()) {
            spec.class_prompts.push_back(lib.find(name) ? lib.rendered(name) : name);
        }
    }
    const auto cfg = train_config(o, sub);
    const auto res = training::train_classifier(spec, m, cfg);
    for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
    training::save_checkpoint(make_parent(o.out), res, cfg);
    if (!o.log.empty()) write_text(o.log, training::epoch_csv(res.epochs));
    const auto& best = res.epochs[static_cast<std::size_t>(res.best_epoch - 1)];
    std::printf("best epoch %d: val acc %.4f, val macro-F1 %.4f -> %s\n", res.best_epoch, best.val_acc, best.val_f1,
                o.out.c_str());
}

void cmd_evaluate(const Options& o) {
    const auto ckpt = training::load_checkpoint(o.checkpoint);
    const auto m = dataset::read_manifest(o.manifest);
    const auto ev = training::evaluate(ckpt.model, m, dataset::parse_split(o.split));
    const auto rep = metrics::make_report(m.registry().names(), ev.truth, ev.predicted, ev.probabilities);
    metrics::write_report_json(make_parent(o.out), rep);
    std::printf("%s: accuracy %.4f, macro-F1 %.4f, AUC %.4f -> %s\n", o.split.c_str(), rep.accuracy, rep.macro_f1,
                rep.mean_auc, o.out.c_str());
}

// --------------------------------------------------------------------------
// report

std::vector<metrics::MetricsReport> read_reports(const std::string& files) {
    std::vector<metrics::MetricsReport> out;
    for (const auto& f : split_list(files)) out.push_back(metrics::read_report_json(f));
    if (out.empty()) throw ConfigError("no report files given");
    return out;
}

// --row MODEL:SPLIT:DATASET:a.json,b.json   --point N:a.json,b.json
void cmd_report(const Options& o) {
    experiments::ReportTable table;
    for (const auto& row : o.rows) {
        std::vector<std::string> parts;
        std::size_t start = 0;
        for (int i = 0; i < 3; ++i) {
            const auto colon = row.find(':', start);
            if (colon == std::string::npos) throw ConfigError("--row looks like MODEL:SPLIT:DATASET:files, got " + row);
            parts.push_back(row.substr(start, colon - start));
            start = colon + 1;
        }
        const auto agg = metrics::aggregate_folds(read_reports(row.substr(start)));
        table.rows.push_back({parts[0], parts[1], parts[2], agg.accuracy_stat, agg.macro_f1_stat, agg.mean_auc_stat});
    }
    std::vector<experiments::SweepPoint> points;
    for (const auto& p : o.points) {
        const auto colon = p.find(':');
        if (colon == std::string::npos) throw ConfigError("--point looks like N:files, got " + p);
        experiments::SweepPoint sp;
        sp.per_class = std::stoul(p.substr(0, colon));
        sp.folds = read_reports(p.substr(colon + 1));
        sp.test = metrics::aggregate_folds(sp.folds);
        points.push_back(std::move(sp));
    }
    std::sort(points.begin(), points.end(), [](const auto& a, const auto& b) { return a.per_class < b.per_class; });
    if (table.rows.empty() && points.empty()) throw ConfigError("report needs --row or --point");
    if (!table.rows.empty()) {
        for (const auto& p : experiments::emit_report(table, {experiments::Format::csv, experiments::Format::text}, o.out)) {
            std::cout << p.string() << "\n";
        }
        std::cout << experiments::table_text(table);
    }
    if (!points.empty()) {
        const fs::path plot = fs::path(o.out) / "sweep.svg";
        write_text(plot, experiments::sweep_svg(points));
        std::cout << plot.string() << "\n";
    }
}

// --------------------------------------------------------------------------
// run / sweep / rerun

experiments::ExperimentConfig experiment_config(const Options& o, bool sweep) {
    experiments::ExperimentConfig c;
    json j = json::parse(experiments::config_to_json(c));
    j["seed"] = o.seed;
    if (!o.out.empty()) j["output_dir"] = o.out;
    if (!o.root.empty()) j["real_root"] = o.root;
    if (!o.classes.empty()) j["classes"] = split_list(o.classes);
    if (!o.regime.empty()) j["regime"] = o.regime;
    if (!o.synth_root.empty()) j["synthetic_root"] = o.synth_root;
    j["synthetic_per_class"] = o.per_class;
    if (!o.schedule.empty()) {
        std::vector<std::size_t> s;
        for (const auto& v : split_list(o.schedule)) s.push_back(std::stoul(v));
        j["schedule"] = s;
    }
    j["folds"] = o.k;
    j["jobs"] = o.jobs;
    j["backend"] = o.backend;
    if (o.gen_resolution > 0) j["generation"]["resolution"] = o.gen_resolution;
    j["synthetic_eval"] = o.allow_synthetic_eval;
    j = overlay(j, o.config);
    if (sweep && !j.contains("regime")) j["regime"] = "mixed";
    return experiments::config_from_json(j.dump());
}

experiments::RunHooks progress() {
    experiments::RunHooks h;
    h.on_fold_start = [](std::size_t per_class, int fold) {
        std::fprintf(stderr, "[%zu/class] fold %d\n", per_class, fold);
    };
    return h;
}

void cmd_run(const Options& o) {
    const auto r = experiments::run_regime(experiment_config(o, false), progress());
    std::cout << experiments::table_text(r.table);
}

void cmd_sweep(const Options& o) {
    auto c = experiment_config(o, true);
    if (c.regime == experiments::Regime::real_only) c.regime = experiments::Regime::mixed;
    const auto r = experiments::run_scaling_sweep(c, progress());
    std::cout << experiments::table_text(r.table) << r.plot.string() << "\n";
}

void cmd_rerun(const Options& o) {
    experiments::rerun(o.manifest, o.out);
    std::cout << "re-executed into " << o.out << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Synthetic blood-cell image augmentation toolkit"};
    app.require_subcommand(1);
    Options o;

    auto seed_opt = [&](CLI::App* s) { s->add_option("--seed", o.seed, "random seed")->required(); };
    auto config_opt = [&](CLI::App* s) { s->add_option("--config", o.config, "JSON file overriding flags"); };

    auto* ds = app.add_subcommand("dataset", "corpus manifests and splits");
    ds->require_subcommand(1);
    auto* scan = ds->add_subcommand("scan", "scan a folder-per-class corpus");
    scan->add_option("--root", o.root)->required();
    scan->add_option("--classes", o.classes, "comma-separated class names (default: the 15 AML classes)");
    scan->add_option("--origin", o.origin);
    scan->add_option("--out", o.out)->required();
    auto* split = ds->add_subcommand("split", "stratified k-fold split");
    split->add_option("--manifest", o.manifest)->required();
    split->add_option("--k", o.k);
    split->add_option("--fractions", o.fractions);
    split->add_option("--scheme", o.scheme)->check(CLI::IsMember({"rotated_disjoint", "independent"}));
    split->add_option("--out", o.out, "output directory")->required();
    seed_opt(split);
    auto* merge = ds->add_subcommand("merge-synth", "append synthetic images to a split manifest");
    merge->add_option("--manifest", o.manifest)->required();
    merge->add_option("--synthetic-root", o.synth_root)->required();
    merge->add_option("--per-class", o.per_class)->required();
    merge->add_flag("--allow-synthetic-eval", o.allow_synthetic_eval);
    merge->add_option("--fractions", o.fractions);
    merge->add_option("--out", o.out)->required();
    auto* toy = ds->add_subcommand("make-toy", "write a stub-rendered toy corpus");
    toy->add_option("--count", o.counts, "class=N, repeatable")->required();
    toy->add_option("--resolution", o.resolution);
    toy->add_option("--out", o.out)->required();
    seed_opt(toy);

    auto* pr = app.add_subcommand("prompts", "prompt library");
    pr->require_subcommand(1);
    auto* pv = pr->add_subcommand("validate");
    pv->add_option("--file", o.prompts_file);
    pv->add_option("--classes", o.classes);
    auto* ps = pr->add_subcommand("show");
    ps->add_option("class", o.cls)->required();
    ps->add_option("--file", o.prompts_file);
    auto* pi = pr->add_subcommand("init", "write the built-in library to a file");
    pi->add_option("--out", o.out)->required();

    auto* lt = app.add_subcommand("lora-train", "fit a class adapter on few-shot images");
    lt->add_option("--manifest", o.manifest)->required();
    lt->add_option("--class", o.cls)->required();
    lt->add_option("--shots", o.shots);
    lt->add_option("--rank", o.rank);
    lt->add_option("--alpha", o.alpha);
    lt->add_option("--steps", o.steps);
    lt->add_option("--lr", o.lora_lr);
    lt->add_option("--d-model", o.d_model);
    lt->add_option("--heads", o.heads);
    lt->add_flag("--unet-only", o.unet_only);
    lt->add_option("--prompts", o.prompts_file);
    lt->add_option("--out", o.out)->required();
    seed_opt(lt);
    config_opt(lt);

    auto* gen = app.add_subcommand("generate", "render synthetic images");
    gen->add_option("--class", o.cls)->required();
    gen->add_option("--count", o.count);
    gen->add_option("--backend", o.backend);
    gen->add_option("--adapter", o.adapter);
    gen->add_option("--resolution", o.resolution);
    gen->add_option("--mode", o.mode);
    gen->add_option("--init-image", o.init_images);
    gen->add_option("--run-id", o.run_id);
    gen->add_flag("--resume", o.resume);
    gen->add_option("--classes", o.classes);
    gen->add_option("--prompts", o.prompts_file);
    gen->add_option("--out", o.out, "corpus root")->required();
    seed_opt(gen);
    config_opt(gen);

    auto* tr = app.add_subcommand("train", "train one classifier");
    tr->add_option("--manifest", o.manifest)->required();
    tr->add_option("--family", o.family)->check(CLI::IsMember({"cnn", "cnn_head", "contrastive", "contrastive_prompt"}));
    tr->add_option("--fold", o.fold);
    tr->add_option("--k", o.k);
    tr->add_option("--fractions", o.fractions);
    tr->add_option("--loss-mode", o.loss_mode);
    tr->add_option("--lambda1", o.lambda1);
    tr->add_option("--epochs", o.epochs);
    tr->add_option("--warmup", o.warmup);
    tr->add_option("--lr", o.lr);
    tr->add_option("--batch", o.batch);
    tr->add_option("--resolution", o.resolution);
    tr->add_option("--width", o.width);
    tr->add_option("--pretrained", o.pretrained, "cnn checkpoint supplying trunk weights");
    tr->add_option("--prompts", o.prompts_file);
    tr->add_option("--log", o.log, "per-epoch CSV");
    tr->add_option("--out", o.out, "checkpoint path")->required();
    seed_opt(tr);
    config_opt(tr);

    auto* ev = app.add_subcommand("evaluate", "score a checkpoint on one split");
    ev->add_option("--checkpoint", o.checkpoint)->required();
    ev->add_option("--manifest", o.manifest)->required();
    ev->add_option("--split", o.split);
    ev->add_option("--out", o.out, "report JSON")->required();

    auto* rp = app.add_subcommand("report", "assemble tables and plots from fold reports");
    rp->add_option("--row", o.rows, "MODEL:SPLIT:DATASET:fold1.json,fold2.json");
    rp->add_option("--point", o.points, "N:fold1.json,fold2.json (sweep plot)");
    rp->add_option("--out", o.out, "output directory")->required();

    auto add_experiment = [&](CLI::App* s) {
        s->add_option("--root", o.root, "real corpus");
        s->add_option("--classes", o.classes);
        s->add_option("--regime", o.regime);
        s->add_option("--synthetic-root", o.synth_root);
        s->add_option("--per-class", o.per_class);
        s->add_option("--folds", o.k);
        s->add_option("--jobs", o.jobs);
        s->add_option("--backend", o.backend);
        s->add_option("--gen-resolution", o.gen_resolution, "size of generated images (default 512)");
        s->add_flag("--allow-synthetic-eval", o.allow_synthetic_eval);
        s->add_option("--out", o.out);
        seed_opt(s);
        config_opt(s);
    };
    auto* run = app.add_subcommand("run", "one regime over all folds");
    add_experiment(run);
    auto* sw = app.add_subcommand("sweep", "synthetic-count scaling sweep");
    add_experiment(sw);
    sw->add_option("--schedule", o.schedule, "comma-separated per-class counts");
    auto* rr = app.add_subcommand("rerun", "re-execute a run from its manifest");
    rr->add_option("--manifest", o.manifest)->required();
    rr->add_option("--out", o.out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (scan->parsed()) cmd_scan(o);
        else if (split->parsed()) cmd_split(o);
        else if (merge->parsed()) cmd_merge(o);
        else if (toy->parsed()) cmd_make_toy(o);
        else if (pv->parsed()) cmd_prompts_validate(o);
        else if (ps->parsed()) cmd_prompts_show(o);
        else if (pi->parsed()) cmd_prompts_init(o);
        else if (lt->parsed()) cmd_lora_train(o);
        else if (gen->parsed()) cmd_generate(o, *gen);
        else if (tr->parsed()) cmd_train(o, *tr);
        else if (ev->parsed()) cmd_evaluate(o);
        else if (rp->parsed()) cmd_report(o);
        else if (run->parsed()) cmd_run(o);
        else if (sw->parsed()) cmd_sweep(o);
        else if (rr->parsed()) cmd_rerun(o);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const lora::ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code(ErrorKind::config);
    } catch (const ContainerError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code(ErrorKind::data);
    } catch (const json::exception& e) {
        std::cerr << "error: bad configuration value: " << e.what() << "\n";
        return exit_code(ErrorKind::config);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
