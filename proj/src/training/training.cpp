#include "cytodiff/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "cytodiff/common/error.hpp"
#include "cytodiff/common/seed.hpp"
#include "cytodiff/metrics.hpp"
#include "json.hpp"

namespace cytodiff::training {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

std::string_view to_string(Family family) {
    return family == Family::cnn_head ? "cnn_head" : "contrastive_prompt";
}

std::string_view to_string(LossMode mode) {
    switch (mode) {
        case LossMode::standard_ce: return "standard_ce";
        case LossMode::weighted_combined: return "weighted_combined";
        case LossMode::equal_treatment: return "equal_treatment";
    }
    return "equal_treatment";
}

Family parse_family(std::string_view text) {
    if (text == "cnn" || text == "cnn_head") return Family::cnn_head;
    if (text == "contrastive" || text == "contrastive_prompt") return Family::contrastive_prompt;
    throw ConfigError("unknown classifier family '" + std::string(text) + "' (expected cnn or contrastive)");
}

LossMode parse_loss_mode(std::string_view text) {
    if (text == "standard" || text == "standard_ce") return LossMode::standard_ce;
    if (text == "weighted" || text == "weighted_combined") return LossMode::weighted_combined;
    if (text == "equal" || text == "equal_treatment") return LossMode::equal_treatment;
    throw ConfigError("unknown loss mode '" + std::string(text) + "' (expected standard, equal or weighted)");
}

void TrainConfig::validate() const {
    if (!(lr_init > 0) || !(lr_min > 0)) throw ConfigError("learning rates must be positive");
    if (lr_min > lr_init) throw ConfigError("lr_min exceeds lr_init");
    if (warmup_epochs < 0 || total_epochs < 1 || warmup_epochs >= total_epochs) {
        throw ConfigError("need 0 <= warmup_epochs < total_epochs (got " + std::to_string(warmup_epochs) + ", " +
                          std::to_string(total_epochs) + ")");
    }
    if (batch_train < 1 || batch_eval < 1) throw ConfigError("batch sizes must be positive");
    if (weight_decay < 0) throw ConfigError("weight decay must be non-negative");
    if (!(lambda1 >= 0.0 && lambda1 <= 1.0)) throw ConfigError("lambda1 must lie in [0, 1]");
}

double combined_loss(double loss_real, double loss_synth, std::int64_t n_real, std::int64_t n_synth, double lambda1) {
    if (n_real < 0 || n_synth < 0 || n_real + n_synth == 0) throw ConfigError("combined loss needs n_real + n_synth >= 1");
    if (!(lambda1 >= 0.0 && lambda1 <= 1.0)) throw ConfigError("lambda1 must lie in [0, 1]");
    if (loss_real < 0 || loss_synth < 0) throw ConfigError("losses must be non-negative");
    const double n = static_cast<double>(n_real + n_synth);
    return lambda1 * (static_cast<double>(n_real) / n * loss_real) +
           (1.0 - lambda1) * (static_cast<double>(n_synth) / n * loss_synth);
}

double cosine_warmup_lr(int epoch, const TrainConfig& c) {
    if (epoch < 0 || epoch > c.total_epochs) {
        throw ConfigError("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(c.total_epochs) + "]");
    }
    if (epoch <= c.warmup_epochs) {
        if (c.warmup_epochs == 0) return c.lr_init;
        return c.lr_init * (static_cast<double>(epoch) / c.warmup_epochs);
    }
    const double progress = static_cast<double>(epoch - c.warmup_epochs) / (c.total_epochs - c.warmup_epochs);
    return c.lr_min + 0.5 * (c.lr_init - c.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

Image ImageCache::get(const fs::path& path, int resolution) {
    const auto key = std::make_pair(path.string(), resolution);
    {
        std::lock_guard lock(mutex_);
        if (auto it = images_.find(key); it != images_.end()) return it->second;
    }
    Image img = load_image(path, resolution);
    std::lock_guard lock(mutex_);
    return images_.emplace(key, std::move(img)).first->second;
}

namespace {

Image fetch(const dataset::ImageRecord& r, int resolution, ImageCache* cache) {
    return cache ? cache->get(r.path, resolution) : load_image(r.path, resolution);
}

int argmax(const Eigen::VectorXd& p) {
    Eigen::Index k = 0;
    p.maxCoeff(&k);
    return static_cast<int>(k);
}

}  // namespace

Evaluation evaluate(const Classifier& model, const dataset::DatasetManifest& manifest, dataset::Split split,
                    ImageCache* cache) {
    const auto idx = manifest.indices_in(split);
    if (idx.empty()) throw DataError("split '" + std::string(dataset::to_string(split)) + "' is empty");
    Evaluation ev;
    ev.probabilities.resize(static_cast<Eigen::Index>(idx.size()), model.spec().num_classes);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto& r = manifest.records()[idx[i]];
        const auto p = model.probabilities(fetch(r, model.spec().resolution, cache));
        ev.probabilities.row(static_cast<Eigen::Index>(i)) = p.transpose();
        ev.truth.push_back(r.label);
        ev.predicted.push_back(argmax(p));
    }
    return ev;
}

TrainResult train_classifier(const ClassifierSpec& spec, const dataset::DatasetManifest& manifest,
                             const dataset::SplitAssignment& split, const TrainConfig& config, ImageCache* cache) {
    return train_classifier(spec, dataset::apply_assignment(manifest, split), config, cache);
}

TrainResult train_classifier(const ClassifierSpec& spec, const dataset::DatasetManifest& manifest,
                             const TrainConfig& config, ImageCache* cache) {
    config.validate();
    spec.validate();
    const int classes = static_cast<int>(manifest.registry().size());
    if (spec.num_classes != classes) {
        throw ConfigError("classifier has " + std::to_string(spec.num_classes) + " outputs but the registry has " +
                          std::to_string(classes) + " classes");
    }
    const auto train_idx = manifest.indices_in(dataset::Split::train);
    if (train_idx.empty()) throw DataError("train split is empty");
    const auto val_idx = manifest.indices_in(dataset::Split::validation);

    TrainResult result;
    std::vector<std::int64_t> per_class(static_cast<std::size_t>(classes), 0);
    std::int64_t n_real = 0, n_synth = 0;
    for (auto i : train_idx) {
        const auto& r = manifest.records()[i];
        ++per_class[static_cast<std::size_t>(r.label)];
        (r.origin == dataset::Origin::real ? n_real : n_synth) += 1;
    }
    std::vector<bool> masked(static_cast<std::size_t>(classes), false);
    for (int k = 0; k < classes; ++k) {
        if (per_class[static_cast<std::size_t>(k)] == 0) {
            masked[static_cast<std::size_t>(k)] = true;
            result.masked_classes.push_back(k);
            result.warnings.push_back("class '" + manifest.registry().at(k).name +
                                      "' has no training samples and is masked from the loss");
        }
    }

    Classifier model(spec, derive_seed(config.seed, {1}));
    const auto trainable = model.trainable();
    std::map<std::string, Eigen::MatrixXf> m1, m2;
    for (const auto& name : trainable) {
        const auto& p = model.parameters().at(name);
        m1[name] = Eigen::MatrixXf::Zero(p.rows(), p.cols());
        m2[name] = Eigen::MatrixXf::Zero(p.rows(), p.cols());
    }

    std::vector<Image> decoded;
    decoded.reserve(train_idx.size());
    for (auto i : train_idx) decoded.push_back(fetch(manifest.records()[i], spec.resolution, cache));

    std::vector<std::size_t> order(train_idx.size());
    double best_f1 = -1.0;
    long step = 0;
    for (int epoch = 1; epoch <= config.total_epochs; ++epoch) {
        EpochStats st;
        st.epoch = epoch;
        st.lr = cosine_warmup_lr(epoch, config);
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::mt19937_64 shuffle_rng(derive_seed(config.seed, {2, static_cast<std::uint64_t>(epoch)}));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double sum_total = 0, sum_real = 0, sum_synth = 0;
        std::int64_t seen_real = 0, seen_synth = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(config.batch_train)) {
            const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(config.batch_train));
            const auto bsize = static_cast<double>(b1 - b0);
            std::int64_t br = 0, bs = 0;
            for (std::size_t j = b0; j < b1; ++j) {
                (manifest.records()[train_idx[order[j]]].origin == dataset::Origin::real ? br : bs) += 1;
            }
            std::map<std::string, Eigen::MatrixXf> grads;
            double batch_real = 0, batch_synth = 0;
            for (std::size_t j = b0; j < b1; ++j) {
                const auto ri = train_idx[order[j]];
                const auto& rec = manifest.records()[ri];
                const bool real = rec.origin == dataset::Origin::real;
                double w = 1.0 / bsize;
                if (config.loss_mode == LossMode::weighted_combined) {
                    const double n = static_cast<double>(n_real + n_synth);
                    w = real ? config.lambda1 * (static_cast<double>(n_real) / n) / static_cast<double>(br)
                             : (1.0 - config.lambda1) * (static_cast<double>(n_synth) / n) / static_cast<double>(bs);
                }
                const Image img = dataset::prepare_sample(decoded[order[j]], rec, ri, config.augmentation, config.seed,
                                                          static_cast<std::uint64_t>(epoch));
                const double l = model.loss_and_backward(img, rec.label, masked, w, grads);
                (real ? batch_real : batch_synth) += l;
            }
            double batch_loss = (batch_real + batch_synth) / bsize;
            if (config.loss_mode == LossMode::weighted_combined) {
                batch_loss = combined_loss(br ? batch_real / static_cast<double>(br) : 0.0,
                                           bs ? batch_synth / static_cast<double>(bs) : 0.0, n_real, n_synth,
                                           config.lambda1);
            }
            sum_total += batch_loss * bsize;
            sum_real += batch_real;
            sum_synth += batch_synth;
            seen_real += br;
            seen_synth += bs;

            ++step;
            const float lr = static_cast<float>(st.lr);
            const float c1 = static_cast<float>(1.0 - std::pow(config.beta1, static_cast<double>(step)));
            const float c2 = static_cast<float>(1.0 - std::pow(config.beta2, static_cast<double>(step)));
            const float b1f = static_cast<float>(config.beta1), b2f = static_cast<float>(config.beta2);
            const float eps = static_cast<float>(config.epsilon), wd = static_cast<float>(config.weight_decay);
            for (const auto& name : trainable) {
                auto& p = model.parameters().at(name);
                auto it = grads.find(name);
                const Eigen::MatrixXf g = it == grads.end() ? Eigen::MatrixXf::Zero(p.rows(), p.cols()) : it->second;
                m1[name] = b1f * m1[name] + (1.0f - b1f) * g;
                m2[name] = b2f * m2[name] + (1.0f - b2f) * g.cwiseProduct(g);
                p.array() -= lr * ((m1[name].array() / c1) / ((m2[name].array() / c2).sqrt() + eps) + wd * p.array());
            }
        }
        st.loss_total = sum_total / static_cast<double>(order.size());
        st.loss_real = seen_real ? sum_real / static_cast<double>(seen_real) : 0.0;
        st.loss_synth = seen_synth ? sum_synth / static_cast<double>(seen_synth) : 0.0;

        if (!val_idx.empty()) {
            const auto ev = evaluate(model, manifest, dataset::Split::validation, cache);
            const auto cm = metrics::ConfusionMatrix::from_predictions(classes, ev.truth, ev.predicted);
            st.val_acc = metrics::accuracy(cm);
            st.val_f1 = metrics::macro_f1(cm);
            if (st.val_f1 > best_f1) {
                best_f1 = st.val_f1;
                result.model = model;
                result.best_epoch = epoch;
            }
        }
        result.epochs.push_back(st);
    }
    if (val_idx.empty()) {
        result.warnings.push_back("validation split is empty; keeping the final epoch");
        result.model = model;
        result.best_epoch = config.total_epochs;
    }
    return result;
}

// ---------------------------------------------------------------------------
// Serialization

std::string spec_to_json(const ClassifierSpec& s) {
    ordered_json j;
    j["family"] = to_string(s.family);
    j["backbone"] = s.backbone;
    j["num_classes"] = s.num_classes;
    j["resolution"] = s.resolution;
    j["width"] = s.width;
    j["embed_dim"] = s.embed_dim;
    j["temperature"] = s.temperature;
    j["class_prompts"] = s.class_prompts;
    j["pretrained_backbone"] = s.pretrained_backbone ? ordered_json(s.pretrained_backbone->string()) : ordered_json(nullptr);
    return j.dump();
}

ClassifierSpec spec_from_json(const std::string& text) {
    try {
        const auto j = ordered_json::parse(text);
        ClassifierSpec s;
        if (j.contains("family")) s.family = parse_family(j["family"].get<std::string>());
        if (j.contains("backbone")) s.backbone = j["backbone"].get<std::string>();
        if (j.contains("num_classes")) s.num_classes = j["num_classes"].get<int>();
        if (j.contains("resolution")) s.resolution = j["resolution"].get<int>();
        if (j.contains("width")) s.width = j["width"].get<int>();
        if (j.contains("embed_dim")) s.embed_dim = j["embed_dim"].get<int>();
        if (j.contains("temperature")) s.temperature = j["temperature"].get<double>();
        if (j.contains("class_prompts")) s.class_prompts = j["class_prompts"].get<std::vector<std::string>>();
        if (j.contains("pretrained_backbone") && !j["pretrained_backbone"].is_null()) {
            s.pretrained_backbone = j["pretrained_backbone"].get<std::string>();
        }
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed classifier spec: ") + e.what());
    }
}

std::string config_to_json(const TrainConfig& c) {
    ordered_json j;
    j["lr_init"] = c.lr_init;
    j["lr_min"] = c.lr_min;
    j["warmup_epochs"] = c.warmup_epochs;
    j["total_epochs"] = c.total_epochs;
    j["batch_train"] = c.batch_train;
    j["batch_eval"] = c.batch_eval;
    j["weight_decay"] = c.weight_decay;
    j["lambda1"] = c.lambda1;
    j["loss_mode"] = to_string(c.loss_mode);
    j["seed"] = c.seed;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["epsilon"] = c.epsilon;
    j["warmup_start"] = "zero";
    const auto& a = c.augmentation;
    j["augmentation"] = {{"rotation_degrees", a.rotation_degrees},
                         {"horizontal_flip", a.horizontal_flip},
                         {"vertical_flip", a.vertical_flip},
                         {"brightness", a.color_jitter.brightness},
                         {"contrast", a.color_jitter.contrast},
                         {"saturation", a.color_jitter.saturation},
                         {"hue", a.color_jitter.hue}};
    return j.dump();
}

TrainConfig config_from_json(const std::string& text) {
    try {
        const auto j = ordered_json::parse(text);
        TrainConfig c;
        auto get = [&](const char* key, auto& out) {
            if (j.contains(key)) out = j[key].get<std::decay_t<decltype(out)>>();
        };
        get("lr_init", c.lr_init);
        get("lr_min", c.lr_min);
        get("warmup_epochs", c.warmup_epochs);
        get("total_epochs", c.total_epochs);
        get("batch_train", c.batch_train);
        get("batch_eval", c.batch_eval);
        get("weight_decay", c.weight_decay);
        get("lambda1", c.lambda1);
        if (j.contains("loss_mode")) c.loss_mode = parse_loss_mode(j["loss_mode"].get<std::string>());
        get("seed", c.seed);
        get("beta1", c.beta1);
        get("beta2", c.beta2);
        get("epsilon", c.epsilon);
        if (j.contains("augmentation")) {
            const auto& a = j["augmentation"];
            auto& p = c.augmentation;
            if (a.contains("rotation_degrees")) p.rotation_degrees = a["rotation_degrees"].get<double>();
            if (a.contains("horizontal_flip")) p.horizontal_flip = a["horizontal_flip"].get<double>();
            if (a.contains("vertical_flip")) p.vertical_flip = a["vertical_flip"].get<double>();
            if (a.contains("brightness")) p.color_jitter.brightness = a["brightness"].get<double>();
            if (a.contains("contrast")) p.color_jitter.contrast = a["contrast"].get<double>();
            if (a.contains("saturation")) p.color_jitter.saturation = a["saturation"].get<double>();
            if (a.contains("hue")) p.color_jitter.hue = a["hue"].get<double>();
        }
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed training config: ") + e.what());
    }
}

namespace {

ordered_json stats_json(const EpochStats& s) {
    return {{"epoch", s.epoch},           {"lr", s.lr},         {"loss_total", s.loss_total},
            {"loss_real", s.loss_real},   {"loss_synth", s.loss_synth}, {"val_acc", s.val_acc},
            {"val_f1", s.val_f1}};
}

}  // namespace

void save_checkpoint(const fs::path& path, const TrainResult& result, const TrainConfig& config) {
    TensorFile f = result.model.to_tensor_file();
    ordered_json meta;
    meta["spec"] = ordered_json::parse(spec_to_json(result.model.spec()));
    meta["config"] = ordered_json::parse(config_to_json(config));
    meta["best_epoch"] = result.best_epoch;
    ordered_json epochs = ordered_json::array();
    for (const auto& s : result.epochs) epochs.push_back(stats_json(s));
    meta["epochs"] = epochs;
    meta["masked_classes"] = result.masked_classes;
    meta["warnings"] = result.warnings;
    f.metadata = meta.dump();
    save_tensor_file(path, f);
}

TrainResult load_checkpoint(const fs::path& path) {
    TensorFile f = load_tensor_file(path);
    TrainResult r;
    try {
        const auto meta = ordered_json::parse(f.metadata);
        r.best_epoch = meta.at("best_epoch").get<int>();
        for (const auto& e : meta.at("epochs")) {
            r.epochs.push_back({e.at("epoch").get<int>(), e.at("lr").get<double>(), e.at("loss_total").get<double>(),
                                e.at("loss_real").get<double>(), e.at("loss_synth").get<double>(),
                                e.at("val_acc").get<double>(), e.at("val_f1").get<double>()});
        }
        r.masked_classes = meta.at("masked_classes").get<std::vector<int>>();
        r.warnings = meta.at("warnings").get<std::vector<std::string>>();
        f.metadata = meta.at("spec").dump();
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint metadata is malformed: " + std::string(e.what()));
    }
    r.model = Classifier::from_tensor_file(f);
    return r;
}

std::string epoch_csv(const std::vector<EpochStats>& stats) {
    std::string out = "epoch,lr,loss_total,loss_real,loss_synth,val_acc,val_f1\n";
    char buf[256];
    for (const auto& s : stats) {
        std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", s.epoch, s.lr, s.loss_total,
                      s.loss_real, s.loss_synth, s.val_acc, s.val_f1);
        out += buf;
    }
    return out;
}

}  // namespace cytodiff::training
