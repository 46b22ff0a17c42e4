#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cytodiff/common/image.hpp"
#include "cytodiff/common/tensor_file.hpp"
#include "cytodiff/dataset.hpp"

namespace cytodiff::training {

enum class Family { cnn_head, contrastive_prompt };
enum class LossMode { standard_ce, weighted_combined, equal_treatment };

std::string_view to_string(Family family);
std::string_view to_string(LossMode mode);
Family parse_family(std::string_view text);    // "cnn", "cnn_head", "contrastive", "contrastive_prompt"
LossMode parse_loss_mode(std::string_view text);  // "standard", "equal", "weighted" or full names

struct ClassifierSpec {
    Family family = Family::cnn_head;
    std::string backbone = "tinyconv";
    int num_classes = 0;
    int resolution = 32;  // input side, divisible by 4
    int width = 8;        // channels of the first conv; the second has twice as many
    // contrastive_prompt only
    int embed_dim = 64;
    double temperature = 0.07;
    std::vector<std::string> class_prompts;  // indexed by class
    // Trunk weights taken from a cnn_head checkpoint instead of random init.
    std::optional<std::filesystem::path> pretrained_backbone;

    /// Throws ConfigError on inconsistent fields.
    void validate() const;
};

struct TrainConfig {
    double lr_init = 1e-4;
    double lr_min = 1e-8;
    int warmup_epochs = 30;
    int total_epochs = 100;
    int batch_train = 64;
    int batch_eval = 1;
    double weight_decay = 1e-8;
    double lambda1 = 0.5;
    LossMode loss_mode = LossMode::equal_treatment;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    dataset::AugmentationPolicy augmentation = dataset::AugmentationPolicy::standard();

    /// Throws ConfigError when an invariant is violated.
    void validate() const;
};

struct EpochStats {
    int epoch = 0;
    double lr = 0.0;
    double loss_total = 0.0;
    double loss_real = 0.0;
    double loss_synth = 0.0;
    double val_acc = 0.0;
    double val_f1 = 0.0;

    bool operator==(const EpochStats&) const = default;
};

/// lambda1 * (n_real / n) * loss_real + (1 - lambda1) * (n_synth / n) * loss_synth
/// with n = n_real + n_synth. Throws ConfigError when n = 0, lambda1 lies
/// outside [0, 1] or a loss is negative.
double combined_loss(double loss_real, double loss_synth, std::int64_t n_real, std::int64_t n_synth, double lambda1);

/// Linear ramp from 0 at epoch 0 to lr_init at warmup_epochs, then cosine
/// decay to lr_min at total_epochs. Throws ConfigError outside [0, total].
double cosine_warmup_lr(int epoch, const TrainConfig& config);

struct ContrastiveResult {
    int label = 0;
    std::vector<double> similarities;   // cosine similarity per class
    std::vector<double> probabilities;  // softmax of similarities / temperature
    bool tie = false;                   // another class shares the top similarity
};

/// Argmax of cosine similarity; ties go to the lowest class index and are
/// flagged. Throws DataError on a dimension mismatch or empty prompt set.
ContrastiveResult contrastive_classify(const Eigen::VectorXf& image_embedding,
                                       const std::vector<Eigen::VectorXf>& prompt_embeddings,
                                       double temperature = 0.07);

/// Small convolutional trunk (two 3x3 conv + ReLU + 2x2 max-pool stages,
/// global average pool) with either a fully-connected class head or a
/// projection scored against frozen prompt embeddings.
class Classifier {
public:
    Classifier() = default;
    Classifier(ClassifierSpec spec, std::uint64_t seed);

    const ClassifierSpec& spec() const { return spec_; }
    std::map<std::string, Eigen::MatrixXf>& parameters() { return params_; }
    const std::map<std::string, Eigen::MatrixXf>& parameters() const { return params_; }
    /// Names updated by the optimizer; the trunk is frozen for the contrastive family.
    std::vector<std::string> trainable() const;

    /// Trunk features of an image already at spec().resolution.
    Eigen::VectorXf features(const Image& image) const;
    Eigen::VectorXf logits(const Image& image) const;
    /// Softmax of the logits.
    Eigen::VectorXd probabilities(const Image& image) const;

    /// Cross-entropy of one sample with masked classes excluded from the
    /// softmax; accumulates weight * dLoss/dParam into `grads`.
    double loss_and_backward(const Image& image, int label, const std::vector<bool>& masked, double weight,
                             std::map<std::string, Eigen::MatrixXf>& grads) const;

    TensorFile to_tensor_file() const;
    static Classifier from_tensor_file(const TensorFile& file);

    bool operator==(const Classifier& other) const;

private:
    struct Cache;
    Eigen::VectorXf forward(const Image& image, Cache* cache) const;

    ClassifierSpec spec_;
    std::map<std::string, Eigen::MatrixXf> params_;
};

/// Decoded, resized images keyed by (path, resolution). Thread-safe.
class ImageCache {
public:
    Image get(const std::filesystem::path& path, int resolution);

private:
    std::mutex mutex_;
    std::map<std::pair<std::string, int>, Image> images_;
};

struct Evaluation {
    std::vector<int> truth;
    std::vector<int> predicted;
    Eigen::MatrixXd probabilities;  // N x C, rows sum to 1
};

/// Runs the model over every record of a split without augmentation.
/// Throws DataError when the split is empty.
Evaluation evaluate(const Classifier& model, const dataset::DatasetManifest& manifest, dataset::Split split,
                    ImageCache* cache = nullptr);

struct TrainResult {
    Classifier model;  // weights of the best validation macro-F1 epoch
    int best_epoch = 0;
    std::vector<EpochStats> epochs;
    std::vector<int> masked_classes;
    std::vector<std::string> warnings;
};

/// Trains for exactly config.total_epochs epochs on the train split of
/// `manifest` (already carrying a split assignment), monitoring the
/// validation split after each epoch.
TrainResult train_classifier(const ClassifierSpec& spec, const dataset::DatasetManifest& manifest,
                             const TrainConfig& config, ImageCache* cache = nullptr);

/// Applies `split` to the manifest first.
TrainResult train_classifier(const ClassifierSpec& spec, const dataset::DatasetManifest& manifest,
                             const dataset::SplitAssignment& split, const TrainConfig& config,
                             ImageCache* cache = nullptr);

/// Named-tensor container with a JSON metadata echo of spec, config and
/// epoch stats.
void save_checkpoint(const std::filesystem::path& path, const TrainResult& result, const TrainConfig& config);
TrainResult load_checkpoint(const std::filesystem::path& path);

/// Header epoch,lr,loss_total,loss_real,loss_synth,val_acc,val_f1.
std::string epoch_csv(const std::vector<EpochStats>& stats);

std::string spec_to_json(const ClassifierSpec& spec);
ClassifierSpec spec_from_json(const std::string& text);
std::string config_to_json(const TrainConfig& config);
TrainConfig config_from_json(const std::string& text);

}  // namespace cytodiff::training
