#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cytodiff/common/image.hpp"

namespace cytodiff::metrics {

/// Rows are true classes, columns predicted classes.
class ConfusionMatrix {
public:
    ConfusionMatrix() = default;
    explicit ConfusionMatrix(int classes);
    /// Throws DataError on a non-square matrix or negative counts.
    static ConfusionMatrix from_counts(std::vector<std::vector<std::int64_t>> counts);
    static ConfusionMatrix from_predictions(int classes, const std::vector<int>& truth, const std::vector<int>& predicted);

    int classes() const { return static_cast<int>(counts_.size()); }
    std::int64_t at(int truth, int predicted) const { return counts_[truth][predicted]; }
    void add(int truth, int predicted, std::int64_t n = 1);
    std::int64_t total() const;
    const std::vector<std::vector<std::int64_t>>& counts() const { return counts_; }

    ConfusionMatrix& operator+=(const ConfusionMatrix& other);
    bool operator==(const ConfusionMatrix&) const = default;

private:
    std::vector<std::vector<std::int64_t>> counts_;
};

double accuracy(const ConfusionMatrix& cm);

/// Per-class F1, zero when precision + recall is zero.
std::vector<double> per_class_f1(const ConfusionMatrix& cm);
double macro_f1(const ConfusionMatrix& cm);

struct AucResult {
    std::map<int, double> per_class;  // only classes with both positives and negatives
    std::vector<int> excluded;        // classes lacking positives or negatives
    double mean = 0.0;                // macro mean over per_class
};

/// One-vs-rest Mann-Whitney AUC with half credit for ties. `probabilities` is
/// N x C with rows summing to 1.
AucResult auc_ovr(const Eigen::MatrixXd& probabilities, const std::vector<int>& truth);

struct FeatureDistribution {
    Eigen::VectorXd mean;
    Eigen::MatrixXd covariance;
    std::int64_t count = 0;

    /// Sample mean and unbiased covariance of the rows of `features`.
    static FeatureDistribution fit(const Eigen::MatrixXd& features);
};

/// Squared mean distance plus the covariance trace term. Throws DataError when
/// an input covariance has an eigenvalue below -1e-6.
double frechet_distance(const FeatureDistribution& a, const FeatureDistribution& b);

struct FidResult {
    double value = 0.0;
    std::vector<std::string> warnings;
};

FidResult fid(const Eigen::MatrixXd& real_features, const Eigen::MatrixXd& synth_features, int min_count = 1000);

/// Image embedding used for FID.
class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual int dimension() const = 0;
    virtual Eigen::MatrixXd embed(const std::vector<Image>& images) const = 0;
};

/// Fixed random linear map of pixels at a fixed resolution.
class RandomProjectionExtractor : public FeatureExtractor {
public:
    RandomProjectionExtractor(int dimension, int resolution, std::uint64_t seed);
    int dimension() const override { return static_cast<int>(projection_.rows()); }
    Eigen::MatrixXd embed(const std::vector<Image>& images) const override;

private:
    int resolution_;
    Eigen::MatrixXd projection_;
};

struct MetricStat {
    double mean = 0.0;
    double std = 0.0;  // population standard deviation across folds
};

struct MetricsReport {
    std::vector<std::string> class_names;
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    std::vector<double> per_class_f1;
    std::map<std::string, double> per_class_auc;
    std::vector<std::string> auc_excluded;
    double mean_auc = 0.0;
    ConfusionMatrix confusion;
    std::optional<double> fid;
    int folds = 1;
    MetricStat accuracy_stat, macro_f1_stat, mean_auc_stat;
    std::vector<MetricStat> per_class_f1_stat;
};

MetricsReport make_report(const std::vector<std::string>& class_names, const std::vector<int>& truth,
                          const std::vector<int>& predicted, const Eigen::MatrixXd& probabilities);

/// Fold means with population standard deviation; confusion matrices summed.
MetricsReport aggregate_folds(const std::vector<MetricsReport>& reports);

std::string report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const std::string& text);
void write_report_json(const std::filesystem::path& path, const MetricsReport& report);
MetricsReport read_report_json(const std::filesystem::path& path);

/// Header plus one row; columns Accuracy, F1 macro, AUC and their stds.
std::string report_csv_header();
std::string report_csv_row(const MetricsReport& report);

}  // namespace cytodiff::metrics
