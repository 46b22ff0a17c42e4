#include "cytodiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "cytodiff/common/binary_io.hpp"
#include "cytodiff/common/error.hpp"
#include "json.hpp"

namespace cytodiff::metrics {

using ordered_json = nlohmann::ordered_json;

ConfusionMatrix::ConfusionMatrix(int classes) {
    if (classes < 1) throw DataError("confusion matrix needs at least one class");
    counts_.assign(static_cast<std::size_t>(classes), std::vector<std::int64_t>(static_cast<std::size_t>(classes), 0));
}

ConfusionMatrix ConfusionMatrix::from_counts(std::vector<std::vector<std::int64_t>> counts) {
    for (const auto& row : counts) {
        if (row.size() != counts.size()) throw DataError("confusion matrix must be square");
        for (auto v : row) {
            if (v < 0) throw DataError("confusion matrix has a negative count");
        }
    }
    ConfusionMatrix cm;
    cm.counts_ = std::move(counts);
    return cm;
}

ConfusionMatrix ConfusionMatrix::from_predictions(int classes, const std::vector<int>& truth,
                                                  const std::vector<int>& predicted) {
    if (truth.size() != predicted.size()) throw DataError("truth and prediction lengths differ");
    ConfusionMatrix cm(classes);
    for (std::size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], predicted[i]);
    return cm;
}

void ConfusionMatrix::add(int truth, int predicted, std::int64_t n) {
    if (truth < 0 || truth >= classes() || predicted < 0 || predicted >= classes()) {
        throw DataError("class index out of range for confusion matrix");
    }
    counts_[static_cast<std::size_t>(truth)][static_cast<std::size_t>(predicted)] += n;
}

std::int64_t ConfusionMatrix::total() const {
    std::int64_t t = 0;
    for (const auto& row : counts_) t = std::accumulate(row.begin(), row.end(), t);
    return t;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
    if (other.classes() != classes()) throw DataError("confusion matrices differ in class count");
    for (int i = 0; i < classes(); ++i) {
        for (int j = 0; j < classes(); ++j) counts_[i][j] += other.counts_[i][j];
    }
    return *this;
}

namespace {

void require_nonempty(const ConfusionMatrix& cm) {
    if (cm.classes() == 0 || cm.total() == 0) throw DataError("metric of an empty confusion matrix");
}

}  // namespace

double accuracy(const ConfusionMatrix& cm) {
    require_nonempty(cm);
    std::int64_t diag = 0;
    for (int i = 0; i < cm.classes(); ++i) diag += cm.at(i, i);
    return static_cast<double>(diag) / static_cast<double>(cm.total());
}

std::vector<double> per_class_f1(const ConfusionMatrix& cm) {
    require_nonempty(cm);
    const int c = cm.classes();
    std::vector<double> out(static_cast<std::size_t>(c), 0.0);
    for (int k = 0; k < c; ++k) {
        std::int64_t predicted = 0, actual = 0;
        for (int j = 0; j < c; ++j) {
            predicted += cm.at(j, k);
            actual += cm.at(k, j);
        }
        const double tp = static_cast<double>(cm.at(k, k));
        const double precision = predicted ? tp / static_cast<double>(predicted) : 0.0;
        const double recall = actual ? tp / static_cast<double>(actual) : 0.0;
        if (precision + recall > 0) out[static_cast<std::size_t>(k)] = 2 * precision * recall / (precision + recall);
    }
    return out;
}

double macro_f1(const ConfusionMatrix& cm) {
    const auto f1 = per_class_f1(cm);
    double sum = 0;
    for (double v : f1) sum += v;
    return sum / static_cast<double>(f1.size());
}

AucResult auc_ovr(const Eigen::MatrixXd& probabilities, const std::vector<int>& truth) {
    const auto n = static_cast<std::size_t>(probabilities.rows());
    const int c = static_cast<int>(probabilities.cols());
    if (truth.size() != n) throw DataError("probability rows and label count differ");
    if (n == 0) throw DataError("AUC of an empty sample");
    for (std::size_t i = 0; i < n; ++i) {
        if (truth[i] < 0 || truth[i] >= c) throw DataError("label index out of range for probability matrix");
        const double s = probabilities.row(static_cast<Eigen::Index>(i)).sum();
        if (std::abs(s - 1.0) > 1e-6) {
            throw DataError("probability row " + std::to_string(i) + " sums to " + std::to_string(s));
        }
    }
    if (std::all_of(truth.begin(), truth.end(), [&](int t) { return t == truth.front(); })) {
        throw DataError("all labels are identical; one-vs-rest AUC has no negatives for that class and no positives "
                        "for any other, so the mean is undefined");
    }

    AucResult result;
    std::vector<std::size_t> order(n);
    for (int k = 0; k < c; ++k) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return probabilities(static_cast<Eigen::Index>(a), k) < probabilities(static_cast<Eigen::Index>(b), k);
        });
        // Walk groups of equal score in ascending order; wins count negatives strictly below.
        std::int64_t neg_below = 0, wins2 = 0, positives = 0, negatives = 0;
        for (std::size_t i = 0; i < n;) {
            std::size_t j = i;
            std::int64_t pos_group = 0, neg_group = 0;
            const double s = probabilities(static_cast<Eigen::Index>(order[i]), k);
            while (j < n && probabilities(static_cast<Eigen::Index>(order[j]), k) == s) {
                (truth[order[j]] == k ? pos_group : neg_group) += 1;
                ++j;
            }
            wins2 += 2 * pos_group * neg_below + pos_group * neg_group;
            neg_below += neg_group;
            positives += pos_group;
            negatives += neg_group;
            i = j;
        }
        if (positives == 0 || negatives == 0) {
            result.excluded.push_back(k);
            continue;
        }
        result.per_class[k] = static_cast<double>(wins2) / (2.0 * static_cast<double>(positives) * static_cast<double>(negatives));
    }
    double sum = 0;
    for (const auto& [k, v] : result.per_class) sum += v;
    result.mean = sum / static_cast<double>(result.per_class.size());
    return result;
}

FeatureDistribution FeatureDistribution::fit(const Eigen::MatrixXd& features) {
    if (features.rows() < 2) throw DataError("need at least two feature rows to fit a distribution");
    FeatureDistribution d;
    d.count = features.rows();
    d.mean = features.colwise().mean().transpose();
    const Eigen::MatrixXd centered = features.rowwise() - d.mean.transpose();
    d.covariance = (centered.transpose() * centered) / static_cast<double>(features.rows() - 1);
    d.covariance = 0.5 * (d.covariance + d.covariance.transpose()).eval();
    return d;
}

namespace {

constexpr double kNegativeEigenTolerance = -1e-6;

Eigen::VectorXd clamped_eigenvalues(const Eigen::VectorXd& values, const char* what) {
    const double lowest = values.size() ? values.minCoeff() : 0.0;
    if (lowest < kNegativeEigenTolerance) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.6g", lowest);
        throw DataError(std::string(what) + " is not positive semidefinite (most negative eigenvalue " + buf + ")");
    }
    return values.cwiseMax(0.0);
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    const Eigen::VectorXd vals = clamped_eigenvalues(es.eigenvalues(), what);
    return es.eigenvectors() * vals.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const FeatureDistribution& a, const FeatureDistribution& b) {
    if (a.mean.size() != b.mean.size() || a.covariance.rows() != a.mean.size() ||
        b.covariance.rows() != b.mean.size()) {
        throw DataError("feature dimensions differ");
    }
    const Eigen::MatrixXd root_a = psd_sqrt(a.covariance, "first covariance");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> check_b(0.5 * (b.covariance + b.covariance.transpose()),
                                                           Eigen::EigenvaluesOnly);
    clamped_eigenvalues(check_b.eigenvalues(), "second covariance");

    Eigen::MatrixXd inner = root_a * b.covariance * root_a;
    inner = 0.5 * (inner + inner.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner, Eigen::EigenvaluesOnly);
    const double trace_root = clamped_eigenvalues(es.eigenvalues(), "covariance product").cwiseSqrt().sum();

    const double d = (a.mean - b.mean).squaredNorm() + a.covariance.trace() + b.covariance.trace() - 2.0 * trace_root;
    return std::max(d, 0.0);
}

FidResult fid(const Eigen::MatrixXd& real_features, const Eigen::MatrixXd& synth_features, int min_count) {
    if (real_features.cols() != synth_features.cols()) {
        throw DataError("feature dimension mismatch: " + std::to_string(real_features.cols()) + " vs " +
                        std::to_string(synth_features.cols()));
    }
    FidResult r;
    r.value = frechet_distance(FeatureDistribution::fit(real_features), FeatureDistribution::fit(synth_features));
    if (real_features.rows() < min_count) {
        r.warnings.push_back("real feature count " + std::to_string(real_features.rows()) +
                             " is below minimum count " + std::to_string(min_count));
    }
    if (synth_features.rows() < min_count) {
        r.warnings.push_back("synthetic feature count " + std::to_string(synth_features.rows()) +
                             " is below minimum count " + std::to_string(min_count));
    }
    return r;
}

RandomProjectionExtractor::RandomProjectionExtractor(int dimension, int resolution, std::uint64_t seed)
    : resolution_(resolution) {
    if (dimension < 1 || resolution < 1) throw ConfigError("feature extractor needs positive dimension and resolution");
    const int inputs = resolution * resolution * 3;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(inputs)));
    projection_.resize(dimension, inputs);
    for (Eigen::Index i = 0; i < projection_.size(); ++i) projection_.data()[i] = n(rng);
}

Eigen::MatrixXd RandomProjectionExtractor::embed(const std::vector<Image>& images) const {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(images.size()), projection_.rows());
    Eigen::VectorXd px(projection_.cols());
    for (std::size_t i = 0; i < images.size(); ++i) {
        const Image small = resize_image(images[i], resolution_, resolution_);
        for (Eigen::Index j = 0; j < px.size(); ++j) px[j] = small.pixels[static_cast<std::size_t>(j)] / 255.0;
        out.row(static_cast<Eigen::Index>(i)) = (projection_ * px).transpose();
    }
    return out;
}

MetricsReport make_report(const std::vector<std::string>& class_names, const std::vector<int>& truth,
                          const std::vector<int>& predicted, const Eigen::MatrixXd& probabilities) {
    const int c = static_cast<int>(class_names.size());
    MetricsReport r;
    r.class_names = class_names;
    r.confusion = ConfusionMatrix::from_predictions(c, truth, predicted);
    r.accuracy = accuracy(r.confusion);
    r.per_class_f1 = per_class_f1(r.confusion);
    r.macro_f1 = macro_f1(r.confusion);
    const auto auc = auc_ovr(probabilities, truth);
    for (const auto& [k, v] : auc.per_class) r.per_class_auc[class_names[static_cast<std::size_t>(k)]] = v;
    for (int k : auc.excluded) r.auc_excluded.push_back(class_names[static_cast<std::size_t>(k)]);
    r.mean_auc = auc.mean;
    r.accuracy_stat = {r.accuracy, 0.0};
    r.macro_f1_stat = {r.macro_f1, 0.0};
    r.mean_auc_stat = {r.mean_auc, 0.0};
    for (double f : r.per_class_f1) r.per_class_f1_stat.push_back({f, 0.0});
    return r;
}

namespace {

MetricStat stat_of(const std::vector<double>& values) {
    MetricStat s;
    for (double v : values) s.mean += v;
    s.mean /= static_cast<double>(values.size());
    double var = 0;
    for (double v : values) var += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(var / static_cast<double>(values.size()));
    return s;
}

}  // namespace

MetricsReport aggregate_folds(const std::vector<MetricsReport>& reports) {
    if (reports.empty()) throw DataError("no fold reports to aggregate");
    const auto& first = reports.front();
    for (const auto& r : reports) {
        if (r.class_names != first.class_names) throw DataError("fold reports use different class registries");
    }
    auto collect = [&](auto field) {
        std::vector<double> v;
        for (const auto& r : reports) v.push_back(field(r));
        return stat_of(v);
    };
    MetricsReport out;
    out.class_names = first.class_names;
    out.folds = static_cast<int>(reports.size());
    out.accuracy_stat = collect([](const MetricsReport& r) { return r.accuracy; });
    out.macro_f1_stat = collect([](const MetricsReport& r) { return r.macro_f1; });
    out.mean_auc_stat = collect([](const MetricsReport& r) { return r.mean_auc; });
    out.accuracy = out.accuracy_stat.mean;
    out.macro_f1 = out.macro_f1_stat.mean;
    out.mean_auc = out.mean_auc_stat.mean;
    for (std::size_t k = 0; k < first.class_names.size(); ++k) {
        out.per_class_f1_stat.push_back(collect([&](const MetricsReport& r) { return r.per_class_f1.at(k); }));
        out.per_class_f1.push_back(out.per_class_f1_stat.back().mean);
    }
    for (const auto& name : first.class_names) {
        std::vector<double> v;
        for (const auto& r : reports) {
            if (auto it = r.per_class_auc.find(name); it != r.per_class_auc.end()) v.push_back(it->second);
        }
        if (v.empty()) {
            out.auc_excluded.push_back(name);
        } else {
            out.per_class_auc[name] = stat_of(v).mean;
        }
    }
    out.confusion = first.confusion;
    for (std::size_t i = 1; i < reports.size(); ++i) out.confusion += reports[i].confusion;
    if (std::all_of(reports.begin(), reports.end(), [](const MetricsReport& r) { return r.fid.has_value(); })) {
        out.fid = collect([](const MetricsReport& r) { return *r.fid; }).mean;
    }
    return out;
}

std::string report_to_json(const MetricsReport& r) {
    ordered_json j;
    j["classes"] = r.class_names;
    j["folds"] = r.folds;
    j["Accuracy"] = r.accuracy;
    j["F1 macro"] = r.macro_f1;
    j["AUC"] = r.mean_auc;
    j["AUC averaging"] = "macro";
    j["std"] = {{"Accuracy", r.accuracy_stat.std}, {"F1 macro", r.macro_f1_stat.std}, {"AUC", r.mean_auc_stat.std}};
    ordered_json f1 = ordered_json::object();
    ordered_json f1_std = ordered_json::object();
    for (std::size_t k = 0; k < r.class_names.size(); ++k) {
        f1[r.class_names[k]] = r.per_class_f1.at(k);
        f1_std[r.class_names[k]] = k < r.per_class_f1_stat.size() ? r.per_class_f1_stat[k].std : 0.0;
    }
    j["per_class_F1"] = f1;
    j["per_class_F1_std"] = f1_std;
    ordered_json auc = ordered_json::object();
    for (const auto& name : r.class_names) {
        if (auto it = r.per_class_auc.find(name); it != r.per_class_auc.end()) auc[name] = it->second;
    }
    j["per_class_AUC"] = auc;
    j["AUC excluded"] = r.auc_excluded;
    j["FID"] = r.fid ? ordered_json(*r.fid) : ordered_json(nullptr);
    j["confusion_matrix"] = r.confusion.counts();
    return j.dump(2) + "\n";
}

MetricsReport report_from_json(const std::string& text) {
    try {
        const auto j = ordered_json::parse(text);
        MetricsReport r;
        r.class_names = j.at("classes").get<std::vector<std::string>>();
        r.folds = j.at("folds").get<int>();
        r.accuracy = j.at("Accuracy").get<double>();
        r.macro_f1 = j.at("F1 macro").get<double>();
        r.mean_auc = j.at("AUC").get<double>();
        r.accuracy_stat = {r.accuracy, j.at("std").at("Accuracy").get<double>()};
        r.macro_f1_stat = {r.macro_f1, j.at("std").at("F1 macro").get<double>()};
        r.mean_auc_stat = {r.mean_auc, j.at("std").at("AUC").get<double>()};
        for (const auto& name : r.class_names) {
            const double f = j.at("per_class_F1").at(name).get<double>();
            r.per_class_f1.push_back(f);
            r.per_class_f1_stat.push_back({f, j.at("per_class_F1_std").at(name).get<double>()});
        }
        for (const auto& [name, v] : j.at("per_class_AUC").items()) r.per_class_auc[name] = v.get<double>();
        r.auc_excluded = j.at("AUC excluded").get<std::vector<std::string>>();
        if (!j.at("FID").is_null()) r.fid = j.at("FID").get<double>();
        r.confusion = ConfusionMatrix::from_counts(j.at("confusion_matrix").get<std::vector<std::vector<std::int64_t>>>());
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed metrics report: ") + e.what());
    }
}

void write_report_json(const std::filesystem::path& path, const MetricsReport& report) {
    const auto text = report_to_json(report);
    write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

MetricsReport read_report_json(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return report_from_json(std::string(bytes.begin(), bytes.end()));
}

std::string report_csv_header() { return "Accuracy,F1_macro,AUC,Accuracy_std,F1_macro_std,AUC_std"; }

std::string report_csv_row(const MetricsReport& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", r.accuracy, r.macro_f1, r.mean_auc,
                  r.accuracy_stat.std, r.macro_f1_stat.std, r.mean_auc_stat.std);
    return buf;
}

}  // namespace cytodiff::metrics
