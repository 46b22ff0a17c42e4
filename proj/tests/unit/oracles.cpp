#include "oracles.hpp"

#include <cmath>

namespace cytodiff::testing {

std::vector<std::vector<std::int64_t>> random_confusion(std::mt19937_64& rng, int classes) {
    std::uniform_int_distribution<int> v(0, 30);
    std::bernoulli_distribution zero(0.3);
    std::vector<std::vector<std::int64_t>> m(static_cast<std::size_t>(classes),
                                             std::vector<std::int64_t>(static_cast<std::size_t>(classes)));
    for (auto& row : m) {
        for (auto& x : row) x = zero(rng) ? 0 : v(rng);
    }
    m[0][0] += 1;
    return m;
}

double brute_force_macro_f1(const std::vector<std::vector<std::int64_t>>& counts) {
    const std::size_t c = counts.size();
    double total = 0;
    for (std::size_t k = 0; k < c; ++k) {
        std::int64_t tp = counts[k][k], fp = 0, fn = 0;
        for (std::size_t j = 0; j < c; ++j) {
            if (j == k) continue;
            fp += counts[j][k];
            fn += counts[k][j];
        }
        const double p = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
        const double r = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
        total += p + r == 0 ? 0.0 : 2 * p * r / (p + r);
    }
    return total / static_cast<double>(c);
}

std::pair<Eigen::MatrixXd, std::vector<int>> random_probabilities(std::mt19937_64& rng, int n, int classes,
                                                                  bool ties) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> label(0, classes - 1);
    Eigen::MatrixXd p(n, classes);
    std::vector<int> y(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        y[static_cast<std::size_t>(i)] = label(rng);
        for (int k = 0; k < classes; ++k) {
            double s = u(rng) + (k == y[static_cast<std::size_t>(i)] ? 0.3 : 0.0);
            if (ties) s = std::floor(s * 4) + 1;
            p(i, k) = s;
        }
        p.row(i) /= p.row(i).sum();
    }
    y[0] = 0;
    y[1] = 1;
    return {p, y};
}

double pairwise_auc(const Eigen::MatrixXd& p, const std::vector<int>& y, int k) {
    double credit = 0;
    double pairs = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (y[i] != k) continue;
        for (std::size_t j = 0; j < y.size(); ++j) {
            if (y[j] == k) continue;
            const double si = p(static_cast<Eigen::Index>(i), k), sj = p(static_cast<Eigen::Index>(j), k);
            credit += si > sj ? 1.0 : (si == sj ? 0.5 : 0.0);
            pairs += 1;
        }
    }
    return credit / pairs;
}

metrics::FeatureDistribution random_distribution(std::mt19937_64& rng, int d) {
    std::normal_distribution<double> n;
    Eigen::MatrixXd g(d, d);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = n(rng);
    metrics::FeatureDistribution out;
    out.covariance = g * g.transpose() / d + 0.05 * Eigen::MatrixXd::Identity(d, d);
    out.mean.resize(d);
    for (int i = 0; i < d; ++i) out.mean[i] = n(rng);
    out.count = 1000;
    return out;
}

double newton_schulz_frechet(const metrics::FeatureDistribution& a, const metrics::FeatureDistribution& b) {
    using LMat = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
    const LMat sa = a.covariance.cast<long double>();
    const LMat sb = b.covariance.cast<long double>();
    const LMat m = sa * sb;
    const long double norm = m.norm();
    const auto d = m.rows();
    const LMat eye = LMat::Identity(d, d);
    LMat y = m / norm;
    LMat z = eye;
    for (int it = 0; it < 200; ++it) {
        const LMat t = 0.5L * (3.0L * eye - z * y);
        y = (y * t).eval();
        z = (t * z).eval();
        if ((y * y - m / norm).norm() < 1e-16L) break;
    }
    const long double trace_root = std::sqrt(norm) * y.trace();
    const long double dmu = (a.mean - b.mean).cast<long double>().squaredNorm();
    return static_cast<double>(dmu + sa.trace() + sb.trace() - 2.0L * trace_root);
}

std::pair<double, double> mean_and_population_std(const std::vector<double>& values) {
    long double s = 0, s2 = 0;
    for (double v : values) {
        s += v;
        s2 += static_cast<long double>(v) * v;
    }
    const long double n = static_cast<long double>(values.size());
    const long double mean = s / n;
    long double var = s2 / n - mean * mean;
    if (var < 0) var = 0;
    return {static_cast<double>(mean), static_cast<double>(std::sqrt(var))};
}

}  // namespace cytodiff::testing
