#include <cmath>
#include <random>

#include "cytodiff/common/error.hpp"
#include "cytodiff/common/seed.hpp"
#include "cytodiff/common/text_embedding.hpp"
#include "cytodiff/training.hpp"

namespace cytodiff::training {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace {

// 3x3, stride 1, zero padding 1. Rows of `x` are pixels (y * w + x), columns channels.
Mat im2col(const Mat& x, int h, int w) {
    const auto c = x.cols();
    Mat col = Mat::Zero(static_cast<Eigen::Index>(h) * w, 9 * c);
    for (int y = 0; y < h; ++y) {
        for (int xx = 0; xx < w; ++xx) {
            const auto row = static_cast<Eigen::Index>(y) * w + xx;
            for (int ky = 0; ky < 3; ++ky) {
                const int sy = y + ky - 1;
                if (sy < 0 || sy >= h) continue;
                for (int kx = 0; kx < 3; ++kx) {
                    const int sx = xx + kx - 1;
                    if (sx < 0 || sx >= w) continue;
                    col.block(row, (ky * 3 + kx) * c, 1, c) = x.row(static_cast<Eigen::Index>(sy) * w + sx);
                }
            }
        }
    }
    return col;
}

Mat col2im(const Mat& col, int h, int w, Eigen::Index c) {
    Mat x = Mat::Zero(static_cast<Eigen::Index>(h) * w, c);
    for (int y = 0; y < h; ++y) {
        for (int xx = 0; xx < w; ++xx) {
            const auto row = static_cast<Eigen::Index>(y) * w + xx;
            for (int ky = 0; ky < 3; ++ky) {
                const int sy = y + ky - 1;
                if (sy < 0 || sy >= h) continue;
                for (int kx = 0; kx < 3; ++kx) {
                    const int sx = xx + kx - 1;
                    if (sx < 0 || sx >= w) continue;
                    x.row(static_cast<Eigen::Index>(sy) * w + sx) += col.block(row, (ky * 3 + kx) * c, 1, c);
                }
            }
        }
    }
    return x;
}

// 2x2 max pool; `arg` records the source row of each output element.
Mat maxpool(const Mat& x, int h, int w, std::vector<Eigen::Index>& arg) {
    const int oh = h / 2, ow = w / 2;
    const auto c = x.cols();
    Mat out(static_cast<Eigen::Index>(oh) * ow, c);
    arg.assign(static_cast<std::size_t>(out.size()), 0);
    for (int y = 0; y < oh; ++y) {
        for (int xx = 0; xx < ow; ++xx) {
            const auto o = static_cast<Eigen::Index>(y) * ow + xx;
            for (Eigen::Index ch = 0; ch < c; ++ch) {
                Eigen::Index best = static_cast<Eigen::Index>(2 * y) * w + 2 * xx;
                for (int dy = 0; dy < 2; ++dy) {
                    for (int dx = 0; dx < 2; ++dx) {
                        const auto src = static_cast<Eigen::Index>(2 * y + dy) * w + 2 * xx + dx;
                        if (x(src, ch) > x(best, ch)) best = src;
                    }
                }
                out(o, ch) = x(best, ch);
                arg[static_cast<std::size_t>(o * c + ch)] = best;
            }
        }
    }
    return out;
}

Mat unpool(const Mat& d, Eigen::Index in_rows, const std::vector<Eigen::Index>& arg) {
    Mat out = Mat::Zero(in_rows, d.cols());
    for (Eigen::Index o = 0; o < d.rows(); ++o) {
        for (Eigen::Index ch = 0; ch < d.cols(); ++ch) out(arg[static_cast<std::size_t>(o * d.cols() + ch)], ch) += d(o, ch);
    }
    return out;
}

Mat to_input(const Image& image, int resolution) {
    if (image.width != resolution || image.height != resolution) {
        throw DataError("classifier expects " + std::to_string(resolution) + "x" + std::to_string(resolution) +
                        " input, got " + std::to_string(image.width) + "x" + std::to_string(image.height));
    }
    Mat x(static_cast<Eigen::Index>(resolution) * resolution, 3);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        for (int c = 0; c < 3; ++c) x(i, c) = image.pixels[static_cast<std::size_t>(i * 3 + c)] / 255.0f - 0.5f;
    }
    return x;
}

Eigen::MatrixXf gaussian(int rows, int cols, double std, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, std);
    Eigen::MatrixXf m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(n(rng));
    return m;
}

}  // namespace

struct Classifier::Cache {
    Mat col1, z1, p1, col2, z2, p2;
    std::vector<Eigen::Index> arg1, arg2;
    Eigen::VectorXf f, e;
    float e_norm = 0;
};

void ClassifierSpec::validate() const {
    if (num_classes < 2) throw ConfigError("classifier needs at least two classes");
    if (resolution < 4 || resolution % 4 != 0) throw ConfigError("classifier resolution must be a multiple of 4");
    if (width < 1) throw ConfigError("classifier width must be positive");
    if (family == Family::contrastive_prompt) {
        if (static_cast<int>(class_prompts.size()) != num_classes) {
            throw ConfigError("contrastive classifier needs one prompt per class (" + std::to_string(num_classes) +
                              "), got " + std::to_string(class_prompts.size()));
        }
        if (embed_dim < 2) throw ConfigError("embedding dimension must be at least 2");
        if (!(temperature > 0)) throw ConfigError("temperature must be positive");
    }
}

Classifier::Classifier(ClassifierSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    const int c1 = spec_.width, c2 = 2 * spec_.width;
    std::mt19937_64 rng(derive_seed(seed, {0xc1a5}));
    params_["conv1.w"] = gaussian(c1, 27, std::sqrt(2.0 / 27), rng);
    params_["conv1.b"] = Eigen::MatrixXf::Zero(c1, 1);
    params_["conv2.w"] = gaussian(c2, 9 * c1, std::sqrt(2.0 / (9 * c1)), rng);
    params_["conv2.b"] = Eigen::MatrixXf::Zero(c2, 1);
    if (spec_.family == Family::cnn_head) {
        params_["fc.w"] = gaussian(spec_.num_classes, c2, std::sqrt(1.0 / c2), rng);
        params_["fc.b"] = Eigen::MatrixXf::Zero(spec_.num_classes, 1);
    } else {
        params_["proj.w"] = gaussian(spec_.embed_dim, c2, std::sqrt(1.0 / c2), rng);
        params_["proj.b"] = Eigen::MatrixXf::Zero(spec_.embed_dim, 1);
        Eigen::MatrixXf prompts(spec_.num_classes, spec_.embed_dim);
        for (int k = 0; k < spec_.num_classes; ++k) {
            const auto e = embed_phrase(spec_.class_prompts[static_cast<std::size_t>(k)], spec_.embed_dim);
            for (int j = 0; j < spec_.embed_dim; ++j) prompts(k, j) = e[static_cast<std::size_t>(j)];
        }
        params_["prompts"] = prompts;
    }
    if (spec_.pretrained_backbone) {
        const TensorFile f = load_tensor_file(*spec_.pretrained_backbone);
        for (const char* name : {"conv1.w", "conv1.b", "conv2.w", "conv2.b"}) {
            auto it = f.tensors.find(name);
            auto& dst = params_.at(name);
            if (it == f.tensors.end() || it->second.shape.size() != 2 || it->second.shape[0] != dst.rows() ||
                it->second.shape[1] != dst.cols()) {
                throw ConfigError("pretrained backbone " + spec_.pretrained_backbone->string() +
                                  " lacks a compatible '" + name + "' tensor");
            }
            for (Eigen::Index i = 0; i < dst.rows(); ++i) {
                for (Eigen::Index j = 0; j < dst.cols(); ++j) {
                    dst(i, j) = it->second.values[static_cast<std::size_t>(i * dst.cols() + j)];
                }
            }
        }
    }
}

std::vector<std::string> Classifier::trainable() const {
    if (spec_.family == Family::cnn_head) return {"conv1.b", "conv1.w", "conv2.b", "conv2.w", "fc.b", "fc.w"};
    return {"proj.b", "proj.w"};
}

Eigen::VectorXf Classifier::forward(const Image& image, Cache* cache) const {
    const int r = spec_.resolution;
    Cache local;
    Cache& c = cache ? *cache : local;
    const auto& w1 = params_.at("conv1.w");
    const auto& w2 = params_.at("conv2.w");
    c.col1 = im2col(to_input(image, r), r, r);
    c.z1 = c.col1 * w1.transpose();
    c.z1.rowwise() += params_.at("conv1.b").col(0).transpose();
    c.p1 = maxpool(c.z1.cwiseMax(0.0f), r, r, c.arg1);
    c.col2 = im2col(c.p1, r / 2, r / 2);
    c.z2 = c.col2 * w2.transpose();
    c.z2.rowwise() += params_.at("conv2.b").col(0).transpose();
    c.p2 = maxpool(c.z2.cwiseMax(0.0f), r / 2, r / 2, c.arg2);
    c.f = c.p2.colwise().mean().transpose();
    if (spec_.family == Family::cnn_head) return params_.at("fc.w") * c.f + params_.at("fc.b").col(0);

    c.e = params_.at("proj.w") * c.f + params_.at("proj.b").col(0);
    c.e_norm = std::max(c.e.norm(), 1e-12f);
    const Eigen::MatrixXf& p = params_.at("prompts");
    const Eigen::VectorXf p_norm = p.rowwise().norm().cwiseMax(1e-12f);
    const Eigen::VectorXf cos = (p * (c.e / c.e_norm)).cwiseQuotient(p_norm);
    return cos / static_cast<float>(spec_.temperature);
}

Eigen::VectorXf Classifier::features(const Image& image) const {
    Cache c;
    forward(image, &c);
    return c.f;
}

Eigen::VectorXf Classifier::logits(const Image& image) const { return forward(image, nullptr); }

Eigen::VectorXd Classifier::probabilities(const Image& image) const {
    const Eigen::VectorXd z = logits(image).cast<double>();
    Eigen::VectorXd p = (z.array() - z.maxCoeff()).exp();
    return p / p.sum();
}

double Classifier::loss_and_backward(const Image& image, int label, const std::vector<bool>& masked, double weight,
                                     std::map<std::string, Eigen::MatrixXf>& grads) const {
    Cache c;
    const Eigen::VectorXf z = forward(image, &c);
    const int k = static_cast<int>(z.size());
    double zmax = -INFINITY;
    for (int i = 0; i < k; ++i) {
        if (!masked[static_cast<std::size_t>(i)]) zmax = std::max(zmax, static_cast<double>(z[i]));
    }
    Eigen::VectorXd p = Eigen::VectorXd::Zero(k);
    for (int i = 0; i < k; ++i) {
        if (!masked[static_cast<std::size_t>(i)]) p[i] = std::exp(static_cast<double>(z[i]) - zmax);
    }
    p /= p.sum();
    const double loss = -std::log(std::max(p[label], 1e-300));
    if (weight == 0.0) return loss;

    Eigen::VectorXd dz_d = p;
    dz_d[label] -= 1.0;
    const Eigen::VectorXf dz = (dz_d * weight).cast<float>();
    auto acc = [&](const std::string& name, const Eigen::MatrixXf& g) {
        auto it = grads.find(name);
        if (it == grads.end()) {
            grads.emplace(name, g);
        } else {
            it->second += g;
        }
    };

    if (spec_.family == Family::contrastive_prompt) {
        const Eigen::MatrixXf& pr = params_.at("prompts");
        const Eigen::VectorXf p_norm = pr.rowwise().norm().cwiseMax(1e-12f);
        const Eigen::VectorXf ehat = c.e / c.e_norm;
        const Eigen::VectorXf dehat = pr.transpose() * dz.cwiseQuotient(p_norm) / static_cast<float>(spec_.temperature);
        const Eigen::VectorXf de = (dehat - ehat * ehat.dot(dehat)) / c.e_norm;
        acc("proj.w", de * c.f.transpose());
        acc("proj.b", de);
        return loss;
    }

    acc("fc.w", dz * c.f.transpose());
    acc("fc.b", dz);
    const Eigen::VectorXf df = params_.at("fc.w").transpose() * dz;
    const int r = spec_.resolution;
    // global average pool
    Mat dp2 = df.transpose().replicate(c.p2.rows(), 1) / static_cast<float>(c.p2.rows());
    Mat dz2 = unpool(dp2, c.z2.rows(), c.arg2).cwiseProduct((c.z2.array() > 0.0f).cast<float>().matrix());
    acc("conv2.w", dz2.transpose() * c.col2);
    acc("conv2.b", dz2.colwise().sum().transpose());
    const Mat dcol2 = dz2 * params_.at("conv2.w");
    const Mat dp1 = col2im(dcol2, r / 2, r / 2, c.p1.cols());
    Mat dz1 = unpool(dp1, c.z1.rows(), c.arg1).cwiseProduct((c.z1.array() > 0.0f).cast<float>().matrix());
    acc("conv1.w", dz1.transpose() * c.col1);
    acc("conv1.b", dz1.colwise().sum().transpose());
    return loss;
}

TensorFile Classifier::to_tensor_file() const {
    TensorFile f;
    f.metadata = spec_to_json(spec_);
    for (const auto& [name, m] : params_) {
        NamedTensor t;
        t.shape = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
        t.values.resize(static_cast<std::size_t>(m.size()));
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            for (Eigen::Index j = 0; j < m.cols(); ++j) t.values[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j);
        }
        f.tensors.emplace(name, std::move(t));
    }
    return f;
}

Classifier Classifier::from_tensor_file(const TensorFile& file) {
    Classifier c;
    c.spec_ = spec_from_json(file.metadata);
    c.spec_.validate();
    ClassifierSpec plain = c.spec_;
    plain.pretrained_backbone.reset();
    const Classifier shape_ref(plain, 0);
    for (const auto& [name, ref] : shape_ref.params_) {
        auto it = file.tensors.find(name);
        if (it == file.tensors.end()) throw DataError("checkpoint lacks tensor '" + name + "'");
        const auto& t = it->second;
        if (t.shape.size() != 2 || t.shape[0] != ref.rows() || t.shape[1] != ref.cols()) {
            throw DataError("checkpoint tensor '" + name + "' has an unexpected shape");
        }
        Eigen::MatrixXf m(ref.rows(), ref.cols());
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = t.values[static_cast<std::size_t>(i * m.cols() + j)];
        }
        c.params_[name] = std::move(m);
    }
    return c;
}

bool Classifier::operator==(const Classifier& other) const {
    if (params_.size() != other.params_.size()) return false;
    for (const auto& [name, m] : params_) {
        auto it = other.params_.find(name);
        if (it == other.params_.end() || it->second.rows() != m.rows() || it->second.cols() != m.cols() ||
            it->second != m) {
            return false;
        }
    }
    return spec_to_json(spec_) == spec_to_json(other.spec_);
}

ContrastiveResult contrastive_classify(const Eigen::VectorXf& image_embedding,
                                       const std::vector<Eigen::VectorXf>& prompt_embeddings, double temperature) {
    if (prompt_embeddings.empty()) throw DataError("no prompt embeddings to compare against");
    if (!(temperature > 0)) throw ConfigError("temperature must be positive");
    ContrastiveResult r;
    const double in = image_embedding.cast<double>().norm();
    for (const auto& p : prompt_embeddings) {
        if (p.size() != image_embedding.size()) {
            throw DataError("embedding dimension mismatch: image " + std::to_string(image_embedding.size()) +
                            ", prompt " + std::to_string(p.size()));
        }
        const double pn = p.cast<double>().norm();
        const double dot = image_embedding.cast<double>().dot(p.cast<double>());
        r.similarities.push_back(in > 0 && pn > 0 ? dot / (in * pn) : 0.0);
    }
    double best = r.similarities[0];
    for (std::size_t k = 1; k < r.similarities.size(); ++k) {
        if (r.similarities[k] > best) {
            best = r.similarities[k];
            r.label = static_cast<int>(k);
        }
    }
    for (std::size_t k = 0; k < r.similarities.size(); ++k) {
        if (static_cast<int>(k) != r.label && r.similarities[k] == best) r.tie = true;
    }
    double sum = 0;
    for (double s : r.similarities) {
        r.probabilities.push_back(std::exp((s - best) / temperature));
        sum += r.probabilities.back();
    }
    for (double& p : r.probabilities) p /= sum;
    return r;
}

}  // namespace cytodiff::training
