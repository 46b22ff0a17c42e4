#pragma once

// Template definitions for lora.hpp. Included from there only.

#include <random>

#include "cytodiff/common/seed.hpp"

namespace cytodiff::lora {

namespace detail {

template <typename T>
BasicLinearProjection<T> random_projection(std::string name, int d_out, int d_in, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> w(0.0, 1.0 / std::sqrt(static_cast<double>(d_in)));
    std::normal_distribution<double> b(0.0, 0.02);
    BasicLinearProjection<T> p;
    p.name = std::move(name);
    p.weight.resize(d_out, d_in);
    for (Eigen::Index i = 0; i < p.weight.size(); ++i) p.weight.data()[i] = static_cast<T>(w(rng));
    Vector<T> bias(d_out);
    for (Eigen::Index i = 0; i < bias.size(); ++i) bias[i] = static_cast<T>(b(rng));
    p.bias = std::move(bias);
    return p;
}

template <typename T>
void softmax_rows(Matrix<T>& s) {
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
        const T m = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - m).exp();
        s.row(r) /= s.row(r).sum();
    }
}

template <typename U, typename T>
BasicLinearProjection<U> cast_projection(const BasicLinearProjection<T>& p) {
    BasicLinearProjection<U> out;
    out.name = p.name;
    out.weight = p.weight.template cast<U>();
    if (p.bias) out.bias = p.bias->template cast<U>();
    return out;
}

}  // namespace detail

template <typename U, typename T>
BasicLoraAdapter<U> cast_adapter(const BasicLoraAdapter<T>& a) {
    BasicLoraAdapter<U> out;
    out.rank = a.rank;
    out.alpha = static_cast<U>(a.alpha);
    for (const auto& [name, t] : a.targets) out.targets[name] = {t.A.template cast<U>(), t.B.template cast<U>()};
    return out;
}

template <typename T>
BasicAttentionBlock<T>::BasicAttentionBlock(std::string prefix, int d_model, int n_heads, std::uint64_t seed)
    : prefix_(std::move(prefix)), d_model_(d_model), n_heads_(n_heads) {
    if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) {
        throw ShapeError("d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
    }
    q_ = detail::random_projection<T>(prefix_ + ".q", d_model, d_model, derive_seed(seed, {0}));
    k_ = detail::random_projection<T>(prefix_ + ".k", d_model, d_model, derive_seed(seed, {1}));
    v_ = detail::random_projection<T>(prefix_ + ".v", d_model, d_model, derive_seed(seed, {2}));
    o_ = detail::random_projection<T>(prefix_ + ".o", d_model, d_model, derive_seed(seed, {3}));
}

template <typename T>
Matrix<T> BasicAttentionBlock<T>::project(const BasicLinearProjection<T>& p, const Matrix<T>& x,
                                          const BasicLoraAdapter<T>* a) const {
    if (a) {
        if (const auto* entry = a->find(p.name)) return adapted_forward(x, p, *entry, a->scale());
    }
    return p.forward(x);
}

template <typename T>
Matrix<T> BasicAttentionBlock<T>::effective_weight(const BasicLinearProjection<T>& p,
                                                   const BasicLoraAdapter<T>* a) const {
    if (a) {
        if (const auto* entry = a->find(p.name)) return merge(p, *entry, a->scale()).weight;
    }
    return p.weight;
}

template <typename T>
Matrix<T> BasicAttentionBlock<T>::forward(const Matrix<T>& x, const Matrix<T>& context,
                                          const BasicLoraAdapter<T>* adapter, AttentionCache<T>* cache) const {
    const Matrix<T> q = project(q_, x, adapter);
    const Matrix<T> k = project(k_, context, adapter);
    const Matrix<T> v = project(v_, context, adapter);
    const int dh = d_model_ / n_heads_;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));

    Matrix<T> heads(x.rows(), d_model_);
    std::vector<Matrix<T>> probs;
    for (int h = 0; h < n_heads_; ++h) {
        Matrix<T> s = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * inv_sqrt;
        detail::softmax_rows(s);
        heads.middleCols(h * dh, dh) = s * v.middleCols(h * dh, dh);
        probs.push_back(std::move(s));
    }
    Matrix<T> out = project(o_, heads, adapter);
    if (cache) {
        cache->x = x;
        cache->context = context;
        cache->q = q;
        cache->k = k;
        cache->v = v;
        cache->heads = std::move(heads);
        cache->probs = std::move(probs);
    }
    return out;
}

template <typename T>
AttentionGrads<T> BasicAttentionBlock<T>::backward(const Matrix<T>& dout, const AttentionCache<T>& c,
                                                   const BasicLoraAdapter<T>* adapter) const {
    AttentionGrads<T> g;
    const int dh = d_model_ / n_heads_;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));

    g.weight[o_.name] = dout.transpose() * c.heads;
    const Matrix<T> dheads = dout * effective_weight(o_, adapter);

    Matrix<T> dq(c.q.rows(), c.q.cols()), dk(c.k.rows(), c.k.cols()), dv(c.v.rows(), c.v.cols());
    for (int h = 0; h < n_heads_; ++h) {
        const Matrix<T>& p = c.probs[static_cast<std::size_t>(h)];
        const auto dhh = dheads.middleCols(h * dh, dh);
        const Matrix<T> dp = dhh * c.v.middleCols(h * dh, dh).transpose();
        dv.middleCols(h * dh, dh) = p.transpose() * dhh;
        // softmax backward: dS = P .* (dP - rowsum(dP .* P))
        const Vector<T> row_dot = (dp.array() * p.array()).rowwise().sum();
        Matrix<T> ds = (p.array() * (dp.colwise() - row_dot).array()).matrix() * inv_sqrt;
        dq.middleCols(h * dh, dh) = ds * c.k.middleCols(h * dh, dh);
        dk.middleCols(h * dh, dh) = ds.transpose() * c.q.middleCols(h * dh, dh);
    }
    g.weight[q_.name] = dq.transpose() * c.x;
    g.weight[k_.name] = dk.transpose() * c.context;
    g.weight[v_.name] = dv.transpose() * c.context;
    g.dx = dq * effective_weight(q_, adapter);
    g.dcontext = dk * effective_weight(k_, adapter) + dv * effective_weight(v_, adapter);
    return g;
}

template <typename T>
template <typename U>
BasicAttentionBlock<U> BasicAttentionBlock<T>::cast() const {
    BasicAttentionBlock<U> out;
    out.prefix_ = prefix_;
    out.d_model_ = d_model_;
    out.n_heads_ = n_heads_;
    out.q_ = detail::cast_projection<U>(q_);
    out.k_ = detail::cast_projection<U>(k_);
    out.v_ = detail::cast_projection<U>(v_);
    out.o_ = detail::cast_projection<U>(o_);
    return out;
}

template <typename T>
BasicReferenceModel<T>::BasicReferenceModel(int d_model, int n_heads, std::uint64_t seed)
    : text_("text.attn0", d_model, n_heads, derive_seed(seed, {0})),
      unet_self_("unet.attn0", d_model, n_heads, derive_seed(seed, {1})),
      unet_cross_("unet.attn1", d_model, n_heads, derive_seed(seed, {2})) {}

template <typename T>
std::vector<TargetShape> BasicReferenceModel<T>::projection_shapes() const {
    std::vector<TargetShape> out;
    for (const auto* block : {&text_, &unet_self_, &unet_cross_}) {
        for (const auto* p : block->projections()) out.push_back({p->name, p->d_out(), p->d_in()});
    }
    return out;
}

template <typename T>
std::vector<std::string> BasicReferenceModel<T>::projection_names() const {
    std::vector<std::string> out;
    for (const auto& s : projection_shapes()) out.push_back(s.name);
    return out;
}

template <typename T>
const BasicLinearProjection<T>* BasicReferenceModel<T>::find_projection(const std::string& name) const {
    for (const auto* block : {&text_, &unet_self_, &unet_cross_}) {
        for (const auto* p : block->projections()) {
            if (p->name == name) return p;
        }
    }
    return nullptr;
}

template <typename T>
Matrix<T> BasicReferenceModel<T>::predict_noise(const Matrix<T>& noisy, const Matrix<T>& prompt,
                                                const BasicLoraAdapter<T>* adapter) const {
    const Matrix<T> text = text_.forward(prompt, prompt, adapter) + prompt;
    const Matrix<T> h1 = unet_self_.forward(noisy, noisy, adapter) + noisy;
    return unet_cross_.forward(h1, text, adapter);
}

template <typename T>
T BasicReferenceModel<T>::loss(const Matrix<T>& noisy, const Matrix<T>& prompt, const Matrix<T>& noise,
                               const BasicLoraAdapter<T>& adapter) const {
    const Matrix<T> diff = predict_noise(noisy, prompt, &adapter) - noise;
    return diff.squaredNorm() / static_cast<T>(diff.size());
}

template <typename T>
typename BasicReferenceModel<T>::LossAndGrads BasicReferenceModel<T>::loss_and_grads(
    const Matrix<T>& noisy, const Matrix<T>& prompt, const Matrix<T>& noise, const BasicLoraAdapter<T>& adapter) const {
    for (const auto& [name, entry] : adapter.targets) {
        if (!find_projection(name)) throw ShapeError("adapter target '" + name + "' not found in model");
    }

    AttentionCache<T> c_text, c_self, c_cross;
    const Matrix<T> text = text_.forward(prompt, prompt, &adapter, &c_text) + prompt;
    const Matrix<T> h1 = unet_self_.forward(noisy, noisy, &adapter, &c_self) + noisy;
    const Matrix<T> pred = unet_cross_.forward(h1, text, &adapter, &c_cross);

    const Matrix<T> diff = pred - noise;
    const T n = static_cast<T>(diff.size());
    LossAndGrads out;
    out.loss = diff.squaredNorm() / n;
    const Matrix<T> dpred = diff * (T(2) / n);

    auto g_cross = unet_cross_.backward(dpred, c_cross, &adapter);
    // Residual paths: d(h1) flows into the self block output; d(text) into the text block output.
    auto g_self = unet_self_.backward(g_cross.dx, c_self, &adapter);
    auto g_text = text_.backward(g_cross.dcontext, c_text, &adapter);

    std::map<std::string, Matrix<T>> dw;
    for (auto* g : {&g_cross, &g_self, &g_text}) dw.insert(g->weight.begin(), g->weight.end());

    const T s = adapter.scale();
    for (const auto& [name, entry] : adapter.targets) {
        const Matrix<T>& g = dw.at(name);
        out.grads[name] = {s * (entry.B.transpose() * g), s * (g * entry.A.transpose())};
    }
    return out;
}

template <typename T>
template <typename U>
BasicReferenceModel<U> BasicReferenceModel<T>::cast() const {
    BasicReferenceModel<U> out;
    out.text_ = text_.template cast<U>();
    out.unet_self_ = unet_self_.template cast<U>();
    out.unet_cross_ = unet_cross_.template cast<U>();
    return out;
}

}  // namespace cytodiff::lora
