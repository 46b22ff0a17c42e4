#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

#include "cytodiff/common/image.hpp"

namespace cytodiff::lora {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// Thrown on dimension disagreements between inputs, weights and adapters.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Products of float matrices accumulate in double and are rounded once.
template <typename T>
struct Accumulator {
    using type = T;
};
template <>
struct Accumulator<float> {
    using type = double;
};
template <typename T>
using Acc = typename Accumulator<T>::type;

/// a * b^T with the accumulation type of T.
template <typename T>
Matrix<T> product_t(const Matrix<T>& a, const Matrix<T>& b) {
    if constexpr (std::is_same_v<Acc<T>, T>) {
        return a * b.transpose();
    } else {
        return (a.template cast<Acc<T>>() * b.template cast<Acc<T>>().transpose()).template cast<T>();
    }
}

/// y = W x + b, applied row-wise to a batch (rows of `x` are samples).
template <typename T>
struct BasicLinearProjection {
    std::string name;
    Matrix<T> weight;  // d_out x d_in
    std::optional<Vector<T>> bias;

    int d_out() const { return static_cast<int>(weight.rows()); }
    int d_in() const { return static_cast<int>(weight.cols()); }

    Matrix<T> forward(const Matrix<T>& x) const {
        if (x.cols() != weight.cols()) {
            throw ShapeError(name + ": input width " + std::to_string(x.cols()) + " != d_in " +
                             std::to_string(weight.cols()));
        }
        Matrix<T> y = product_t(x, weight);
        if (bias) y.rowwise() += bias->transpose();
        return y;
    }
};

/// Low-rank pair for one projection: delta W = (alpha / r) * B * A.
template <typename T>
struct BasicLoraTarget {
    Matrix<T> A;  // r x d_in
    Matrix<T> B;  // d_out x r

    bool operator==(const BasicLoraTarget& o) const {
        return A.rows() == o.A.rows() && A.cols() == o.A.cols() && B.rows() == o.B.rows() &&
               B.cols() == o.B.cols() && A == o.A && B == o.B;
    }
};

template <typename T>
struct BasicLoraAdapter {
    int rank = 0;
    T alpha = T(0);
    std::map<std::string, BasicLoraTarget<T>> targets;

    T scale() const { return alpha / static_cast<T>(rank); }

    const BasicLoraTarget<T>* find(const std::string& name) const {
        auto it = targets.find(name);
        return it == targets.end() ? nullptr : &it->second;
    }

    /// (alpha / r) * B * A for one target.
    Matrix<T> delta(const std::string& name) const {
        const auto& t = targets.at(name);
        return scale() * (t.B * t.A);
    }

    bool operator==(const BasicLoraAdapter&) const = default;
};

using LinearProjection = BasicLinearProjection<float>;
using LoraTarget = BasicLoraTarget<float>;
using LoraAdapter = BasicLoraAdapter<float>;

template <typename T>
void check_entry_shapes(const BasicLinearProjection<T>& proj, const BasicLoraTarget<T>& entry) {
    if (entry.A.cols() != proj.weight.cols() || entry.B.rows() != proj.weight.rows() ||
        entry.A.rows() != entry.B.cols()) {
        throw ShapeError(proj.name + ": adapter shapes A " + std::to_string(entry.A.rows()) + "x" +
                         std::to_string(entry.A.cols()) + ", B " + std::to_string(entry.B.rows()) + "x" +
                         std::to_string(entry.B.cols()) + " do not fit weight " + std::to_string(proj.weight.rows()) +
                         "x" + std::to_string(proj.weight.cols()));
    }
}

/// W x + b + scale * B (A x), without materializing the merged weight.
template <typename T>
Matrix<T> adapted_forward(const Matrix<T>& x, const BasicLinearProjection<T>& proj, const BasicLoraTarget<T>& entry,
                          T scale) {
    check_entry_shapes(proj, entry);
    using A = Acc<T>;
    Matrix<T> y = proj.forward(x);
    const Matrix<A> down = x.template cast<A>() * entry.A.template cast<A>().transpose();
    y += (static_cast<A>(scale) * (down * entry.B.template cast<A>().transpose())).template cast<T>();
    return y;
}

/// Projection with weight W + scale * B * A.
template <typename T>
BasicLinearProjection<T> merge(const BasicLinearProjection<T>& proj, const BasicLoraTarget<T>& entry, T scale) {
    check_entry_shapes(proj, entry);
    BasicLinearProjection<T> out = proj;
    using A = Acc<T>;
    out.weight = (proj.weight.template cast<A>() +
                  static_cast<A>(scale) * (entry.B.template cast<A>() * entry.A.template cast<A>()))
                     .template cast<T>();
    return out;
}

/// Inverse of merge: subtracts scale * B * A.
template <typename T>
BasicLinearProjection<T> unmerge(const BasicLinearProjection<T>& proj, const BasicLoraTarget<T>& entry, T scale) {
    check_entry_shapes(proj, entry);
    BasicLinearProjection<T> out = proj;
    using A = Acc<T>;
    out.weight = (proj.weight.template cast<A>() -
                  static_cast<A>(scale) * (entry.B.template cast<A>() * entry.A.template cast<A>()))
                     .template cast<T>();
    return out;
}

struct TargetShape {
    std::string name;
    int d_out = 0;
    int d_in = 0;
};

/// A ~ N(0, init_std^2), B = 0, so a fresh adapter is exactly neutral.
/// Throws ShapeError when rank exceeds min(d_out, d_in) for any target.
LoraAdapter init_adapter(const std::vector<TargetShape>& targets, int rank, float alpha, std::uint64_t seed,
                         float init_std = 0.02f);

// ---------------------------------------------------------------------------
// Target selection

enum class Component { text_encoder, unet };
enum class ProjectionKind { query, key, value, output };

/// Projection names follow "<component>.<layer>.<kind>", where component is
/// "text" or "unet" and kind is one of q, k, v, o.
struct AttentionTargetSpec {
    Component component = Component::unet;
    std::set<ProjectionKind> kinds{ProjectionKind::query, ProjectionKind::key, ProjectionKind::value,
                                   ProjectionKind::output};
    std::string layer_pattern = ".*";  // ECMAScript regex over the layer segment

    /// Both components, all four projection kinds, every layer.
    static std::vector<AttentionTargetSpec> all_attention();
};

/// Names from `available` selected by any of the specs, in input order.
std::vector<std::string> resolve_targets(const std::vector<AttentionTargetSpec>& specs,
                                         const std::vector<std::string>& available);

// ---------------------------------------------------------------------------
// Reference attention scaffold

template <typename T>
struct AttentionCache {
    Matrix<T> x, context, q, k, v, heads;
    std::vector<Matrix<T>> probs;  // one n x m matrix per head
};

template <typename T>
struct AttentionGrads {
    std::map<std::string, Matrix<T>> weight;  // dLoss / dW_eff per projection name
    Matrix<T> dx, dcontext;
};

/// Multi-head attention with Q from `x` and K/V from `context` (pass the
/// same matrix for self-attention), followed by an output projection.
template <typename T>
class BasicAttentionBlock {
public:
    BasicAttentionBlock() = default;
    BasicAttentionBlock(std::string prefix, int d_model, int n_heads, std::uint64_t seed);

    const std::string& prefix() const { return prefix_; }
    int d_model() const { return d_model_; }
    int n_heads() const { return n_heads_; }
    const BasicLinearProjection<T>& q() const { return q_; }
    const BasicLinearProjection<T>& k() const { return k_; }
    const BasicLinearProjection<T>& v() const { return v_; }
    const BasicLinearProjection<T>& o() const { return o_; }
    std::vector<const BasicLinearProjection<T>*> projections() const { return {&q_, &k_, &v_, &o_}; }

    Matrix<T> forward(const Matrix<T>& x, const Matrix<T>& context, const BasicLoraAdapter<T>* adapter = nullptr,
                      AttentionCache<T>* cache = nullptr) const;

    /// Gradients of a scalar loss given dLoss/dOutput and the forward cache.
    AttentionGrads<T> backward(const Matrix<T>& dout, const AttentionCache<T>& cache,
                               const BasicLoraAdapter<T>* adapter) const;

    template <typename U>
    BasicAttentionBlock<U> cast() const;

private:
    template <typename U>
    friend class BasicAttentionBlock;

    Matrix<T> project(const BasicLinearProjection<T>& p, const Matrix<T>& x, const BasicLoraAdapter<T>* a) const;
    Matrix<T> effective_weight(const BasicLinearProjection<T>& p, const BasicLoraAdapter<T>* a) const;

    std::string prefix_;
    int d_model_ = 0;
    int n_heads_ = 1;
    BasicLinearProjection<T> q_, k_, v_, o_;
};

/// One text-encoder self-attention block feeding the context of a two-block
/// denoiser (self-attention then cross-attention). Small enough to train
/// adapters on a CPU while sharing the gradient path of diffusion
/// fine-tuning with adapters in both components.
template <typename T>
class BasicReferenceModel {
public:
    BasicReferenceModel() = default;
    BasicReferenceModel(int d_model, int n_heads, std::uint64_t seed);

    int d_model() const { return text_.d_model(); }
    const BasicAttentionBlock<T>& text_block() const { return text_; }
    const BasicAttentionBlock<T>& unet_self() const { return unet_self_; }
    const BasicAttentionBlock<T>& unet_cross() const { return unet_cross_; }

    std::vector<TargetShape> projection_shapes() const;
    std::vector<std::string> projection_names() const;
    const BasicLinearProjection<T>* find_projection(const std::string& name) const;

    /// Predicted noise for a noised latent sequence conditioned on prompt tokens.
    Matrix<T> predict_noise(const Matrix<T>& noisy, const Matrix<T>& prompt_tokens,
                            const BasicLoraAdapter<T>* adapter) const;

    struct LossAndGrads {
        T loss = T(0);
        std::map<std::string, BasicLoraTarget<T>> grads;  // dLoss/dA, dLoss/dB per adapter target
    };

    /// Mean squared error between predicted and true noise plus analytic
    /// gradients with respect to every adapter matrix.
    LossAndGrads loss_and_grads(const Matrix<T>& noisy, const Matrix<T>& prompt_tokens, const Matrix<T>& noise,
                                const BasicLoraAdapter<T>& adapter) const;

    T loss(const Matrix<T>& noisy, const Matrix<T>& prompt_tokens, const Matrix<T>& noise,
           const BasicLoraAdapter<T>& adapter) const;

    template <typename U>
    BasicReferenceModel<U> cast() const;

private:
    template <typename U>
    friend class BasicReferenceModel;

    BasicAttentionBlock<T> text_, unet_self_, unet_cross_;
};

using AttentionBlock = BasicAttentionBlock<float>;
using ReferenceModel = BasicReferenceModel<float>;

// ---------------------------------------------------------------------------
// Denoising-surrogate adapter training

struct DenoisingExample {
    Matrix<float> latent;         // tokens x d_model, clean image tokens
    Matrix<float> prompt_tokens;  // phrases x d_model
};

/// Fixed random patch embedding: grid x grid cells of mean RGB plus
/// normalized position, projected to d_model.
Matrix<float> image_tokens(const Image& image, int d_model, int grid = 4, std::uint64_t embed_seed = 0x5eed);

/// One token per prompt phrase via the hashed phrase encoder.
Matrix<float> prompt_tokens(const std::string& prompt, int d_model);

struct TrainAdapterOptions {
    int steps = 200;
    float learning_rate = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float epsilon = 1e-8f;
    std::uint64_t seed = 0;
    int diffusion_steps = 1000;  // linear beta schedule 1e-4 .. 0.02
};

struct TrainAdapterResult {
    LoraAdapter adapter;
    std::vector<float> losses;  // one per optimization step
};

/// Adam on the adapter matrices only; the model is taken by const reference
/// and never modified. Throws ShapeError when an adapter target does not
/// exist in the model or no targets are present.
TrainAdapterResult train_adapter(const ReferenceModel& model, LoraAdapter adapter,
                                 const std::vector<DenoisingExample>& data, const TrainAdapterOptions& options);

/// Average denoising loss over a fixed set of (timestep, noise) draws.
float evaluate_denoising_loss(const ReferenceModel& model, const LoraAdapter& adapter,
                              const std::vector<DenoisingExample>& data, std::uint64_t seed, int draws,
                              int diffusion_steps = 1000);

/// Cumulative product of (1 - beta_t) for the linear beta schedule.
std::vector<double> alpha_bar_schedule(int steps);

// ---------------------------------------------------------------------------
// Adapter container

inline constexpr std::uint32_t kAdapterFormatVersion = 1;

std::vector<std::uint8_t> serialize_adapter(const LoraAdapter& adapter);
/// Throws cytodiff::ContainerError with a kind distinguishing bad magic,
/// version mismatch, truncation, shape inconsistency and checksum failure.
LoraAdapter deserialize_adapter(const std::vector<std::uint8_t>& bytes);
void save_adapter(const std::filesystem::path& path, const LoraAdapter& adapter);
LoraAdapter load_adapter(const std::filesystem::path& path);

}  // namespace cytodiff::lora

#include "cytodiff/lora_impl.hpp"
