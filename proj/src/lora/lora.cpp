#include "cytodiff/lora.hpp"

#include <algorithm>
#include <cstring>
#include <regex>

#include "cytodiff/common/binary_io.hpp"
#include "cytodiff/common/hash.hpp"
#include "cytodiff/common/tensor_file.hpp"
#include "cytodiff/common/text_embedding.hpp"

namespace cytodiff::lora {

LoraAdapter init_adapter(const std::vector<TargetShape>& targets, int rank, float alpha, std::uint64_t seed,
                         float init_std) {
    if (rank < 1) throw ShapeError("rank must be >= 1");
    if (!(alpha > 0.0f)) throw ShapeError("alpha must be positive");
    LoraAdapter adapter;
    adapter.rank = rank;
    adapter.alpha = alpha;
    for (const auto& t : targets) {
        if (rank > std::min(t.d_out, t.d_in)) {
            throw ShapeError("rank " + std::to_string(rank) + " exceeds min(d_out, d_in) = " +
                             std::to_string(std::min(t.d_out, t.d_in)) + " for target '" + t.name + "'");
        }
        // Seeded per target name so the draw does not depend on target order.
        std::mt19937_64 rng(derive_seed(seed, {fnv1a64(t.name)}));
        std::normal_distribution<float> n(0.0f, init_std);
        LoraTarget entry;
        entry.A.resize(rank, t.d_in);
        for (Eigen::Index i = 0; i < entry.A.size(); ++i) entry.A.data()[i] = n(rng);
        entry.B = Matrix<float>::Zero(t.d_out, rank);
        adapter.targets.emplace(t.name, std::move(entry));
    }
    return adapter;
}

std::vector<AttentionTargetSpec> AttentionTargetSpec::all_attention() {
    AttentionTargetSpec text;
    text.component = Component::text_encoder;
    AttentionTargetSpec unet;
    unet.component = Component::unet;
    return {text, unet};
}

std::vector<std::string> resolve_targets(const std::vector<AttentionTargetSpec>& specs,
                                         const std::vector<std::string>& available) {
    std::vector<std::string> out;
    for (const auto& name : available) {
        const auto first = name.find('.');
        const auto last = name.rfind('.');
        if (first == std::string::npos || first == last) continue;
        const auto component = name.substr(0, first);
        const auto layer = name.substr(first + 1, last - first - 1);
        const auto kind_text = name.substr(last + 1);
        std::optional<ProjectionKind> kind;
        if (kind_text == "q") kind = ProjectionKind::query;
        if (kind_text == "k") kind = ProjectionKind::key;
        if (kind_text == "v") kind = ProjectionKind::value;
        if (kind_text == "o") kind = ProjectionKind::output;
        if (!kind) continue;
        for (const auto& spec : specs) {
            if (spec.kinds.empty()) throw ShapeError("attention target spec with no projection kinds");
            const char* wanted = spec.component == Component::text_encoder ? "text" : "unet";
            if (component == wanted && spec.kinds.contains(*kind) &&
                std::regex_match(layer, std::regex(spec.layer_pattern))) {
                out.push_back(name);
                break;
            }
        }
    }
    return out;
}

Matrix<float> image_tokens(const Image& image, int d_model, int grid, std::uint64_t embed_seed) {
    const Image cells = resize_image(image, grid, grid);
    std::mt19937_64 rng(embed_seed);
    std::normal_distribution<float> n(0.0f, 1.0f / std::sqrt(5.0f));
    Matrix<float> proj(5, d_model);
    for (Eigen::Index i = 0; i < proj.size(); ++i) proj.data()[i] = n(rng);

    Matrix<float> features(grid * grid, 5);
    for (int y = 0; y < grid; ++y) {
        for (int x = 0; x < grid; ++x) {
            const auto* px = cells.at(x, y);
            const int row = y * grid + x;
            for (int c = 0; c < 3; ++c) features(row, c) = (px[c] / 255.0f - 0.5f) * 2.0f;
            features(row, 3) = grid > 1 ? 2.0f * x / (grid - 1) - 1.0f : 0.0f;
            features(row, 4) = grid > 1 ? 2.0f * y / (grid - 1) - 1.0f : 0.0f;
        }
    }
    return features * proj;
}

Matrix<float> prompt_tokens(const std::string& prompt, int d_model) {
    const auto phrases = split_phrases(prompt);
    if (phrases.empty()) throw ShapeError("prompt has no phrases");
    Matrix<float> tokens(static_cast<Eigen::Index>(phrases.size()), d_model);
    for (std::size_t i = 0; i < phrases.size(); ++i) {
        const auto e = embed_phrase(phrases[i], d_model);
        for (int j = 0; j < d_model; ++j) tokens(static_cast<Eigen::Index>(i), j) = e[static_cast<std::size_t>(j)];
    }
    return tokens;
}

std::vector<double> alpha_bar_schedule(int steps) {
    std::vector<double> out(static_cast<std::size_t>(steps));
    double prod = 1.0;
    for (int t = 0; t < steps; ++t) {
        const double beta = steps > 1 ? 1e-4 + (0.02 - 1e-4) * t / (steps - 1) : 1e-4;
        prod *= 1.0 - beta;
        out[static_cast<std::size_t>(t)] = prod;
    }
    return out;
}

namespace {

struct NoisedSample {
    Matrix<float> noisy, noise;
};

NoisedSample noise_sample(const Matrix<float>& latent, const std::vector<double>& alpha_bar, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> pick_t(0, alpha_bar.size() - 1);
    const double ab = alpha_bar[pick_t(rng)];
    std::normal_distribution<float> n(0.0f, 1.0f);
    NoisedSample s;
    s.noise.resize(latent.rows(), latent.cols());
    for (Eigen::Index i = 0; i < s.noise.size(); ++i) s.noise.data()[i] = n(rng);
    s.noisy = static_cast<float>(std::sqrt(ab)) * latent + static_cast<float>(std::sqrt(1.0 - ab)) * s.noise;
    return s;
}

void check_targets(const ReferenceModel& model, const LoraAdapter& adapter) {
    if (adapter.targets.empty()) throw ShapeError("adapter has no trainable targets");
    for (const auto& [name, entry] : adapter.targets) {
        const auto* p = model.find_projection(name);
        if (!p) throw ShapeError("adapter target '" + name + "' not found in model");
        check_entry_shapes(*p, entry);
    }
}

}  // namespace

TrainAdapterResult train_adapter(const ReferenceModel& model, LoraAdapter adapter,
                                 const std::vector<DenoisingExample>& data, const TrainAdapterOptions& options) {
    check_targets(model, adapter);
    if (data.empty()) throw ShapeError("no training examples");
    const auto alpha_bar = alpha_bar_schedule(options.diffusion_steps);

    struct Moments {
        Matrix<float> mA, vA, mB, vB;
    };
    std::map<std::string, Moments> moments;
    for (const auto& [name, t] : adapter.targets) {
        moments[name] = {Matrix<float>::Zero(t.A.rows(), t.A.cols()), Matrix<float>::Zero(t.A.rows(), t.A.cols()),
                         Matrix<float>::Zero(t.B.rows(), t.B.cols()), Matrix<float>::Zero(t.B.rows(), t.B.cols())};
    }

    TrainAdapterResult result;
    result.losses.reserve(static_cast<std::size_t>(options.steps));
    for (int step = 0; step < options.steps; ++step) {
        std::mt19937_64 rng(derive_seed(options.seed, {static_cast<std::uint64_t>(step)}));
        const auto& ex = data[static_cast<std::size_t>(step) % data.size()];
        const auto sample = noise_sample(ex.latent, alpha_bar, rng);
        auto lg = model.loss_and_grads(sample.noisy, ex.prompt_tokens, sample.noise, adapter);
        result.losses.push_back(lg.loss);

        const float t = static_cast<float>(step + 1);
        const float c1 = 1.0f - std::pow(options.beta1, t);
        const float c2 = 1.0f - std::pow(options.beta2, t);
        auto adam = [&](Matrix<float>& w, Matrix<float>& m, Matrix<float>& v, const Matrix<float>& g) {
            m = options.beta1 * m + (1.0f - options.beta1) * g;
            v = options.beta2 * v + (1.0f - options.beta2) * g.cwiseProduct(g);
            w.array() -= options.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + options.epsilon);
        };
        for (auto& [name, entry] : adapter.targets) {
            auto& mo = moments[name];
            const auto& g = lg.grads.at(name);
            adam(entry.A, mo.mA, mo.vA, g.A);
            adam(entry.B, mo.mB, mo.vB, g.B);
        }
    }
    result.adapter = std::move(adapter);
    return result;
}

float evaluate_denoising_loss(const ReferenceModel& model, const LoraAdapter& adapter,
                              const std::vector<DenoisingExample>& data, std::uint64_t seed, int draws,
                              int diffusion_steps) {
    const auto alpha_bar = alpha_bar_schedule(diffusion_steps);
    double total = 0;
    int count = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        for (int d = 0; d < draws; ++d) {
            std::mt19937_64 rng(derive_seed(seed, {i, static_cast<std::uint64_t>(d)}));
            const auto s = noise_sample(data[i].latent, alpha_bar, rng);
            total += model.loss(s.noisy, data[i].prompt_tokens, s.noise, adapter);
            ++count;
        }
    }
    return count ? static_cast<float>(total / count) : 0.0f;
}

// ---------------------------------------------------------------------------
// Container
//
// magic[8] "CYTOLORA" | u32 version | u32 rank | f32 alpha | u32 n_targets |
// n_targets x (str name | u32 d_out | u32 d_in | u64 offset_A | u64 offset_B) |
// row-major float32 A (r x d_in) and B (d_out x r) per target | u32 crc32

namespace {

constexpr char kAdapterMagic[8] = {'C', 'Y', 'T', 'O', 'L', 'O', 'R', 'A'};

[[noreturn]] void fail(ContainerErrorKind kind, const std::string& what) { throw ContainerError(kind, what); }

}  // namespace

std::vector<std::uint8_t> serialize_adapter(const LoraAdapter& adapter) {
    ByteWriter w;
    w.bytes(std::span(reinterpret_cast<const std::uint8_t*>(kAdapterMagic), sizeof kAdapterMagic));
    w.u32(kAdapterFormatVersion);
    w.u32(static_cast<std::uint32_t>(adapter.rank));
    w.f32(adapter.alpha);
    w.u32(static_cast<std::uint32_t>(adapter.targets.size()));
    std::vector<std::size_t> slots;
    for (const auto& [name, t] : adapter.targets) {
        if (t.A.rows() != adapter.rank || t.B.cols() != adapter.rank) {
            throw ShapeError("target '" + name + "' does not match adapter rank");
        }
        w.str(name);
        w.u32(static_cast<std::uint32_t>(t.B.rows()));
        w.u32(static_cast<std::uint32_t>(t.A.cols()));
        slots.push_back(w.size());
        w.u64(0);
        w.u64(0);
    }
    std::size_t i = 0;
    for (const auto& [name, t] : adapter.targets) {
        w.patch_u64(slots[i], w.size());
        w.floats(std::span(t.A.data(), static_cast<std::size_t>(t.A.size())));
        w.patch_u64(slots[i] + 8, w.size());
        w.floats(std::span(t.B.data(), static_cast<std::size_t>(t.B.size())));
        ++i;
    }
    w.u32(crc32(w.buffer()));
    return std::move(w.buffer());
}

LoraAdapter deserialize_adapter(const std::vector<std::uint8_t>& bytes) {
    struct Entry {
        std::string name;
        std::uint32_t d_out, d_in;
        std::uint64_t off_a, off_b;
    };
    ByteReader r(bytes);
    std::uint32_t rank = 0;
    float alpha = 0;
    std::vector<Entry> entries;
    try {
        const auto magic = r.raw(sizeof kAdapterMagic);
        if (!std::equal(magic.begin(), magic.end(), reinterpret_cast<const std::uint8_t*>(kAdapterMagic))) {
            fail(ContainerErrorKind::bad_magic, "not an adapter container");
        }
        const auto version = r.u32();
        if (version != kAdapterFormatVersion) {
            fail(ContainerErrorKind::version_mismatch, "adapter format version " + std::to_string(version) +
                                                           " (expected " + std::to_string(kAdapterFormatVersion) + ")");
        }
        rank = r.u32();
        alpha = r.f32();
        const auto n = r.u32();
        for (std::uint32_t i = 0; i < n; ++i) {
            Entry e;
            e.name = r.str();
            e.d_out = r.u32();
            e.d_in = r.u32();
            e.off_a = r.u64();
            e.off_b = r.u64();
            entries.push_back(std::move(e));
        }
    } catch (const TruncatedRead&) {
        fail(ContainerErrorKind::truncated, "truncated container");
    }

    if (rank == 0) fail(ContainerErrorKind::shape_mismatch, "rank field is zero");
    std::uint64_t expected = r.position();
    for (const auto& e : entries) {
        if (rank > std::min(e.d_out, e.d_in)) {
            fail(ContainerErrorKind::shape_mismatch,
                 "rank " + std::to_string(rank) + " exceeds dimensions of target '" + e.name + "'");
        }
        const std::uint64_t size_a = std::uint64_t{rank} * e.d_in * sizeof(float);
        const std::uint64_t size_b = std::uint64_t{e.d_out} * rank * sizeof(float);
        if (e.off_a != expected || e.off_b != expected + size_a) {
            fail(ContainerErrorKind::shape_mismatch, "matrix offsets of target '" + e.name +
                                                         "' are inconsistent with rank and shape");
        }
        expected += size_a + size_b;
    }
    if (expected + sizeof(std::uint32_t) > bytes.size()) fail(ContainerErrorKind::truncated, "truncated container");
    if (expected + sizeof(std::uint32_t) != bytes.size()) {
        fail(ContainerErrorKind::shape_mismatch, "unexpected trailing bytes after matrices");
    }
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + expected, sizeof stored);
    if (stored != crc32(std::span(bytes.data(), expected))) fail(ContainerErrorKind::checksum_mismatch, "CRC32 mismatch");

    LoraAdapter adapter;
    adapter.rank = static_cast<int>(rank);
    adapter.alpha = alpha;
    for (const auto& e : entries) {
        LoraTarget t;
        t.A.resize(rank, e.d_in);
        t.B.resize(e.d_out, rank);
        std::memcpy(t.A.data(), bytes.data() + e.off_a, static_cast<std::size_t>(t.A.size()) * sizeof(float));
        std::memcpy(t.B.data(), bytes.data() + e.off_b, static_cast<std::size_t>(t.B.size()) * sizeof(float));
        adapter.targets.emplace(e.name, std::move(t));
    }
    return adapter;
}

void save_adapter(const std::filesystem::path& path, const LoraAdapter& adapter) {
    write_file_bytes(path, serialize_adapter(adapter));
}

LoraAdapter load_adapter(const std::filesystem::path& path) { return deserialize_adapter(read_file_bytes(path)); }

}  // namespace cytodiff::lora
