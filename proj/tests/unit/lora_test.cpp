#include <gtest/gtest.h>

#include <random>

#include "cytodiff/common/binary_io.hpp"
#include "cytodiff/common/hash.hpp"
#include "cytodiff/common/tensor_file.hpp"
#include "cytodiff/lora.hpp"
#include "fixtures.hpp"

namespace cytodiff::lora {
namespace {

template <typename T>
Matrix<T> random_matrix(int rows, int cols, double std, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, std);
    Matrix<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(n(rng));
    return m;
}

LinearProjection random_projection(int d_out, int d_in, std::mt19937_64& rng) {
    LinearProjection p;
    p.name = "p";
    p.weight = random_matrix<float>(d_out, d_in, 1.0 / std::sqrt(d_in), rng);
    Vector<float> b = random_matrix<float>(d_out, 1, 0.1, rng);
    p.bias = b;
    return p;
}

std::vector<DenoisingExample> toy_examples(int d_model, int count) {
    std::vector<DenoisingExample> out;
    for (int i = 0; i < count; ++i) {
        out.push_back({image_tokens(testing::pattern_image(i % 3, i, 16), d_model),
                       prompt_tokens("blood cell, class " + std::to_string(i % 3) + ", stained", d_model)});
    }
    return out;
}

TEST(InitAdapter, FreshAdapterIsNeutralAndDeterministic) {
    const std::vector<TargetShape> shapes{{"a", 8, 8}, {"b", 16, 8}};
    const auto first = init_adapter(shapes, 4, 4.0f, 11);
    const auto second = init_adapter(shapes, 4, 4.0f, 11);
    EXPECT_EQ(first, second);
    for (const auto& [name, t] : first.targets) {
        EXPECT_TRUE(first.delta(name).isZero(0.0f));
        EXPECT_EQ(t.A.rows(), 4);
        EXPECT_GT(t.A.cwiseAbs().maxCoeff(), 0.0f);
    }
    EXPECT_NE(init_adapter(shapes, 4, 4.0f, 12).targets.at("a").A, first.targets.at("a").A);
}

TEST(InitAdapter, InitStdMatchesRequest) {
    const auto a = init_adapter({{"w", 64, 64}}, 64, 64.0f, 3);
    const auto& A = a.targets.at("w").A;
    const double mean = A.cast<double>().mean();
    const double var = (A.cast<double>().array() - mean).square().mean();
    EXPECT_NEAR(std::sqrt(var), 0.02, 0.002);
}

TEST(InitAdapter, RankBoundNamesTarget) {
    try {
        init_adapter({{"unet.attn0.q", 8, 8}}, 16, 16.0f, 0);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("unet.attn0.q"), std::string::npos);
    }
    EXPECT_THROW(init_adapter({{"x", 8, 8}}, 0, 1.0f, 0), ShapeError);
}

TEST(AdaptedForward, HandComputedTwoByTwo) {
    LinearProjection p{"p", Matrix<float>{{1, 2}, {3, 4}}, Vector<float>{{0.5f, -0.5f}}};
    LoraTarget t{Matrix<float>{{1, 0}, {0, 1}}, Matrix<float>{{2, 0}, {1, 1}}};
    // (W + BA) x + b with scale 1: W + BA = [[3, 2], [4, 5]]
    const Matrix<float> x{{1, -1}, {2, 3}};
    const Matrix<float> expected{{1 + 0.5f, -1 - 0.5f}, {12 + 0.5f, 23 - 0.5f}};
    EXPECT_EQ(adapted_forward(x, p, t, 1.0f), expected);
    EXPECT_EQ(adapted_forward(Matrix<float>::Zero(1, 2).eval(), p, t, 1.0f),
              (Matrix<float>{{0.5f, -0.5f}}));
}

TEST(AdaptedForward, ShapeMismatchThrows) {
    std::mt19937_64 rng(1);
    const auto p = random_projection(8, 6, rng);
    LoraTarget t{Matrix<float>::Zero(2, 8), Matrix<float>::Zero(8, 2)};
    EXPECT_THROW(adapted_forward(random_matrix<float>(3, 6, 1, rng), p, t, 1.0f), ShapeError);
    LoraTarget ok{Matrix<float>::Zero(2, 6), Matrix<float>::Zero(8, 2)};
    EXPECT_THROW(adapted_forward(random_matrix<float>(3, 5, 1, rng), p, ok, 1.0f), ShapeError);
}

TEST(Merge, ZeroAdapterAndUnmergeRoundTrip) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const int d_out = 4 + trial, d_in = 3 + 2 * trial, r = 1 + trial % 3;
        const auto p = random_projection(d_out, d_in, rng);
        LoraTarget zero{random_matrix<float>(r, d_in, 0.02, rng), Matrix<float>::Zero(d_out, r)};
        EXPECT_EQ(merge(p, zero, 1.0f).weight, p.weight);
        LoraTarget t{random_matrix<float>(r, d_in, 0.5, rng), random_matrix<float>(d_out, r, 0.5, rng)};
        const auto back = unmerge(merge(p, t, 2.0f), t, 2.0f);
        EXPECT_LE((back.weight - p.weight).cwiseAbs().maxCoeff(), 1e-6f * p.weight.cwiseAbs().maxCoeff());
    }
}

TEST(Merge, ScaleLinearity) {
    std::mt19937_64 rng(5);
    const auto p = random_projection(12, 10, rng);
    LoraAdapter a;
    a.rank = 3;
    a.alpha = 1.5f;
    a.targets["p"] = {random_matrix<float>(3, 10, 0.3, rng), random_matrix<float>(12, 3, 0.3, rng)};
    LoraAdapter doubled = a;
    doubled.alpha = 3.0f;
    EXPECT_EQ(doubled.delta("p"), (2.0f * a.delta("p")).eval());

    const auto x = random_matrix<float>(6, 10, 1, rng);
    const Matrix<float> d1 = adapted_forward(x, p, a.targets["p"], a.scale()) - p.forward(x);
    const Matrix<float> d2 = adapted_forward(x, p, a.targets["p"], doubled.scale()) - p.forward(x);
    EXPECT_LE((d2 - 2.0f * d1).cwiseAbs().maxCoeff(), 1e-5f);
}

TEST(AttentionBlock, SoftmaxRowsSumToOne) {
    AttentionBlock block("unet.attn1", 16, 4, 9);
    std::mt19937_64 rng(2);
    AttentionCache<float> cache;
    block.forward(random_matrix<float>(7, 16, 3, rng), random_matrix<float>(5, 16, 3, rng), nullptr, &cache);
    ASSERT_EQ(cache.probs.size(), 4u);
    for (const auto& p : cache.probs) {
        EXPECT_EQ(p.rows(), 7);
        EXPECT_EQ(p.cols(), 5);
        for (Eigen::Index r = 0; r < p.rows(); ++r) EXPECT_NEAR(p.row(r).sum(), 1.0f, 1e-6f);
    }
    EXPECT_THROW(AttentionBlock("x", 10, 4, 0), ShapeError);
}

TEST(ResolveTargets, DefaultsCoverEveryProjection) {
    const ReferenceModel model(8, 2, 1);
    const auto names = model.projection_names();
    EXPECT_EQ(names.size(), 12u);
    EXPECT_EQ(resolve_targets(AttentionTargetSpec::all_attention(), names), names);

    AttentionTargetSpec unet_qk;
    unet_qk.kinds = {ProjectionKind::query, ProjectionKind::key};
    unet_qk.layer_pattern = "attn1";
    EXPECT_EQ(resolve_targets({unet_qk}, names), (std::vector<std::string>{"unet.attn1.q", "unet.attn1.k"}));

    AttentionTargetSpec none;
    none.kinds.clear();
    EXPECT_THROW(resolve_targets({none}, names), ShapeError);
}

// Finite-difference oracle: central differences in double precision.
TEST(Gradients, MatchCentralDifferences) {
    const auto model = ReferenceModel(8, 2, 21).cast<double>();
    std::mt19937_64 rng(4);
    auto adapter = cast_adapter<double>(init_adapter(ReferenceModel(8, 2, 21).projection_shapes(), 2, 2.0f, 8, 0.3f));
    // B = 0 zeroes dA, so use a nonzero B for a meaningful check.
    for (auto& [name, t] : adapter.targets) t.B = random_matrix<double>(8, 2, 0.3, rng);
    const auto noisy = random_matrix<double>(6, 8, 1, rng);
    const auto prompt = random_matrix<double>(4, 8, 1, rng);
    const auto noise = random_matrix<double>(6, 8, 1, rng);

    const auto analytic = model.loss_and_grads(noisy, prompt, noise, adapter);
    EXPECT_DOUBLE_EQ(analytic.loss, model.loss(noisy, prompt, noise, adapter));
    const double eps = 1e-3;
    for (auto& [name, t] : adapter.targets) {
        for (auto* which : {&t.A, &t.B}) {
            const bool is_a = which == &t.A;
            Matrix<double> fd(which->rows(), which->cols());
            for (Eigen::Index i = 0; i < which->size(); ++i) {
                const double orig = which->data()[i];
                which->data()[i] = orig + eps;
                const double up = model.loss(noisy, prompt, noise, adapter);
                which->data()[i] = orig - eps;
                const double down = model.loss(noisy, prompt, noise, adapter);
                which->data()[i] = orig;
                fd.data()[i] = (up - down) / (2 * eps);
            }
            const auto& an = is_a ? analytic.grads.at(name).A : analytic.grads.at(name).B;
            const double denom = std::max({an.norm(), fd.norm(), 1e-12});
            EXPECT_LE((an - fd).norm() / denom, 1e-4) << name << (is_a ? ".A" : ".B");
            EXPECT_GT(fd.norm(), 0.0) << name;
        }
    }
}

TEST(TrainAdapter, ZeroLearningRateLeavesAdapterUnchanged) {
    const ReferenceModel model(8, 2, 3);
    const auto adapter = init_adapter(model.projection_shapes(), 2, 2.0f, 5);
    TrainAdapterOptions opt;
    opt.steps = 20;
    opt.learning_rate = 0.0f;
    const auto result = train_adapter(model, adapter, toy_examples(8, 3), opt);
    EXPECT_EQ(result.adapter, adapter);
    EXPECT_EQ(result.losses.size(), 20u);
}

TEST(TrainAdapter, LossDecreasesAndBaseIsFrozen) {
    const ReferenceModel model(8, 2, 3);
    const ReferenceModel before = model;
    const auto data = toy_examples(8, 4);
    const auto adapter = init_adapter(model.projection_shapes(), 2, 2.0f, 5);
    TrainAdapterOptions opt;
    opt.steps = 200;
    opt.learning_rate = 1e-2f;
    opt.seed = 77;
    const auto result = train_adapter(model, adapter, data, opt);
    const float start = evaluate_denoising_loss(model, adapter, data, 1, 16);
    const float end = evaluate_denoising_loss(model, result.adapter, data, 1, 16);
    EXPECT_LT(end, start);
    const float best = *std::min_element(result.losses.begin(), result.losses.end());
    EXPECT_LT(best, result.losses.front());

    for (const auto& name : model.projection_names()) {
        EXPECT_EQ(model.find_projection(name)->weight, before.find_projection(name)->weight) << name;
        EXPECT_EQ(*model.find_projection(name)->bias, *before.find_projection(name)->bias) << name;
    }
    const auto again = train_adapter(model, adapter, data, opt);
    EXPECT_EQ(again.adapter, result.adapter);
    EXPECT_EQ(again.losses, result.losses);
}

TEST(TrainAdapter, RejectsEmptyOrForeignTargets) {
    const ReferenceModel model(8, 2, 3);
    LoraAdapter empty;
    empty.rank = 2;
    empty.alpha = 2;
    EXPECT_THROW(train_adapter(model, empty, toy_examples(8, 1), {}), ShapeError);
    const auto foreign = init_adapter({{"unet.attn9.q", 8, 8}}, 2, 2.0f, 0);
    EXPECT_THROW(train_adapter(model, foreign, toy_examples(8, 1), {}), ShapeError);
}

class AdapterFile : public ::testing::Test {
protected:
    LoraAdapter sample() const {
        std::mt19937_64 rng(13);
        auto a = init_adapter({{"text.attn0.q", 8, 8}, {"unet.attn1.v", 8, 12}}, 2, 3.5f, 1);
        for (auto& [n, t] : a.targets) t.B = random_matrix<float>(static_cast<int>(t.B.rows()), 2, 1, rng);
        return a;
    }
    static ContainerErrorKind kind_of(const std::vector<std::uint8_t>& bytes) {
        try {
            deserialize_adapter(bytes);
        } catch (const ContainerError& e) {
            return e.kind();
        }
        ADD_FAILURE() << "container accepted";
        return ContainerErrorKind::bad_magic;
    }
    static void restamp_crc(std::vector<std::uint8_t>& bytes) {
        const auto crc = crc32(std::span(bytes.data(), bytes.size() - 4));
        std::memcpy(bytes.data() + bytes.size() - 4, &crc, 4);
    }
};

TEST_F(AdapterFile, RoundTripIsBitExact) {
    testing::TempDir dir;
    const auto a = sample();
    save_adapter(dir / "a.lora", a);
    const auto b = load_adapter(dir / "a.lora");
    EXPECT_EQ(a, b);
    EXPECT_EQ(serialize_adapter(b), read_file_bytes(dir / "a.lora"));
}

TEST_F(AdapterFile, DistinctErrorKinds) {
    const auto good = serialize_adapter(sample());

    auto magic = good;
    magic[0] = 'X';
    EXPECT_EQ(kind_of(magic), ContainerErrorKind::bad_magic);

    auto version = good;
    version[8] = 2;
    EXPECT_EQ(kind_of(version), ContainerErrorKind::version_mismatch);

    for (std::size_t cut : {std::size_t{4}, std::size_t{30}, good.size() - 1, good.size() - 40}) {
        EXPECT_EQ(kind_of({good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut)}),
                  ContainerErrorKind::truncated)
            << cut;
    }

    auto flipped = good;
    flipped[good.size() - 10] ^= 0x01;
    EXPECT_EQ(kind_of(flipped), ContainerErrorKind::checksum_mismatch);
}

TEST_F(AdapterFile, EditedRankIsShapeInconsistent) {
    auto bytes = serialize_adapter(sample());
    // rank field follows magic (8) and version (4)
    std::uint32_t rank = 3;
    std::memcpy(bytes.data() + 12, &rank, 4);
    restamp_crc(bytes);
    EXPECT_EQ(kind_of(bytes), ContainerErrorKind::shape_mismatch);

    rank = 1;
    std::memcpy(bytes.data() + 12, &rank, 4);
    restamp_crc(bytes);
    EXPECT_EQ(kind_of(bytes), ContainerErrorKind::shape_mismatch);
}

}  // namespace
}  // namespace cytodiff::lora
