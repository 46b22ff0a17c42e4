#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include "cytodiff/common/base64.hpp"
#include "cytodiff/common/binary_io.hpp"
#include "cytodiff/generation.hpp"
#include "fixtures.hpp"
#include "httplib.h"
#include "json.hpp"

namespace cytodiff::generation {
namespace {

namespace fs = std::filesystem;

GenerationRequest request_for(const std::string& cls, int index, int count, std::uint64_t seed, int res = 16) {
    GenerationRequest r;
    r.cls = {cls, index};
    r.count = count;
    r.seed = seed;
    r.resolution = res;
    return r;
}

TEST(Stub, DeterministicAndShaped) {
    const auto a = stub_generate("basophil", 7, 64);
    EXPECT_EQ(a.width, 64);
    EXPECT_EQ(a.height, 64);
    EXPECT_EQ(a.pixels.size(), 64u * 64u * 3u);
    EXPECT_EQ(a, stub_generate("basophil", 7, 64));
    EXPECT_NE(a, stub_generate("basophil", 8, 64));
}

TEST(Stub, ClassesDifferInMeanChannel) {
    const auto names = dataset::munich_aml_registry().names();
    int separated = 0, pairs = 0;
    for (std::size_t i = 0; i < names.size(); ++i) {
        for (std::size_t j = i + 1; j < names.size(); ++j) {
            const auto mi = channel_means(stub_generate(names[i], 3, 64));
            const auto mj = channel_means(stub_generate(names[j], 3, 64));
            double best = 0;
            for (int c = 0; c < 3; ++c) best = std::max(best, std::abs(mi[c] - mj[c]));
            separated += best >= 10.0;
            ++pairs;
        }
    }
    const auto b = channel_means(stub_generate("basophil", 3, 64));
    const auto n = channel_means(stub_generate("neutrophil_segmented", 3, 64));
    double diff = 0;
    for (int c = 0; c < 3; ++c) diff = std::max(diff, std::abs(b[c] - n[c]));
    EXPECT_GE(diff, 10.0);
    EXPECT_GE(separated, pairs * 8 / 10);
}

TEST(GenerateBatch, StubReproducible) {
    StubBackend stub;
    const auto req = request_for("basophil", 0, 4, 7);
    const auto a = generate_batch(stub, req, "a basophil", nullptr);
    const auto b = generate_batch(stub, req, "a basophil", nullptr);
    ASSERT_EQ(a.images.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(a.images[i].image, b.images[i].image);
        EXPECT_EQ(a.images[i].seed, 7u + i);
    }
    EXPECT_EQ(a.prompt_sha256, b.prompt_sha256);
}

TEST(GenerateBatch, PreconditionsAndAdapterHash) {
    StubBackend stub;
    auto req = request_for("basophil", 0, 2, 1);
    req.mode = Mode::image_to_image;
    EXPECT_THROW(generate_batch(stub, req, "p", nullptr), ConfigError);
    EXPECT_THROW(generate_batch(stub, request_for("basophil", 0, 0, 1), "p", nullptr), ConfigError);
    EXPECT_THROW(generate_batch(stub, request_for("basophil", 0, 1, 1), "", nullptr), ConfigError);

    const auto adapter = lora::init_adapter({{"unet.attn0.q", 8, 8}}, 2, 2.0f, 1);
    const auto with = generate_batch(stub, request_for("basophil", 0, 1, 1), "p", &adapter);
    ASSERT_TRUE(with.adapter_sha256.has_value());
    EXPECT_EQ(with.adapter_sha256->size(), 64u);
}

TEST(GenerateBatch, ImageToImageBlendsInitImages) {
    testing::TempDir dir;
    write_png(dir / "init.png", testing::pattern_image(0, 0, 16));
    StubBackend stub;
    auto req = request_for("monocyte", 6, 2, 5);
    req.mode = Mode::image_to_image;
    req.init_images = {dir / "init.png"};
    const auto batch = generate_batch(stub, req, "monocyte", nullptr);
    EXPECT_NE(batch.images[0].image, stub_generate("monocyte", 5, 16));
}

class FlakyBackend : public StubBackend {
public:
    int fail_at = -1;
    bool retryable = true;
    int calls = 0;
    Image generate(const BackendCall& call) override {
        ++calls;
        if (static_cast<int>(call.seed) == fail_at) throw BackendError("boom", retryable);
        return StubBackend::generate(call);
    }
};

TEST(GenerateBatch, PartialBatchListsCompletedAndResumes) {
    testing::TempDir dir;
    FlakyBackend flaky;
    flaky.fail_at = 3;  // seed 0 + index 3
    flaky.retryable = false;
    const auto req = request_for("eosinophil", 4, 6, 0);
    try {
        generate_to_directory(flaky, req, "eo", nullptr, dir.path(), "run1");
        FAIL() << "expected partial batch";
    } catch (const PartialBatchError& e) {
        EXPECT_EQ(e.completed(), (std::vector<int>{0, 1, 2}));
        EXPECT_FALSE(e.retryable());
    }
    EXPECT_TRUE(fs::exists(image_path(dir.path(), "eosinophil", "run1", 2)));
    EXPECT_FALSE(fs::exists(image_path(dir.path(), "eosinophil", "run1", 3)));
    EXPECT_THROW(generate_to_directory(flaky, req, "eo", nullptr, dir.path(), "run1"), DataError);

    flaky.fail_at = -1;
    flaky.calls = 0;
    const auto batch = generate_to_directory(flaky, req, "eo", nullptr, dir.path(), "run1", true);
    EXPECT_EQ(flaky.calls, 3);
    EXPECT_EQ(batch.records.size(), 6u);

    testing::TempDir fresh;
    StubBackend stub;
    generate_to_directory(stub, req, "eo", nullptr, fresh.path(), "run1");
    for (int i = 0; i < 6; ++i) {
        EXPECT_EQ(read_file_bytes(image_path(dir.path(), "eosinophil", "run1", i)),
                  read_file_bytes(image_path(fresh.path(), "eosinophil", "run1", i)));
    }
}

TEST(GenerateBatch, RetryableErrorsAreRetried) {
    class Once : public StubBackend {
    public:
        bool failed = false;
        Image generate(const BackendCall& call) override {
            if (!failed) {
                failed = true;
                throw BackendError("transient", true);
            }
            return StubBackend::generate(call);
        }
    } once;
    EXPECT_EQ(generate_batch(once, request_for("basophil", 0, 2, 0), "p", nullptr).images.size(), 2u);

    FlakyBackend down;
    down.fail_at = 0;
    try {
        generate_batch(down, request_for("basophil", 0, 2, 0), "p", nullptr);
        FAIL();
    } catch (const BackendError& e) {
        EXPECT_TRUE(e.retryable());
    }
}

TEST(Export, WritesFilesAndSidecarAndRefusesCollision) {
    testing::TempDir dir;
    StubBackend stub;
    auto batch = generate_batch(stub, request_for("basophil", 0, 4, 7), "a basophil", nullptr);
    const auto files = export_images(batch, dir.path(), "r42");
    ASSERT_EQ(files.size(), 4u);
    for (const auto& f : files) EXPECT_TRUE(fs::exists(f));
    EXPECT_EQ(files[3].filename(), "r42_00003.png");
    ASSERT_TRUE(fs::exists(sidecar_path(dir.path(), "basophil", "r42")));
    const auto bytes = read_file_bytes(sidecar_path(dir.path(), "basophil", "r42"));
    const auto j = nlohmann::json::parse(std::string(bytes.begin(), bytes.end()));
    EXPECT_EQ(j["files"].size(), 4u);
    EXPECT_EQ(j["files"][2]["seed"], 9);
    EXPECT_EQ(j["request"]["sampler"]["steps"], 30);
    EXPECT_THROW(export_images(batch, dir.path(), "r42"), DataError);
    EXPECT_EQ(batch.records.size(), 4u);
    EXPECT_EQ(batch.records[0].origin, dataset::Origin::synthetic);
}

TEST(Export, RescanMatchesBatchCounts) {
    testing::TempDir dir;
    StubBackend stub;
    const dataset::ClassRegistry reg({"a_cell", "b_cell"});
    for (int c = 0; c < 2; ++c) {
        auto batch = generate_batch(stub, request_for(reg.at(c).name, c, 3 + c, 100), "cell", nullptr);
        export_images(batch, dir.path(), "s1");
    }
    const auto scan = dataset::scan_corpus(dir.path(), reg, dataset::Origin::synthetic);
    const auto counts = scan.manifest.class_counts();
    EXPECT_EQ(counts[0].n_synthetic, 3u);
    EXPECT_EQ(counts[1].n_synthetic, 4u);
    EXPECT_TRUE(scan.skipped.empty());
}

TEST(Export, ManyClassesAtPaperScaleCount) {
    // 5000 per class over 15 classes: checked on request bookkeeping only.
    const auto reg = dataset::munich_aml_registry();
    std::size_t total = 0;
    for (const auto& l : reg.labels()) {
        auto r = request_for(l.name, l.index, 5000, 0);
        validate_request(r);
        total += static_cast<std::size_t>(r.count);
    }
    EXPECT_EQ(total, 75000u);
}

class FakeService : public ::testing::Test {
protected:
    void SetUp() override {
        server_.Post("/adapters", [this](const httplib::Request& req, httplib::Response& res) {
            adapter_bytes_ = req.body.size();
            res.set_content(R"({"adapter_ref": "ad-1"})", "application/json");
        });
        server_.Post("/generate", [this](const httplib::Request& req, httplib::Response& res) {
            const auto j = nlohmann::json::parse(req.body);
            last_ = j;
            if (mode_ == 1) {
                res.status = 503;
                return;
            }
            if (mode_ == 2) {
                res.status = 422;
                res.set_content("adapter shape mismatch", "text/plain");
                return;
            }
            const auto seed = j["seed"].get<std::uint64_t>();
            const auto img = stub_generate(j["prompt"].get<std::string>(), seed, j["width"].get<int>());
            nlohmann::json out{{"image_b64", base64_encode(encode_png(img))},
                               {"seed", mode_ == 3 ? seed + 1 : seed},
                               {"timing", 0.01}};
            res.set_content(out.dump(), "application/json");
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    void TearDown() override {
        server_.stop();
        thread_.join();
    }
    ServiceBackend backend() const {
        ServiceOptions o;
        o.base_url = "http://127.0.0.1:" + std::to_string(port_);
        o.read_timeout_s = 5;
        return ServiceBackend(o);
    }

    httplib::Server server_;
    std::thread thread_;
    int port_ = 0;
    std::atomic<int> mode_{0};
    nlohmann::json last_;
    std::size_t adapter_bytes_ = 0;
};

TEST_F(FakeService, GeneratesWithAdapterAndEchoedSeed) {
    auto be = backend();
    const auto adapter = lora::init_adapter({{"unet.attn0.q", 8, 8}}, 2, 2.0f, 1);
    const auto batch = generate_batch(be, request_for("x", 0, 2, 40), "basophil", &adapter);
    ASSERT_EQ(batch.images.size(), 2u);
    EXPECT_EQ(batch.images[1].image, stub_generate("basophil", 41, 16));
    EXPECT_EQ(last_["adapter_ref"], "ad-1");
    EXPECT_EQ(last_["steps"], 30);
    EXPECT_EQ(adapter_bytes_, lora::serialize_adapter(adapter).size());
}

TEST_F(FakeService, ErrorsClassified) {
    auto be = backend();
    BackendCall call;
    call.prompt = "p";
    call.seed = 1;
    call.width = call.height = 8;
    mode_ = 1;
    try {
        be.generate(call);
        FAIL();
    } catch (const BackendError& e) {
        EXPECT_TRUE(e.retryable());
    }
    mode_ = 2;
    try {
        be.generate(call);
        FAIL();
    } catch (const BackendError& e) {
        EXPECT_FALSE(e.retryable());
    }
    mode_ = 3;
    try {
        be.generate(call);
        FAIL();
    } catch (const BackendError& e) {
        EXPECT_FALSE(e.retryable());
        EXPECT_NE(std::string(e.what()).find("seed"), std::string::npos);
    }
}

TEST(ServiceBackend, UnreachableIsRetryable) {
    ServiceOptions o;
    o.base_url = "http://127.0.0.1:1";
    o.connect_timeout_s = 1;
    ServiceBackend be(o);
    BackendCall call;
    call.prompt = "p";
    call.width = call.height = 8;
    try {
        be.generate(call);
        FAIL();
    } catch (const BackendError& e) {
        EXPECT_TRUE(e.retryable());
    }
}

}  // namespace
}  // namespace cytodiff::generation
