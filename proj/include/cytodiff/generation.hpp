#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cytodiff/common/error.hpp"
#include "cytodiff/common/image.hpp"
#include "cytodiff/dataset.hpp"
#include "cytodiff/lora.hpp"

namespace cytodiff::generation {

enum class Mode { text_to_image, image_to_image };

std::string_view to_string(Mode mode);
Mode parse_mode(std::string_view text);

struct SamplerSettings {
    int steps = 30;
    double guidance_scale = 7.5;
    double strength = 0.7;  // image_to_image only

    bool operator==(const SamplerSettings&) const = default;
};

struct GenerationRequest {
    dataset::ClassLabel cls;
    int count = 1;
    std::uint64_t seed = 0;
    SamplerSettings sampler;
    Mode mode = Mode::text_to_image;
    std::vector<std::filesystem::path> init_images;  // image_to_image only
    int resolution = 512;
};

/// Throws ConfigError for count < 1, a non-positive resolution, or
/// image_to_image without init images.
void validate_request(const GenerationRequest& request);

struct Capabilities {
    bool text_to_image = true;
    bool image_to_image = false;
};

/// One image worth of work handed to a backend.
struct BackendCall {
    std::string prompt;
    std::string class_name;
    std::uint64_t seed = 0;
    SamplerSettings sampler;
    int width = 0;
    int height = 0;
    Mode mode = Mode::text_to_image;
    std::optional<Image> init_image;
    std::optional<std::string> adapter_ref;
};

class GenerationBackend {
public:
    virtual ~GenerationBackend() = default;
    virtual std::string id() const = 0;
    virtual Capabilities capabilities() const = 0;
    /// Makes an adapter container available to later calls and returns the
    /// reference to pass in BackendCall::adapter_ref. A rejected adapter is a
    /// non-retryable BackendError.
    virtual std::string register_adapter(const std::vector<std::uint8_t>& container, const std::string& sha256) = 0;
    /// Throws BackendError; retryable() distinguishes transient failures.
    virtual Image generate(const BackendCall& call) = 0;
};

/// Deterministic procedural image: a stained-cell-like blob whose base hue,
/// size, nucleus lobes and granule density come from a hash of the class
/// name, with per-seed jitter and noise.
Image stub_generate(const std::string& class_name, std::uint64_t seed, int resolution);

class StubBackend : public GenerationBackend {
public:
    std::string id() const override { return "stub-v1"; }
    Capabilities capabilities() const override { return {true, true}; }
    std::string register_adapter(const std::vector<std::uint8_t>& container, const std::string& sha256) override;
    Image generate(const BackendCall& call) override;
};

struct ServiceOptions {
    std::string base_url;  // e.g. http://localhost:7860
    int connect_timeout_s = 10;
    int read_timeout_s = 600;
};

/// HTTP client for a self-hosted diffusion endpoint:
/// POST /generate {prompt, seed, steps, guidance, width, height, mode,
/// adapter_ref, init_image_b64?, strength} -> {image_b64, seed, timing};
/// POST /adapters (container bytes) -> {adapter_ref}.
class ServiceBackend : public GenerationBackend {
public:
    explicit ServiceBackend(ServiceOptions options);
    /// Reads CYTODIFF_BACKEND_URL; throws ConfigError when unset.
    static ServiceBackend from_environment();

    std::string id() const override { return "service:" + options_.base_url; }
    Capabilities capabilities() const override { return {true, true}; }
    std::string register_adapter(const std::vector<std::uint8_t>& container, const std::string& sha256) override;
    Image generate(const BackendCall& call) override;

private:
    ServiceOptions options_;
};

struct GeneratedImage {
    int index = 0;
    std::uint64_t seed = 0;
    Image image;
};

struct SyntheticBatch {
    GenerationRequest request;
    std::string prompt;
    std::string prompt_sha256;
    std::optional<std::string> adapter_sha256;
    std::string backend_id;
    double wall_time = 0.0;
    std::vector<GeneratedImage> images;      // empty when streamed through a sink
    std::vector<dataset::ImageRecord> records;  // filled by export
};

/// Thrown when a batch stops early. Images before the failure were committed;
/// `completed` lists their indices and the batch can be resumed from there.
class PartialBatchError : public IncompleteRunError {
public:
    PartialBatchError(const std::string& what, std::vector<int> completed, bool retryable)
        : IncompleteRunError(what), completed_(std::move(completed)), retryable_(retryable) {}
    const std::vector<int>& completed() const { return completed_; }
    bool retryable() const { return retryable_; }

private:
    std::vector<int> completed_;
    bool retryable_;
};

struct BatchOptions {
    int first_index = 0;  // resume point; earlier indices are assumed committed
    int max_attempts = 3;  // per image, for retryable backend errors
    /// Receives each image in index order. When set, images are not retained
    /// in the returned batch.
    std::function<void(const GeneratedImage&)> sink;
};

/// Produces request.count images with per-image seed = request.seed + index.
/// Throws ConfigError for invalid requests or unsupported modes, BackendError
/// when the adapter is rejected, PartialBatchError when generation fails
/// after at least one image was committed (or fails at the first image with
/// a retryable error).
SyntheticBatch generate_batch(GenerationBackend& backend, const GenerationRequest& request, const std::string& prompt,
                              const lora::LoraAdapter* adapter, const BatchOptions& options = {});

/// `<out_root>/<class>/<run_id>_<index>.png`, 5-digit zero-padded index.
std::filesystem::path image_path(const std::filesystem::path& out_root, const std::string& class_name,
                                 const std::string& run_id, int index);
std::filesystem::path sidecar_path(const std::filesystem::path& out_root, const std::string& class_name,
                                   const std::string& run_id);

/// Writes every image of the batch plus a JSON sidecar. Throws DataError if
/// any file of this run id already exists. Returns the written image paths
/// and fills batch.records with synthetic-origin records.
std::vector<std::filesystem::path> export_images(SyntheticBatch& batch, const std::filesystem::path& out_root,
                                                 const std::string& run_id);

/// Streams a batch straight to disk. With `resume`, existing contiguous
/// `<run_id>_<index>.png` files are kept and generation continues after
/// them; without it any existing file of the run id is a collision.
SyntheticBatch generate_to_directory(GenerationBackend& backend, const GenerationRequest& request,
                                     const std::string& prompt, const lora::LoraAdapter* adapter,
                                     const std::filesystem::path& out_root, const std::string& run_id,
                                     bool resume = false);

std::string sidecar_json(const SyntheticBatch& batch, const std::string& run_id,
                         const std::vector<std::filesystem::path>& files);

/// Folder-per-class toy corpus rendered with the stub under a seed range
/// disjoint from generation seeds. Returns the number of files written.
std::size_t write_stub_corpus(const std::filesystem::path& root,
                              const std::vector<std::pair<std::string, int>>& class_counts, std::uint64_t seed,
                              int resolution);

}  // namespace cytodiff::generation
