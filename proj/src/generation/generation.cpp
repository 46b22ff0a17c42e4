#include "cytodiff/generation.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <thread>

#include "cytodiff/common/base64.hpp"
#include "cytodiff/common/binary_io.hpp"
#include "cytodiff/common/hash.hpp"
#include "cytodiff/common/seed.hpp"
#include "httplib.h"
#include "json.hpp"

namespace cytodiff::generation {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

std::string_view to_string(Mode mode) { return mode == Mode::text_to_image ? "text_to_image" : "image_to_image"; }

Mode parse_mode(std::string_view text) {
    if (text == "text_to_image" || text == "t2i") return Mode::text_to_image;
    if (text == "image_to_image" || text == "i2i") return Mode::image_to_image;
    throw ConfigError("unknown generation mode '" + std::string(text) + "'");
}

void validate_request(const GenerationRequest& request) {
    if (request.count < 1) throw ConfigError("generation count must be >= 1");
    if (request.resolution < 1) throw ConfigError("generation resolution must be positive");
    if (request.sampler.steps < 1) throw ConfigError("sampler steps must be >= 1");
    if (request.sampler.strength < 0.0 || request.sampler.strength > 1.0) {
        throw ConfigError("image-to-image strength must lie in [0, 1]");
    }
    if (request.mode == Mode::image_to_image && request.init_images.empty()) {
        throw ConfigError("image_to_image generation requires at least one init image");
    }
}

// ---------------------------------------------------------------------------
// Service backend

ServiceBackend::ServiceBackend(ServiceOptions options) : options_(std::move(options)) {
    if (options_.base_url.empty()) throw ConfigError("service backend URL is empty");
    while (!options_.base_url.empty() && options_.base_url.back() == '/') options_.base_url.pop_back();
}

ServiceBackend ServiceBackend::from_environment() {
    const char* url = std::getenv("CYTODIFF_BACKEND_URL");
    if (!url || !*url) throw ConfigError("CYTODIFF_BACKEND_URL is not set; the service backend needs an endpoint");
    return ServiceBackend(ServiceOptions{url});
}

namespace {

httplib::Client make_client(const ServiceOptions& o) {
    httplib::Client cli(o.base_url);
    cli.set_connection_timeout(o.connect_timeout_s, 0);
    cli.set_read_timeout(o.read_timeout_s, 0);
    cli.set_write_timeout(o.read_timeout_s, 0);
    return cli;
}

void check_response(const httplib::Result& res, const std::string& what) {
    if (!res) {
        throw BackendError("backend unreachable during " + what + ": " + httplib::to_string(res.error()), true);
    }
    if (res->status >= 200 && res->status < 300) return;
    const bool retryable = res->status >= 500 || res->status == 429 || res->status == 408;
    throw BackendError(what + " failed with HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 500),
                       retryable);
}

ordered_json parse_body(const std::string& body, const std::string& what) {
    try {
        return ordered_json::parse(body);
    } catch (const nlohmann::json::exception& e) {
        throw BackendError(what + " returned malformed JSON: " + e.what(), false);
    }
}

}  // namespace

std::string ServiceBackend::register_adapter(const std::vector<std::uint8_t>& container, const std::string& sha256) {
    auto cli = make_client(options_);
    httplib::Headers headers{{"X-Adapter-SHA256", sha256}};
    const auto res = cli.Post("/adapters", headers, reinterpret_cast<const char*>(container.data()), container.size(),
                              "application/octet-stream");
    check_response(res, "adapter upload");
    const auto j = parse_body(res->body, "adapter upload");
    if (!j.contains("adapter_ref") || !j["adapter_ref"].is_string()) {
        throw BackendError("adapter upload response lacks adapter_ref", false);
    }
    return j["adapter_ref"].get<std::string>();
}

Image ServiceBackend::generate(const BackendCall& call) {
    ordered_json body;
    body["prompt"] = call.prompt;
    body["seed"] = call.seed;
    body["steps"] = call.sampler.steps;
    body["guidance"] = call.sampler.guidance_scale;
    body["width"] = call.width;
    body["height"] = call.height;
    body["mode"] = to_string(call.mode);
    body["adapter_ref"] = call.adapter_ref ? ordered_json(*call.adapter_ref) : ordered_json(nullptr);
    if (call.mode == Mode::image_to_image && call.init_image) {
        body["init_image_b64"] = base64_encode(encode_png(*call.init_image));
        body["strength"] = call.sampler.strength;
    }
    auto cli = make_client(options_);
    const auto res = cli.Post("/generate", body.dump(), "application/json");
    check_response(res, "generation");
    const auto j = parse_body(res->body, "generation");
    if (!j.contains("seed") || !j["seed"].is_number_unsigned() || j["seed"].get<std::uint64_t>() != call.seed) {
        throw BackendError("backend did not echo the requested seed " + std::to_string(call.seed), false);
    }
    if (!j.contains("image_b64") || !j["image_b64"].is_string()) throw BackendError("response lacks image_b64", false);
    const auto bytes = base64_decode(j["image_b64"].get<std::string>());
    if (!bytes) throw BackendError("response image is not valid base64", false);
    auto img = decode_png(*bytes);
    if (!img) throw BackendError("response image is not a decodable PNG", false);
    if (img->width != call.width || img->height != call.height) return resize_image(*img, call.width, call.height);
    return *img;
}

// ---------------------------------------------------------------------------
// Batches

SyntheticBatch generate_batch(GenerationBackend& backend, const GenerationRequest& request, const std::string& prompt,
                              const lora::LoraAdapter* adapter, const BatchOptions& options) {
    validate_request(request);
    if (prompt.empty()) throw ConfigError("generation prompt is empty");
    const auto caps = backend.capabilities();
    if ((request.mode == Mode::text_to_image && !caps.text_to_image) ||
        (request.mode == Mode::image_to_image && !caps.image_to_image)) {
        throw ConfigError("backend " + backend.id() + " does not support " + std::string(to_string(request.mode)));
    }
    if (options.first_index < 0 || options.first_index > request.count) {
        throw ConfigError("resume index outside the batch");
    }

    const auto start = std::chrono::steady_clock::now();
    SyntheticBatch batch;
    batch.request = request;
    batch.prompt = prompt;
    batch.prompt_sha256 = sha256_hex(prompt);
    batch.backend_id = backend.id();

    std::optional<std::string> adapter_ref;
    if (adapter) {
        const auto container = lora::serialize_adapter(*adapter);
        batch.adapter_sha256 = sha256_hex(container);
        adapter_ref = backend.register_adapter(container, *batch.adapter_sha256);
    }
    std::vector<Image> init;
    for (const auto& p : request.init_images) init.push_back(load_image(p, request.resolution));

    for (int i = options.first_index; i < request.count; ++i) {
        BackendCall call;
        call.prompt = prompt;
        call.class_name = request.cls.name;
        call.seed = request.seed + static_cast<std::uint64_t>(i);
        call.sampler = request.sampler;
        call.width = call.height = request.resolution;
        call.mode = request.mode;
        if (!init.empty()) call.init_image = init[static_cast<std::size_t>(i) % init.size()];
        call.adapter_ref = adapter_ref;

        std::optional<Image> img;
        for (int attempt = 1; !img; ++attempt) {
            try {
                img = backend.generate(call);
            } catch (const BackendError& e) {
                if (e.retryable() && attempt < options.max_attempts) {
                    std::this_thread::sleep_for(std::chrono::milliseconds(100 * attempt));
                    continue;
                }
                if (i == 0) throw;
                std::vector<int> done(static_cast<std::size_t>(i));
                for (int k = 0; k < i; ++k) done[static_cast<std::size_t>(k)] = k;
                throw PartialBatchError("batch stopped at index " + std::to_string(i) + " of " +
                                            std::to_string(request.count) + " (indices 0.." + std::to_string(i - 1) +
                                            " completed): " + e.what(),
                                        std::move(done), e.retryable());
            }
        }
        GeneratedImage g{i, call.seed, std::move(*img)};
        if (options.sink) {
            options.sink(g);
        } else {
            batch.images.push_back(std::move(g));
        }
    }
    batch.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return batch;
}

fs::path image_path(const fs::path& out_root, const std::string& class_name, const std::string& run_id, int index) {
    char name[32];
    std::snprintf(name, sizeof name, "_%05d.png", index);
    return out_root / class_name / (run_id + name);
}

fs::path sidecar_path(const fs::path& out_root, const std::string& class_name, const std::string& run_id) {
    return out_root / class_name / (run_id + ".batch.json");
}

namespace {

void check_run_id(const std::string& run_id) {
    if (run_id.empty() || run_id.find_first_of("/\\") != std::string::npos || run_id.front() == '.') {
        throw ConfigError("invalid run id '" + run_id + "'");
    }
}

/// Existing files of this run id in the class folder, sidecar included.
std::vector<fs::path> run_files(const fs::path& dir, const std::string& run_id) {
    std::vector<fs::path> out;
    if (!fs::is_directory(dir)) return out;
    const std::string prefix = run_id + "_";
    for (const auto& e : fs::directory_iterator(dir)) {
        const auto name = e.path().filename().string();
        if (name.rfind(prefix, 0) == 0 || name == run_id + ".batch.json") out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

void write_png_atomic(const fs::path& path, const Image& img) {
    auto tmp = path;
    tmp += ".part";
    write_file_bytes(tmp, encode_png(img));
    fs::rename(tmp, path);
}

void write_text(const fs::path& path, const std::string& text) {
    write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void fill_records(SyntheticBatch& batch, const std::vector<fs::path>& files) {
    batch.records.clear();
    for (const auto& f : files) {
        dataset::ImageRecord r;
        r.path = f;
        r.label = batch.request.cls.index;
        r.origin = dataset::Origin::synthetic;
        batch.records.push_back(std::move(r));
    }
}

}  // namespace

std::string sidecar_json(const SyntheticBatch& batch, const std::string& run_id, const std::vector<fs::path>& files) {
    const auto& rq = batch.request;
    ordered_json j;
    j["run_id"] = run_id;
    j["backend_id"] = batch.backend_id;
    ordered_json req;
    req["class"] = rq.cls.name;
    req["class_index"] = rq.cls.index;
    req["count"] = rq.count;
    req["seed"] = rq.seed;
    req["mode"] = to_string(rq.mode);
    req["resolution"] = rq.resolution;
    req["sampler"] = {{"steps", rq.sampler.steps},
                      {"guidance_scale", rq.sampler.guidance_scale},
                      {"strength", rq.sampler.strength}};
    std::vector<std::string> init;
    for (const auto& p : rq.init_images) init.push_back(p.string());
    req["init_images"] = init;
    j["request"] = req;
    j["prompt"] = batch.prompt;
    j["prompt_sha256"] = batch.prompt_sha256;
    j["adapter_sha256"] = batch.adapter_sha256 ? ordered_json(*batch.adapter_sha256) : ordered_json(nullptr);
    j["wall_time_s"] = batch.wall_time;
    ordered_json list = ordered_json::array();
    for (std::size_t i = 0; i < files.size(); ++i) {
        list.push_back({{"file", files[i].filename().string()},
                        {"index", i},
                        {"seed", rq.seed + static_cast<std::uint64_t>(i)}});
    }
    j["files"] = list;
    return j.dump(2) + "\n";
}

std::vector<fs::path> export_images(SyntheticBatch& batch, const fs::path& out_root, const std::string& run_id) {
    check_run_id(run_id);
    const auto& cls = batch.request.cls.name;
    const fs::path dir = out_root / cls;
    if (const auto existing = run_files(dir, run_id); !existing.empty()) {
        throw DataError("run id '" + run_id + "' already exists in " + dir.string() + " (" + existing.front().string() +
                        "); refusing to overwrite");
    }
    if (static_cast<int>(batch.images.size()) != batch.request.count) {
        throw DataError("batch holds " + std::to_string(batch.images.size()) + " images but requested " +
                        std::to_string(batch.request.count));
    }
    fs::create_directories(dir);
    std::vector<fs::path> files;
    for (const auto& g : batch.images) {
        files.push_back(image_path(out_root, cls, run_id, g.index));
        write_png_atomic(files.back(), g.image);
    }
    write_text(sidecar_path(out_root, cls, run_id), sidecar_json(batch, run_id, files));
    fill_records(batch, files);
    return files;
}

SyntheticBatch generate_to_directory(GenerationBackend& backend, const GenerationRequest& request,
                                     const std::string& prompt, const lora::LoraAdapter* adapter,
                                     const fs::path& out_root, const std::string& run_id, bool resume) {
    check_run_id(run_id);
    validate_request(request);
    const auto& cls = request.cls.name;
    const fs::path dir = out_root / cls;
    if (fs::exists(sidecar_path(out_root, cls, run_id))) {
        throw DataError("run id '" + run_id + "' was already exported to " + dir.string());
    }
    int first = 0;
    const auto existing = run_files(dir, run_id);
    if (!existing.empty()) {
        if (!resume) {
            throw DataError("run id '" + run_id + "' already has files in " + dir.string() +
                            "; pass resume to continue it");
        }
        while (first < request.count && fs::exists(image_path(out_root, cls, run_id, first))) ++first;
    }
    fs::create_directories(dir);

    BatchOptions opts;
    opts.first_index = first;
    opts.sink = [&](const GeneratedImage& g) { write_png_atomic(image_path(out_root, cls, run_id, g.index), g.image); };
    auto batch = generate_batch(backend, request, prompt, adapter, opts);

    std::vector<fs::path> files;
    for (int i = 0; i < request.count; ++i) files.push_back(image_path(out_root, cls, run_id, i));
    write_text(sidecar_path(out_root, cls, run_id), sidecar_json(batch, run_id, files));
    fill_records(batch, files);
    return batch;
}

std::size_t write_stub_corpus(const fs::path& root, const std::vector<std::pair<std::string, int>>& class_counts,
                              std::uint64_t seed, int resolution) {
    std::size_t written = 0;
    for (const auto& [name, count] : class_counts) {
        fs::create_directories(root / name);
        for (int i = 0; i < count; ++i) {
            char file[32];
            std::snprintf(file, sizeof file, "img_%05d.png", i);
            const std::uint64_t s = derive_seed(seed, {fnv1a64(name), static_cast<std::uint64_t>(i)});
            write_png(root / name / file, stub_generate(name, s, resolution));
            ++written;
        }
    }
    return written;
}

}  // namespace cytodiff::generation
