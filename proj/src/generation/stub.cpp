#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "cytodiff/common/hash.hpp"
#include "cytodiff/common/seed.hpp"
#include "cytodiff/generation.hpp"

namespace cytodiff::generation {

namespace {

struct Rgb {
    float r, g, b;
};

Rgb hsv(float hue_deg, float s, float v) {
    hue_deg = std::fmod(hue_deg, 360.0f);
    if (hue_deg < 0) hue_deg += 360.0f;
    const float c = v * s;
    const float hp = hue_deg / 60.0f;
    const float x = c * (1 - std::abs(std::fmod(hp, 2.0f) - 1));
    Rgb o{0, 0, 0};
    switch (static_cast<int>(hp)) {
        case 0: o = {c, x, 0}; break;
        case 1: o = {x, c, 0}; break;
        case 2: o = {0, c, x}; break;
        case 3: o = {0, x, c}; break;
        case 4: o = {x, 0, c}; break;
        default: o = {c, 0, x}; break;
    }
    const float m = v - c;
    return {(o.r + m) * 255, (o.g + m) * 255, (o.b + m) * 255};
}

struct ClassStyle {
    float hue;          // degrees
    float radius;       // fraction of half-width
    int lobes;          // nucleus lobes
    float granules;     // granule count at unit radius
    float saturation;
};

ClassStyle style_of(const std::string& class_name) {
    const std::uint64_t h = fnv1a64(class_name);
    ClassStyle s;
    s.hue = static_cast<float>(h % 360);
    s.radius = 0.45f + 0.25f * static_cast<float>((h >> 16) % 100) / 100.0f;
    s.lobes = 1 + static_cast<int>((h >> 24) % 4);
    s.granules = static_cast<float>((h >> 32) % 40);
    s.saturation = 0.35f + 0.3f * static_cast<float>((h >> 40) % 100) / 100.0f;
    return s;
}

}  // namespace

Image stub_generate(const std::string& class_name, std::uint64_t seed, int resolution) {
    const ClassStyle style = style_of(class_name);
    std::mt19937_64 rng(derive_seed(seed, {fnv1a64(class_name)}));
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    std::normal_distribution<float> noise(0.0f, 10.0f);

    const float cx = 0.15f * u(rng), cy = 0.15f * u(rng);
    const float radius = style.radius * (1.0f + 0.15f * u(rng));
    const float aspect = 1.0f + 0.2f * u(rng);
    const float angle = std::numbers::pi_v<float> * u(rng);
    const float hue = style.hue + 15.0f * u(rng);
    const float value = 0.8f + 0.1f * u(rng);
    const Rgb background{232.0f + 6 * u(rng), 226.0f + 6 * u(rng), 236.0f + 6 * u(rng)};
    const Rgb cytoplasm = hsv(hue, style.saturation, value);
    const Rgb nucleus = hsv(hue + 25.0f, std::min(1.0f, style.saturation + 0.3f), value * 0.5f);
    const Rgb granule = hsv(hue + 40.0f, 0.8f, 0.3f);

    struct Dot {
        float x, y, r;
    };
    std::vector<Dot> lobes;
    for (int i = 0; i < style.lobes; ++i) {
        const float t = angle + 2 * std::numbers::pi_v<float> * i / style.lobes;
        const float off = style.lobes == 1 ? 0.0f : 0.3f * radius;
        lobes.push_back({cx + off * std::cos(t), cy + off * std::sin(t), radius * (0.45f / std::sqrt(float(style.lobes)) + 0.05f)});
    }
    std::vector<Dot> grains;
    const int n_grains = static_cast<int>(style.granules * (1.0f + 0.3f * u(rng)));
    for (int i = 0; i < n_grains; ++i) {
        const float t = std::numbers::pi_v<float> * u(rng);
        const float d = radius * 0.9f * std::sqrt(0.5f * (u(rng) + 1.0f));
        grains.push_back({cx + d * std::cos(t), cy + d * std::sin(t), 0.05f});
    }

    Image img(resolution, resolution);
    const float ca = std::cos(angle), sa = std::sin(angle);
    for (int py = 0; py < resolution; ++py) {
        for (int px = 0; px < resolution; ++px) {
            const float x = 2.0f * (px + 0.5f) / resolution - 1.0f;
            const float y = 2.0f * (py + 0.5f) / resolution - 1.0f;
            const float dx = x - cx, dy = y - cy;
            const float ex = (ca * dx + sa * dy) / (radius * aspect);
            const float ey = (-sa * dx + ca * dy) / (radius / aspect);
            Rgb c = background;
            if (ex * ex + ey * ey <= 1.0f) {
                c = cytoplasm;
                for (const auto& g : grains) {
                    if ((x - g.x) * (x - g.x) + (y - g.y) * (y - g.y) <= g.r * g.r) c = granule;
                }
                for (const auto& l : lobes) {
                    if ((x - l.x) * (x - l.x) + (y - l.y) * (y - l.y) <= l.r * l.r) c = nucleus;
                }
            }
            auto* out = img.at(px, py);
            out[0] = static_cast<std::uint8_t>(std::clamp(c.r + noise(rng), 0.0f, 255.0f));
            out[1] = static_cast<std::uint8_t>(std::clamp(c.g + noise(rng), 0.0f, 255.0f));
            out[2] = static_cast<std::uint8_t>(std::clamp(c.b + noise(rng), 0.0f, 255.0f));
        }
    }
    return img;
}

std::string StubBackend::register_adapter(const std::vector<std::uint8_t>& container, const std::string& sha256) {
    try {
        lora::deserialize_adapter(container);
    } catch (const std::exception& e) {
        throw BackendError(std::string("adapter rejected: ") + e.what(), false);
    }
    return "stub:" + sha256;
}

Image StubBackend::generate(const BackendCall& call) {
    if (call.width != call.height) throw BackendError("stub backend renders square images only", false);
    Image out = stub_generate(call.class_name, call.seed, call.width);
    if (call.mode == Mode::image_to_image && call.init_image) {
        const Image init = resize_image(*call.init_image, call.width, call.height);
        const double s = call.sampler.strength;
        for (std::size_t i = 0; i < out.pixels.size(); ++i) {
            out.pixels[i] = static_cast<std::uint8_t>(std::lround(s * out.pixels[i] + (1.0 - s) * init.pixels[i]));
        }
    }
    return out;
}

}  // namespace cytodiff::generation
