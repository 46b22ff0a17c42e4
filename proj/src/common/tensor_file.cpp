#include "cytodiff/common/tensor_file.hpp"

#include <fstream>
#include <functional>
#include <numeric>

#include "cytodiff/common/binary_io.hpp"
#include "cytodiff/common/error.hpp"
#include "cytodiff/common/hash.hpp"

namespace cytodiff {

namespace {

constexpr char kMagic[8] = {'C', 'Y', 'T', 'O', 'T', 'N', 'S', 'R'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

std::size_t NamedTensor::element_count() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, std::uint32_t b) { return a * b; });
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file: " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write file: " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write: " + path.string());
}

// Layout: magic[8] | u32 version | str metadata | u32 count |
//         count x (str name | u32 rank | rank x u32 dim | u64 offset) |
//         float32 payloads | u32 crc32
std::vector<std::uint8_t> serialize_tensor_file(const TensorFile& file) {
    ByteWriter w;
    w.bytes(std::span(reinterpret_cast<const std::uint8_t*>(kMagic), sizeof kMagic));
    w.u32(kVersion);
    w.str(file.metadata);
    w.u32(static_cast<std::uint32_t>(file.tensors.size()));

    std::vector<std::size_t> offset_slots;
    for (const auto& [name, tensor] : file.tensors) {
        if (tensor.element_count() != tensor.values.size()) {
            throw ContainerError(ContainerErrorKind::shape_mismatch, "tensor '" + name + "' shape/value mismatch");
        }
        w.str(name);
        w.u32(static_cast<std::uint32_t>(tensor.shape.size()));
        for (auto d : tensor.shape) w.u32(d);
        offset_slots.push_back(w.size());
        w.u64(0);
    }
    std::size_t i = 0;
    for (const auto& [name, tensor] : file.tensors) {
        w.patch_u64(offset_slots[i++], w.size());
        w.floats(tensor.values);
    }
    w.u32(crc32(w.buffer()));
    return std::move(w.buffer());
}

TensorFile deserialize_tensor_file(const std::vector<std::uint8_t>& bytes) {
    ByteReader r(bytes);
    TensorFile out;
    struct Entry {
        std::string name;
        std::vector<std::uint32_t> shape;
        std::uint64_t offset;
    };
    std::vector<Entry> entries;
    try {
        auto magic = r.raw(sizeof kMagic);
        if (!std::equal(magic.begin(), magic.end(), reinterpret_cast<const std::uint8_t*>(kMagic))) {
            throw ContainerError(ContainerErrorKind::bad_magic, "not a tensor container");
        }
        const auto version = r.u32();
        if (version != kVersion) {
            throw ContainerError(ContainerErrorKind::version_mismatch,
                                 "unsupported tensor container version " + std::to_string(version));
        }
        out.metadata = r.str();
        const auto count = r.u32();
        for (std::uint32_t i = 0; i < count; ++i) {
            Entry e;
            e.name = r.str();
            const auto rank = r.u32();
            for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(r.u32());
            e.offset = r.u64();
            entries.push_back(std::move(e));
        }
    } catch (const TruncatedRead&) {
        throw ContainerError(ContainerErrorKind::truncated, "truncated container");
    }

    std::uint64_t expected = r.position();
    for (const auto& e : entries) {
        if (e.offset != expected) {
            throw ContainerError(ContainerErrorKind::shape_mismatch, "tensor '" + e.name + "' offset inconsistent with shapes");
        }
        NamedTensor probe{e.shape, {}};
        expected += probe.element_count() * sizeof(float);
    }
    if (expected + sizeof(std::uint32_t) > bytes.size()) {
        throw ContainerError(ContainerErrorKind::truncated, "truncated container");
    }
    if (expected + sizeof(std::uint32_t) != bytes.size()) {
        throw ContainerError(ContainerErrorKind::shape_mismatch, "trailing bytes after tensor payloads");
    }
    std::uint32_t stored_crc;
    std::memcpy(&stored_crc, bytes.data() + expected, sizeof stored_crc);
    if (stored_crc != crc32(std::span(bytes.data(), expected))) {
        throw ContainerError(ContainerErrorKind::checksum_mismatch, "CRC32 mismatch");
    }
    for (const auto& e : entries) {
        NamedTensor t{e.shape, {}};
        t.values.resize(t.element_count());
        std::memcpy(t.values.data(), bytes.data() + e.offset, t.values.size() * sizeof(float));
        out.tensors.emplace(e.name, std::move(t));
    }
    return out;
}

void save_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
    write_file_bytes(path, serialize_tensor_file(file));
}

TensorFile load_tensor_file(const std::filesystem::path& path) { return deserialize_tensor_file(read_file_bytes(path)); }

}  // namespace cytodiff
