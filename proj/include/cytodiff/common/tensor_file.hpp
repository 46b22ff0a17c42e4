#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace cytodiff {

/// Float32 tensor with an explicit shape, stored row-major.
struct NamedTensor {
    std::vector<std::uint32_t> shape;
    std::vector<float> values;

    std::size_t element_count() const;
    bool operator==(const NamedTensor&) const = default;
};

/// Named-tensor container used for classifier checkpoints. `metadata` is an
/// opaque UTF-8 string (JSON in practice).
struct TensorFile {
    std::string metadata;
    std::map<std::string, NamedTensor> tensors;

    bool operator==(const TensorFile&) const = default;
};

enum class ContainerErrorKind { bad_magic, version_mismatch, truncated, shape_mismatch, checksum_mismatch };

class ContainerError : public std::runtime_error {
public:
    ContainerError(ContainerErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ContainerErrorKind kind() const noexcept { return kind_; }

private:
    ContainerErrorKind kind_;
};

std::vector<std::uint8_t> serialize_tensor_file(const TensorFile& file);
TensorFile deserialize_tensor_file(const std::vector<std::uint8_t>& bytes);

void save_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile load_tensor_file(const std::filesystem::path& path);

}  // namespace cytodiff
