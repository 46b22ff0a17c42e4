#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "cytodiff/common/image.hpp"

namespace cytodiff::dataset {

struct ClassLabel {
    std::string name;
    int index = 0;

    bool operator==(const ClassLabel&) const = default;
};

/// Ordered set of class labels; indices form a contiguous bijection onto
/// names and there are at least two classes.
class ClassRegistry {
public:
    ClassRegistry() = default;
    explicit ClassRegistry(const std::vector<std::string>& names);

    /// Validates that indices are exactly 0..C-1 (in any order).
    static ClassRegistry from_labels(std::vector<ClassLabel> labels);

    std::size_t size() const { return labels_.size(); }
    const ClassLabel& at(int index) const;
    const ClassLabel& find(std::string_view name) const;
    std::optional<int> index_of(std::string_view name) const;
    const std::vector<ClassLabel>& labels() const { return labels_; }
    std::vector<std::string> names() const;

    bool operator==(const ClassRegistry&) const = default;

private:
    std::vector<ClassLabel> labels_;
};

/// The 15 single-cell classes of the Munich AML morphology corpus.
ClassRegistry munich_aml_registry();

enum class Origin { real, synthetic };
enum class Split { train, validation, test, unassigned };

std::string_view to_string(Origin origin);
std::string_view to_string(Split split);
Origin parse_origin(std::string_view text);
Split parse_split(std::string_view text);

struct ImageRecord {
    std::filesystem::path path;
    int label = 0;
    Origin origin = Origin::real;
    std::optional<int> fold;
    Split split = Split::unassigned;

    bool operator==(const ImageRecord&) const = default;
};

struct ClassCount {
    std::size_t n_real = 0;
    std::size_t n_synthetic = 0;

    std::size_t total() const { return n_real + n_synthetic; }
    bool operator==(const ClassCount&) const = default;
};

class DatasetManifest {
public:
    DatasetManifest() = default;
    DatasetManifest(ClassRegistry registry, std::uint64_t seed);

    const ClassRegistry& registry() const { return registry_; }
    std::uint64_t seed() const { return seed_; }
    const std::vector<ImageRecord>& records() const { return records_; }
    std::size_t size() const { return records_.size(); }

    /// Appends a record; throws DataError if its label is not registered.
    void add(ImageRecord record);

    /// Per-class (n_real, n_synthetic), always recomputed from the records.
    std::vector<ClassCount> class_counts() const;
    ClassCount totals() const;

    /// Record indices carrying the given split label.
    std::vector<std::size_t> indices_in(Split split) const;

    /// Sets fold/split of one record. Path, label and origin never change.
    void assign(std::size_t index, std::optional<int> fold, Split split);

    bool operator==(const DatasetManifest&) const = default;

private:
    ClassRegistry registry_;
    std::uint64_t seed_ = 0;
    std::vector<ImageRecord> records_;
};

inline constexpr int kManifestSchemaVersion = 1;

/// Line-delimited JSON: a header line {schema_version, seed, class_registry}
/// followed by one {path, label, origin, fold, split} object per record.
std::string serialize_manifest(const DatasetManifest& manifest);
DatasetManifest parse_manifest(std::string_view text);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::filesystem::path& path);
std::string manifest_hash(const DatasetManifest& manifest);

// ---------------------------------------------------------------------------
// Corpus scanning

struct ScanOptions {
    std::vector<std::string> extensions{"png", "jpg", "jpeg", "tiff", "tif", "bmp"};
    std::uint64_t seed = 0;
    bool verify_decodable = true;
};

struct SkippedFile {
    std::filesystem::path path;
    std::string reason;
};

struct ScanResult {
    DatasetManifest manifest;
    std::vector<SkippedFile> skipped;
};

/// Reads `<root>/<class_name>/<files>`. Files are visited in sorted path
/// order. Throws DataError for missing class folders (all listed) or a
/// class with no decodable image.
ScanResult scan_corpus(const std::filesystem::path& root, const ClassRegistry& registry, Origin origin,
                       const ScanOptions& options = {});

// ---------------------------------------------------------------------------
// Stratified k-fold splitting

struct SplitFractions {
    double train = 0.6;
    double validation = 0.2;
    double test = 0.2;

    bool operator==(const SplitFractions&) const = default;
};

enum class FoldScheme {
    rotated_disjoint,  // one shuffle per class, test blocks rotate through it
    independent,       // fresh shuffle per fold
};

struct SplitAssignment {
    int fold_id = 0;
    SplitFractions fractions;
    std::vector<Split> labels;  // indexed like manifest.records()

    bool operator==(const SplitAssignment&) const = default;
};

/// Per-class split sizes (train, validation, test) for a class of size n.
struct SplitSizes {
    std::size_t train = 0, validation = 0, test = 0;
};
SplitSizes split_sizes(std::size_t n, const SplitFractions& fractions);

/// Only real records are stratified; synthetic records present in the
/// manifest are always labelled train unless include_synthetic is set.
std::vector<SplitAssignment> stratified_kfold(const DatasetManifest& manifest, int k, const SplitFractions& fractions,
                                              std::uint64_t seed, FoldScheme scheme = FoldScheme::rotated_disjoint,
                                              bool include_synthetic = false);

DatasetManifest apply_assignment(const DatasetManifest& manifest, const SplitAssignment& assignment);

std::string assignment_hash(const SplitAssignment& assignment);

// ---------------------------------------------------------------------------
// Few-shot selection

enum class SelectionMode { manual_list, seeded_random };

struct FewShotSelection {
    ClassLabel cls;
    int shot_count = 0;
    std::vector<ImageRecord> records;
    SelectionMode mode = SelectionMode::seeded_random;
};

using FewShotSource = std::variant<std::uint64_t, std::vector<std::filesystem::path>>;

inline const std::set<int> kDefaultShotCounts{1, 4, 8, 16};

/// Draws from real records of the class in the train split (or from all
/// real records of the class if the manifest has no split assigned yet).
FewShotSelection select_few_shot(const DatasetManifest& manifest, std::string_view class_name, int shot_count,
                                 const FewShotSource& source, const std::set<int>& allowed_shots = kDefaultShotCounts);

// ---------------------------------------------------------------------------
// Synthetic merge

struct MergeOptions {
    ScanOptions scan;
    // Distributes synthetic images over train/validation/test with the given
    // fractions instead of train only. Reproduces mixed-origin test sets.
    bool allow_synthetic_eval = false;
    SplitFractions fractions;
};

/// Same as merge_synthetic but draws from an already scanned synthetic corpus.
DatasetManifest merge_synthetic(const DatasetManifest& manifest, const DatasetManifest& synth_corpus,
                                std::size_t per_class_count, const MergeOptions& options = {});

/// Appends exactly per_class_count synthetic records per class (first files
/// in sorted order). Existing records are untouched.
DatasetManifest merge_synthetic(const DatasetManifest& manifest, const std::filesystem::path& synth_root,
                                std::size_t per_class_count, const MergeOptions& options = {});

/// Available images per class in a folder-per-class synthetic corpus
/// (extension filter only, no decoding).
std::vector<std::size_t> count_corpus_files(const std::filesystem::path& root, const ClassRegistry& registry,
                                            const std::vector<std::string>& extensions);

// ---------------------------------------------------------------------------
// Augmentation

struct ColorJitter {
    double brightness = 0.0;
    double contrast = 0.0;
    double saturation = 0.0;
    double hue = 0.0;  // fraction of a full hue turn, in [0, 0.5]

    bool operator==(const ColorJitter&) const = default;
};

/// Train-time augmentation. Validation and test are never augmented.
struct AugmentationPolicy {
    double rotation_degrees = 0.0;
    double horizontal_flip = 0.0;
    double vertical_flip = 0.0;
    ColorJitter color_jitter;

    static AugmentationPolicy standard();
    bool is_identity() const;
    static bool applies_to(Split split) { return split == Split::train; }

    bool operator==(const AugmentationPolicy&) const = default;
};

Image apply_augmentation(const Image& image, const AugmentationPolicy& policy, std::mt19937_64& rng);

/// Augments an already decoded sample when its record is in the train split
/// and returns it unchanged otherwise. The RNG is seeded purely from
/// (global_seed, record_index, epoch), so worker scheduling never matters.
Image prepare_sample(const Image& decoded, const ImageRecord& record, std::size_t record_index,
                     const AugmentationPolicy& policy, std::uint64_t global_seed, std::uint64_t epoch);

/// Decodes a record at the given resolution. Train records are augmented
/// with an RNG seeded purely from (global_seed, record_index, epoch).
Image load_sample(const ImageRecord& record, std::size_t record_index, int resolution,
                  const AugmentationPolicy& policy, std::uint64_t global_seed, std::uint64_t epoch);

}  // namespace cytodiff::dataset
