#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "dfformer/image.hpp"
#include "dfformer/tensor.hpp"

namespace dff {

/// The two classes. Available (tissue sufficient for examination) is the
/// positive class throughout.
enum class Label { unavailable = 0, available = 1 };

inline int label_index(Label l) { return static_cast<int>(l); }
const char* to_string(Label l);
Label parse_label(const std::string& s);

struct ImageRecord {
    std::string id;
    std::string path;  // relative to the manifest's directory
    Label label = Label::unavailable;
    int fold = -1;  // unassigned until make_folds
};

/// Per-channel normalization constants.
struct NormStats {
    std::array<double, 3> mean{0.0, 0.0, 0.0};
    std::array<double, 3> stddev{1.0, 1.0, 1.0};
};

struct DatasetManifest {
    std::vector<ImageRecord> records;
    int k_folds = 0;
    std::int64_t image_h = 0;
    std::int64_t image_w = 0;
    /// When false, `global_norm` is applied everywhere instead of per-fold
    /// training-split statistics.
    bool per_fold_norm = true;
    NormStats global_norm;
    /// Records the fixed augmentation enumeration the dataset is meant to
    /// be trained with.
    std::string augmentation;

    void validate() const;
};

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

enum class AugOp {
    original,
    crop,  // central 80% region resized back to full size
    hflip,
    vflip,
    rot90,
    rot180,
    rot270,
    hflip_crop,
    rot90_crop,
};

inline constexpr double kCropFraction = 0.8;

/// The fixed, deterministic variant list: 2 entries for Available,
/// 9 for Unavailable.
const std::vector<AugOp>& augment_plan(Label label);
std::string augment_plan_description();

/// One variant of a square image.
Tensor<float> apply_augment(const Tensor<float>& img, AugOp op);

/// All variants, in plan order.
std::vector<Tensor<float>> augment(const Tensor<float>& img, Label label);

// ---------------------------------------------------------------------------
// folds
// ---------------------------------------------------------------------------

/// Assigns every record to one of k folds. Stratified mode shuffles each
/// class separately and deals round-robin, so class counts differ by at
/// most one across folds; it requires k <= minority class size.
void make_folds(DatasetManifest& manifest, int k, std::uint64_t seed, bool stratified = true);

// ---------------------------------------------------------------------------
// loading
// ---------------------------------------------------------------------------

/// Decodes an 8-bit RGB image, resizes bilinearly to (h, w), scales to [0,1].
Tensor<float> load_and_resize(const std::filesystem::path& path, std::int64_t h, std::int64_t w);

NormStats compute_norm_stats(const std::vector<Tensor<float>>& images,
                             const std::vector<int>& indices);
void normalize_inplace(Tensor<float>& img, const NormStats& stats);

/// Manifest plus all referenced images decoded into memory (unnormalized).
struct LoadedDataset {
    DatasetManifest manifest;
    std::filesystem::path manifest_dir;
    std::vector<Tensor<float>> images;  // one (1,3,H,W) tensor per record
};

LoadedDataset load_dataset(const std::filesystem::path& manifest_path);

// ---------------------------------------------------------------------------
// synthetic data
// ---------------------------------------------------------------------------

/// Generator settings for the small-object stand-in dataset: the positive
/// class carries a few textured elliptical blobs on a noisy background, the
/// negative class only background noise and sub-threshold speckles.
struct SyntheticParams {
    std::int64_t image_h = 64;
    std::int64_t image_w = 64;
    std::int64_t count_available = 100;
    std::int64_t count_unavailable = 100;
    double object_radius_min = 4.0;
    double object_radius_max = 9.0;
    std::int64_t object_count_min = 1;
    std::int64_t object_count_max = 3;
    double background_noise_std = 0.05;
    double negative_occupancy_max = 0.01;
    std::uint64_t seed = 0;
};

/// Writes PNGs plus manifest.json into out_dir; fully reproducible from the
/// seed. Returns the manifest (folds unassigned).
DatasetManifest generate_synthetic(const SyntheticParams& params,
                                   const std::filesystem::path& out_dir);

}  // namespace dff
