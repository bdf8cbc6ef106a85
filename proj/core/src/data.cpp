#include "dfformer/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "dfformer/rng.hpp"

namespace dff {

using nlohmann::json;

const char* to_string(Label l) {
    return l == Label::available ? "Available" : "Unavailable";
}

Label parse_label(const std::string& s) {
    if (s == "Available") return Label::available;
    if (s == "Unavailable") return Label::unavailable;
    throw std::invalid_argument("unknown label: " + s);
}

void DatasetManifest::validate() const {
    std::set<std::string> ids;
    for (const auto& r : records) {
        if (!ids.insert(r.id).second) {
            throw std::invalid_argument("manifest: duplicate record id '" + r.id + "'");
        }
        if (k_folds > 0 && (r.fold < 0 || r.fold >= k_folds)) {
            throw std::invalid_argument("manifest: record '" + r.id + "' has fold " +
                                        std::to_string(r.fold) + " outside [0, " +
                                        std::to_string(k_folds) + ")");
        }
    }
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw std::runtime_error("cannot open manifest " + path.string());
    }
    json j = json::parse(is);
    DatasetManifest m;
    m.k_folds = j.value("k_folds", 0);
    m.image_h = j.value("image_h", 0);
    m.image_w = j.value("image_w", 0);
    m.per_fold_norm = j.value("per_fold_norm", true);
    if (j.contains("norm_mean")) {
        for (int c = 0; c < 3; ++c) {
            m.global_norm.mean[c] = j["norm_mean"][c];
            m.global_norm.stddev[c] = j["norm_std"][c];
        }
    }
    m.augmentation = j.value("augmentation", "");
    for (const auto& rj : j.at("records")) {
        ImageRecord r;
        r.id = rj.at("id");
        r.path = rj.at("path");
        r.label = parse_label(rj.at("label"));
        r.fold = rj.value("fold", -1);
        m.records.push_back(std::move(r));
    }
    m.validate();
    return m;
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    json j;
    j["k_folds"] = m.k_folds;
    j["image_h"] = m.image_h;
    j["image_w"] = m.image_w;
    j["per_fold_norm"] = m.per_fold_norm;
    if (!m.per_fold_norm) {
        j["norm_mean"] = m.global_norm.mean;
        j["norm_std"] = m.global_norm.stddev;
    }
    j["augmentation"] = m.augmentation.empty() ? augment_plan_description() : m.augmentation;
    json records = json::array();
    for (const auto& r : m.records) {
        records.push_back({{"id", r.id}, {"path", r.path}, {"label", to_string(r.label)},
                           {"fold", r.fold}});
    }
    j["records"] = std::move(records);
    std::ofstream os(path);
    if (!os) {
        throw std::runtime_error("cannot write manifest " + path.string());
    }
    os << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

const std::vector<AugOp>& augment_plan(Label label) {
    static const std::vector<AugOp> available = {AugOp::original, AugOp::crop};
    static const std::vector<AugOp> unavailable = {
        AugOp::original, AugOp::crop,   AugOp::hflip,      AugOp::vflip,     AugOp::rot90,
        AugOp::rot180,   AugOp::rot270, AugOp::hflip_crop, AugOp::rot90_crop};
    return label == Label::available ? available : unavailable;
}

std::string augment_plan_description() {
    return "available: original, crop80; unavailable: original, crop80, hflip, vflip, "
           "rot90, rot180, rot270, hflip(crop80), rot90(crop80); crop80 = central 80% "
           "resized back to full size";
}

Tensor<float> apply_augment(const Tensor<float>& img, AugOp op) {
    if (img.h() != img.w()) {
        throw std::invalid_argument("apply_augment: requires a square image, got " +
                                    shape_str(img));
    }
    switch (op) {
        case AugOp::original: return img;
        case AugOp::crop: return center_crop_resize(img, kCropFraction);
        case AugOp::hflip: return hflip(img);
        case AugOp::vflip: return vflip(img);
        case AugOp::rot90: return rot90(img);
        case AugOp::rot180: return rot180(img);
        case AugOp::rot270: return rot270(img);
        case AugOp::hflip_crop: return hflip(center_crop_resize(img, kCropFraction));
        case AugOp::rot90_crop: return rot90(center_crop_resize(img, kCropFraction));
    }
    throw std::invalid_argument("apply_augment: unknown op");
}

std::vector<Tensor<float>> augment(const Tensor<float>& img, Label label) {
    std::vector<Tensor<float>> out;
    for (AugOp op : augment_plan(label)) {
        out.push_back(apply_augment(img, op));
    }
    return out;
}

// ---------------------------------------------------------------------------
// folds
// ---------------------------------------------------------------------------

void make_folds(DatasetManifest& manifest, int k, std::uint64_t seed, bool stratified) {
    if (k < 1) {
        throw std::invalid_argument("make_folds: k must be >= 1");
    }
    if (static_cast<std::size_t>(k) > manifest.records.size()) {
        throw std::invalid_argument("make_folds: k larger than the dataset");
    }
    std::vector<std::vector<std::size_t>> groups;
    if (stratified) {
        std::vector<std::size_t> avail, unavail;
        for (std::size_t i = 0; i < manifest.records.size(); ++i) {
            (manifest.records[i].label == Label::available ? avail : unavail).push_back(i);
        }
        const std::size_t minority = std::min(avail.size(), unavail.size());
        if (static_cast<std::size_t>(k) > minority && minority > 0) {
            throw std::invalid_argument(
                "make_folds: stratified split needs k <= minority class size (" +
                std::to_string(minority) + ")");
        }
        groups = {std::move(avail), std::move(unavail)};
    } else {
        std::vector<std::size_t> all(manifest.records.size());
        for (std::size_t i = 0; i < all.size(); ++i) {
            all[i] = i;
        }
        groups = {std::move(all)};
    }

    for (std::size_t g = 0; g < groups.size(); ++g) {
        Rng rng(mix_seed(seed, 0x666f6c64ull + g));
        rng.shuffle(groups[g]);
        for (std::size_t i = 0; i < groups[g].size(); ++i) {
            manifest.records[groups[g][i]].fold = static_cast<int>(i % static_cast<std::size_t>(k));
        }
    }
    manifest.k_folds = k;
    manifest.validate();
}

// ---------------------------------------------------------------------------
// loading
// ---------------------------------------------------------------------------

Tensor<float> load_and_resize(const std::filesystem::path& path, std::int64_t h, std::int64_t w) {
    return resize_bilinear(image_to_tensor(read_png_rgb8(path)), h, w);
}

NormStats compute_norm_stats(const std::vector<Tensor<float>>& images,
                             const std::vector<int>& indices) {
    NormStats stats;
    std::array<double, 3> sum{0, 0, 0}, sumsq{0, 0, 0};
    std::int64_t count = 0;
    for (int idx : indices) {
        const Tensor<float>& img = images[static_cast<std::size_t>(idx)];
        const std::int64_t per_channel = img.h() * img.w();
        for (std::int64_t c = 0; c < 3; ++c) {
            const float* p = img.data.data() + c * per_channel;
            for (std::int64_t i = 0; i < per_channel; ++i) {
                sum[static_cast<std::size_t>(c)] += p[i];
                sumsq[static_cast<std::size_t>(c)] += static_cast<double>(p[i]) * p[i];
            }
        }
        count += per_channel;
    }
    if (count == 0) {
        throw std::invalid_argument("compute_norm_stats: no images");
    }
    for (std::size_t c = 0; c < 3; ++c) {
        stats.mean[c] = sum[c] / static_cast<double>(count);
        const double var = sumsq[c] / static_cast<double>(count) - stats.mean[c] * stats.mean[c];
        stats.stddev[c] = std::sqrt(std::max(var, 1e-8));
    }
    return stats;
}

void normalize_inplace(Tensor<float>& img, const NormStats& stats) {
    const std::int64_t per_channel = img.h() * img.w();
    for (std::int64_t n = 0; n < img.b(); ++n) {
        for (std::int64_t c = 0; c < 3; ++c) {
            const float mean = static_cast<float>(stats.mean[static_cast<std::size_t>(c)]);
            const float inv = 1.0f / static_cast<float>(stats.stddev[static_cast<std::size_t>(c)]);
            float* p = img.data.data() + (n * 3 + c) * per_channel;
            for (std::int64_t i = 0; i < per_channel; ++i) {
                p[i] = (p[i] - mean) * inv;
            }
        }
    }
}

LoadedDataset load_dataset(const std::filesystem::path& manifest_path) {
    LoadedDataset ds;
    ds.manifest = load_manifest(manifest_path);
    ds.manifest_dir = manifest_path.parent_path();
    if (ds.manifest.image_h < 1 || ds.manifest.image_w < 1) {
        throw std::runtime_error("manifest has no target image size");
    }
    ds.images.reserve(ds.manifest.records.size());
    for (const auto& r : ds.manifest.records) {
        ds.images.push_back(
            load_and_resize(ds.manifest_dir / r.path, ds.manifest.image_h, ds.manifest.image_w));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// synthetic data
// ---------------------------------------------------------------------------

namespace {

void add_background(Tensor<float>& img, Rng& rng, double noise_std) {
    const std::array<float, 3> base = {0.34f, 0.32f, 0.36f};
    for (std::int64_t c = 0; c < 3; ++c) {
        for (std::int64_t y = 0; y < img.h(); ++y) {
            for (std::int64_t x = 0; x < img.w(); ++x) {
                img.at(0, c, y, x) =
                    std::clamp(base[static_cast<std::size_t>(c)] +
                                   static_cast<float>(rng.normal(0.0, noise_std)),
                               0.0f, 1.0f);
            }
        }
    }
}

/// Paints one textured ellipse; returns the number of pixels covered.
std::int64_t add_blob(Tensor<float>& img, Rng& rng, double cy, double cx, double ry, double rx,
                      double angle, float brightness) {
    const std::array<float, 3> tint = {1.00f, 0.78f, 0.86f};  // tissue-like pink
    const double ca = std::cos(angle), sa = std::sin(angle);
    std::int64_t covered = 0;
    const std::int64_t y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(cy - ry - rx - 1));
    const std::int64_t y1 = std::min(img.h(), static_cast<std::int64_t>(cy + ry + rx + 2));
    const std::int64_t x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(cx - ry - rx - 1));
    const std::int64_t x1 = std::min(img.w(), static_cast<std::int64_t>(cx + ry + rx + 2));
    for (std::int64_t y = y0; y < y1; ++y) {
        for (std::int64_t x = x0; x < x1; ++x) {
            const double dy = static_cast<double>(y) - cy;
            const double dx = static_cast<double>(x) - cx;
            const double u = (dx * ca + dy * sa) / rx;
            const double v = (-dx * sa + dy * ca) / ry;
            const double d = u * u + v * v;
            if (d >= 1.0) {
                continue;
            }
            ++covered;
            const float edge = static_cast<float>(std::min(1.0, (1.0 - d) * 3.0));
            const float texture = static_cast<float>(rng.normal(0.0, 0.06));
            for (std::int64_t c = 0; c < 3; ++c) {
                float& px = img.at(0, c, y, x);
                const float target = std::clamp(
                    brightness * tint[static_cast<std::size_t>(c)] + texture, 0.0f, 1.0f);
                px = px + edge * (target - px);
            }
        }
    }
    return covered;
}

}  // namespace

DatasetManifest generate_synthetic(const SyntheticParams& params,
                                   const std::filesystem::path& out_dir) {
    if (params.image_h < 8 || params.image_w < 8 || params.count_available < 0 ||
        params.count_unavailable < 0 || params.object_radius_min <= 0 ||
        params.object_radius_max < params.object_radius_min ||
        params.object_count_min < 1 || params.object_count_max < params.object_count_min) {
        throw std::invalid_argument("generate_synthetic: invalid parameters");
    }
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (!std::filesystem::is_directory(out_dir)) {
        throw std::runtime_error("cannot create output directory " + out_dir.string());
    }

    DatasetManifest manifest;
    manifest.image_h = params.image_h;
    manifest.image_w = params.image_w;
    manifest.augmentation = augment_plan_description();

    const double area = static_cast<double>(params.image_h * params.image_w);

    const auto emit = [&](Label label, std::int64_t index) {
        const char* cls = label == Label::available ? "avail" : "unavail";
        char id[64];
        std::snprintf(id, sizeof(id), "%s_%04lld", cls, static_cast<long long>(index));
        Rng rng(mix_seed(params.seed, hash_name(id)));

        Tensor<float> img(1, 3, params.image_h, params.image_w);
        add_background(img, rng, params.background_noise_std);

        if (label == Label::available) {
            const std::int64_t blobs =
                params.object_count_min +
                static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(
                    params.object_count_max - params.object_count_min + 1)));
            for (std::int64_t b = 0; b < blobs; ++b) {
                const double ry = rng.uniform(params.object_radius_min, params.object_radius_max);
                const double rx = rng.uniform(params.object_radius_min, params.object_radius_max);
                const double cy = rng.uniform(0.15, 0.85) * static_cast<double>(params.image_h);
                const double cx = rng.uniform(0.15, 0.85) * static_cast<double>(params.image_w);
                const double angle = rng.uniform(0.0, 3.14159265358979323846);
                const float brightness = static_cast<float>(rng.uniform(0.72, 0.88));
                add_blob(img, rng, cy, cx, ry, rx, angle, brightness);
            }
        } else {
            // Sub-threshold speckles, kept under the occupancy budget.
            const std::int64_t budget =
                static_cast<std::int64_t>(params.negative_occupancy_max * area);
            std::int64_t used = 0;
            const std::int64_t speckles = 2 + static_cast<std::int64_t>(rng.below(4));
            for (std::int64_t s = 0; s < speckles && used < budget; ++s) {
                const double cy = rng.uniform(0.05, 0.95) * static_cast<double>(params.image_h);
                const double cx = rng.uniform(0.05, 0.95) * static_cast<double>(params.image_w);
                used += add_blob(img, rng, cy, cx, 1.0, 1.0, 0.0,
                                 static_cast<float>(rng.uniform(0.55, 0.65)));
            }
        }

        const std::string file = std::string(id) + ".png";
        write_png_rgb8(out_dir / file, tensor_to_image(img));
        manifest.records.push_back({id, file, label, -1});
    };

    for (std::int64_t i = 0; i < params.count_available; ++i) {
        emit(Label::available, i);
    }
    for (std::int64_t i = 0; i < params.count_unavailable; ++i) {
        emit(Label::unavailable, i);
    }
    save_manifest(manifest, out_dir / "manifest.json");
    return manifest;
}

}  // namespace dff
