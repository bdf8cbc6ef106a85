#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dfformer/data.hpp"
#include "dfformer/metrics.hpp"
#include "dfformer/model.hpp"
#include "dfformer/optimizer.hpp"

namespace dff {

struct TrainConfig {
    std::int64_t batch_size = 5;
    std::int64_t epochs = 50;
    double learning_rate = 0.001;
    enum class Opt { sgd_momentum, adamw } optimizer = Opt::adamw;
    double weight_decay = 0.0;
    double momentum = 0.9;
    /// Apply the class-asymmetric variant expansion to training images.
    bool augment = true;
    std::uint64_t seed = 0;
};

std::unique_ptr<Optimizer<float>> make_optimizer(const TrainConfig& config);
const char* to_string(TrainConfig::Opt o);
TrainConfig::Opt parse_optimizer(const std::string& s);

/// Tie at equal logits predicts Unavailable, the costlier class to miss.
inline Label predict_label(float unavailable_logit, float available_logit) {
    return available_logit > unavailable_logit ? Label::available : Label::unavailable;
}

struct FoldHistory {
    std::vector<double> epoch_mean_loss;
};

/// Trains in place over epochs x ceil(N_variants / batch) steps. Training
/// images are expanded by the augmentation plan (when enabled) and shuffled
/// per epoch from (seed, epoch). Throws on a non-finite loss.
FoldHistory train_fold(Model<float>& model, const LoadedDataset& data,
                       const std::vector<int>& train_indices, const NormStats& norm,
                       const TrainConfig& config, std::uint64_t shuffle_salt = 0);

/// Un-augmented evaluation: one image, one argmax prediction.
ConfusionMatrix evaluate(Model<float>& model, const LoadedDataset& data,
                         const std::vector<int>& indices, const NormStats& norm,
                         std::int64_t batch_size = 8);

struct FoldResult {
    int fold = -1;
    ConfusionMatrix cm;
    FoldHistory history;
    NormStats norm;
    bool ok = false;
    std::string error;
};

struct CrossValResult {
    std::vector<FoldResult> folds;
    ConfusionMatrix aggregate;
    Rates rates;
    bool failed = false;
    std::string error;
};

/// Trains one fresh model per fold (same init seed for each), evaluates each
/// held-out fold, and sums the per-fold confusion matrices. Writes
/// report.json, report.csv, fold_<i>_history.csv and per-fold checkpoints
/// into out_dir (pass an empty path to skip artifacts). Folds run on `jobs`
/// threads; the result is identical to a sequential run.
CrossValResult cross_validate(const LoadedDataset& data, const ModelConfig& model_config,
                              const TrainConfig& train_config,
                              const std::filesystem::path& out_dir, int jobs = 1,
                              const std::string& row_label = "");

/// report.json for a finished (or failed) run.
void write_report_json(const std::filesystem::path& path, const CrossValResult& result,
                       const std::string& row_label);

}  // namespace dff
