#include "dfformer/train.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "dfformer/rng.hpp"
#include "dfformer/serialize.hpp"

namespace dff {

using nlohmann::json;

std::unique_ptr<Optimizer<float>> make_optimizer(const TrainConfig& config) {
    switch (config.optimizer) {
        case TrainConfig::Opt::adamw:
            return std::make_unique<AdamW<float>>(config.learning_rate, config.weight_decay);
        case TrainConfig::Opt::sgd_momentum:
            return std::make_unique<SgdMomentum<float>>(config.learning_rate, config.momentum);
    }
    throw std::invalid_argument("unknown optimizer");
}

const char* to_string(TrainConfig::Opt o) {
    return o == TrainConfig::Opt::adamw ? "adamw" : "sgd-momentum";
}

TrainConfig::Opt parse_optimizer(const std::string& s) {
    if (s == "adamw") return TrainConfig::Opt::adamw;
    if (s == "sgd-momentum" || s == "sgd") return TrainConfig::Opt::sgd_momentum;
    throw std::invalid_argument("unknown optimizer: " + s);
}

namespace {

struct Sample {
    int record = 0;
    int variant = 0;  // index into the record's augmentation plan
};

Tensor<float> make_batch(const LoadedDataset& data, const std::vector<Sample>& samples,
                         std::size_t begin, std::size_t end, const NormStats& norm,
                         bool augmented, std::vector<int>& labels_out) {
    const std::int64_t B = static_cast<std::int64_t>(end - begin);
    const std::int64_t H = data.manifest.image_h, W = data.manifest.image_w;
    Tensor<float> batch(B, 3, H, W);
    labels_out.clear();
    for (std::size_t i = begin; i < end; ++i) {
        const Sample& s = samples[i];
        const ImageRecord& rec = data.manifest.records[static_cast<std::size_t>(s.record)];
        Tensor<float> img = data.images[static_cast<std::size_t>(s.record)];
        if (augmented) {
            img = apply_augment(img, augment_plan(rec.label)[static_cast<std::size_t>(s.variant)]);
        }
        normalize_inplace(img, norm);
        std::memcpy(batch.data.data() + (i - begin) * 3 * H * W, img.data.data(),
                    sizeof(float) * 3 * H * W);
        labels_out.push_back(label_index(rec.label));
    }
    return batch;
}

}  // namespace

FoldHistory train_fold(Model<float>& model, const LoadedDataset& data,
                       const std::vector<int>& train_indices, const NormStats& norm,
                       const TrainConfig& config, std::uint64_t shuffle_salt) {
    if (train_indices.empty()) {
        throw std::invalid_argument("train_fold: no training records");
    }
    std::vector<Sample> samples;
    for (int idx : train_indices) {
        const Label label = data.manifest.records[static_cast<std::size_t>(idx)].label;
        const int variants =
            config.augment ? static_cast<int>(augment_plan(label).size()) : 1;
        for (int v = 0; v < variants; ++v) {
            samples.push_back({idx, v});
        }
    }

    model.set_training(true);
    const std::vector<ParamRef<float>> params = model.parameters();
    std::unique_ptr<Optimizer<float>> opt = make_optimizer(config);

    FoldHistory history;
    std::int64_t step = 0;
    for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
        Rng rng(mix_seed(mix_seed(config.seed, shuffle_salt),
                         0x65706f63ull + static_cast<std::uint64_t>(epoch)));
        rng.shuffle(samples);

        double loss_sum = 0.0;
        std::int64_t batches = 0;
        for (std::size_t begin = 0; begin < samples.size();
             begin += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end =
                std::min(samples.size(), begin + static_cast<std::size_t>(config.batch_size));
            std::vector<int> labels;
            Tensor<float> batch = make_batch(data, samples, begin, end, norm, config.augment,
                                             labels);
            model.zero_grad();
            Tensor<float> logits = model.forward(batch);
            LossResult<float> loss = softmax_cross_entropy(logits, labels);
            ++step;
            if (!std::isfinite(loss.loss)) {
                throw std::runtime_error("train_fold: non-finite loss at step " +
                                         std::to_string(step));
            }
            model.backward(loss.grad_logits);
            opt->step(params);
            loss_sum += loss.loss;
            ++batches;
        }
        history.epoch_mean_loss.push_back(batches > 0 ? loss_sum / static_cast<double>(batches)
                                                      : 0.0);
    }
    return history;
}

ConfusionMatrix evaluate(Model<float>& model, const LoadedDataset& data,
                         const std::vector<int>& indices, const NormStats& norm,
                         std::int64_t batch_size) {
    if (indices.empty()) {
        throw std::invalid_argument("evaluate: no records");
    }
    model.set_training(false);
    ConfusionMatrix cm;
    std::vector<Sample> samples;
    for (int idx : indices) {
        samples.push_back({idx, 0});
    }
    for (std::size_t begin = 0; begin < samples.size();
         begin += static_cast<std::size_t>(batch_size)) {
        const std::size_t end =
            std::min(samples.size(), begin + static_cast<std::size_t>(batch_size));
        std::vector<int> labels;
        Tensor<float> batch = make_batch(data, samples, begin, end, norm, false, labels);
        Tensor<float> logits = model.forward(batch);
        for (std::int64_t n = 0; n < logits.b(); ++n) {
            const Label truth = static_cast<Label>(labels[static_cast<std::size_t>(n)]);
            const Label pred = predict_label(logits.at(n, 0, 0, 0), logits.at(n, 1, 0, 0));
            cm.add(truth, pred);
        }
    }
    model.set_training(true);
    return cm;
}

namespace {

void write_history_csv(const std::filesystem::path& path, const FoldHistory& history) {
    std::ofstream os(path);
    if (!os) {
        throw std::runtime_error("cannot write " + path.string());
    }
    os << "epoch,mean_loss\n";
    for (std::size_t e = 0; e < history.epoch_mean_loss.size(); ++e) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%zu,%.10g\n", e, history.epoch_mean_loss[e]);
        os << buf;
    }
}

json cm_to_json(const ConfusionMatrix& cm) {
    return {{"tp", cm.tp}, {"fp", cm.fp}, {"fn", cm.fn}, {"tn", cm.tn}};
}

json rates_to_json(const Rates& r) {
    const auto num = [](double v) -> json {
        return std::isnan(v) ? json(nullptr) : json(v);
    };
    return {{"accuracy", num(r.accuracy)},
            {"precision", num(r.precision)},
            {"recall", num(r.recall)},
            {"specificity", num(r.specificity)}};
}

}  // namespace

void write_report_json(const std::filesystem::path& path, const CrossValResult& result,
                       const std::string& row_label) {
    json j;
    j["status"] = result.failed ? "failed" : "ok";
    if (result.failed) {
        j["error"] = result.error;
    }
    j["method"] = row_label;
    json folds = json::array();
    for (const auto& f : result.folds) {
        json fj;
        fj["fold"] = f.fold;
        fj["ok"] = f.ok;
        if (f.ok) {
            fj["confusion"] = cm_to_json(f.cm);
            fj["rates"] = rates_to_json(compute_metrics(f.cm));
            fj["norm_mean"] = f.norm.mean;
            fj["norm_std"] = f.norm.stddev;
            fj["epoch_mean_loss"] = f.history.epoch_mean_loss;
        } else {
            fj["error"] = f.error;
        }
        folds.push_back(std::move(fj));
    }
    j["folds"] = std::move(folds);
    j["aggregate"] = cm_to_json(result.aggregate);
    if (result.aggregate.total() > 0) {
        j["aggregate_rates"] = rates_to_json(result.rates);
    }
    std::ofstream os(path);
    if (!os) {
        throw std::runtime_error("cannot write " + path.string());
    }
    os << j.dump(2) << "\n";
}

CrossValResult cross_validate(const LoadedDataset& data, const ModelConfig& model_config,
                              const TrainConfig& train_config,
                              const std::filesystem::path& out_dir, int jobs,
                              const std::string& row_label) {
    const int k = data.manifest.k_folds;
    if (k < 1) {
        throw std::invalid_argument("cross_validate: manifest has no fold assignment");
    }
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
    }
    const std::string label = row_label.empty() ? to_string(model_config.mixer_kind) : row_label;

    CrossValResult result;
    result.folds.resize(static_cast<std::size_t>(k));

    const auto run_fold = [&](int fold) {
        FoldResult& fr = result.folds[static_cast<std::size_t>(fold)];
        fr.fold = fold;
        try {
            std::vector<int> train_idx, test_idx;
            for (std::size_t i = 0; i < data.manifest.records.size(); ++i) {
                (data.manifest.records[i].fold == fold ? test_idx : train_idx)
                    .push_back(static_cast<int>(i));
            }
            fr.norm = data.manifest.per_fold_norm ? compute_norm_stats(data.images, train_idx)
                                                  : data.manifest.global_norm;
            Model<float> model = build_model<float>(model_config, train_config.seed);
            fr.history = train_fold(model, data, train_idx, fr.norm, train_config,
                                    static_cast<std::uint64_t>(fold));
            fr.cm = evaluate(model, data, test_idx, fr.norm, train_config.batch_size);
            if (!out_dir.empty()) {
                write_history_csv(out_dir / ("fold_" + std::to_string(fold) + "_history.csv"),
                                  fr.history);
                save_checkpoint(model.parameters(),
                                out_dir / ("fold_" + std::to_string(fold)) / "checkpoint");
            }
            fr.ok = true;
        } catch (const std::exception& e) {
            fr.ok = false;
            fr.error = e.what();
        }
    };

    const int workers = std::max(1, std::min(jobs, k));
    if (workers == 1) {
        for (int f = 0; f < k; ++f) {
            run_fold(f);
        }
    } else {
        std::atomic<int> next{0};
        std::vector<std::thread> pool;
        for (int t = 0; t < workers; ++t) {
            pool.emplace_back([&]() {
                for (int f = next.fetch_add(1); f < k; f = next.fetch_add(1)) {
                    run_fold(f);
                }
            });
        }
        for (auto& th : pool) {
            th.join();
        }
    }

    for (const auto& f : result.folds) {
        if (f.ok) {
            result.aggregate += f.cm;
        } else {
            result.failed = true;
            if (result.error.empty()) {
                result.error = "fold " + std::to_string(f.fold) + ": " + f.error;
            }
        }
    }
    if (result.aggregate.total() > 0) {
        result.rates = compute_metrics(result.aggregate);
    }

    if (!out_dir.empty()) {
        write_report_json(out_dir / "report.json", result, label);
        if (!result.failed) {
            write_report_csv(out_dir / "report.csv",
                             {{label, result.aggregate, result.rates}});
        }
    }
    return result;
}

}  // namespace dff
