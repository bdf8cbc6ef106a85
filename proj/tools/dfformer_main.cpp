#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "dfformer/data.hpp"
#include "dfformer/gradcheck_suite.hpp"
#include "dfformer/metrics.hpp"
#include "dfformer/model.hpp"
#include "dfformer/serialize.hpp"
#include "dfformer/train.hpp"
#include "dfformer/version.hpp"

using nlohmann::json;

namespace {

struct TrainFlags {
    std::int64_t epochs = 50;
    std::int64_t batch_size = 5;
    double learning_rate = 0.001;
    std::string optimizer = "adamw";
    double weight_decay = 0.0;
    double momentum = 0.9;
    bool no_augment = false;
    std::uint64_t seed = 0;

    dff::TrainConfig to_config() const {
        dff::TrainConfig c;
        c.epochs = epochs;
        c.batch_size = batch_size;
        c.learning_rate = learning_rate;
        c.optimizer = dff::parse_optimizer(optimizer);
        c.weight_decay = weight_decay;
        c.momentum = momentum;
        c.augment = !no_augment;
        c.seed = seed;
        return c;
    }
};

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
    cmd->add_option("--epochs", f.epochs, "Training epochs");
    cmd->add_option("--batch-size", f.batch_size, "Batch size");
    cmd->add_option("--lr", f.learning_rate, "Learning rate");
    cmd->add_option("--optimizer", f.optimizer, "adamw or sgd-momentum");
    cmd->add_option("--weight-decay", f.weight_decay, "Decoupled weight decay (adamw)");
    cmd->add_option("--momentum", f.momentum, "Momentum (sgd)");
    cmd->add_flag("--no-augment", f.no_augment, "Disable training-time augmentation");
    cmd->add_option("--seed", f.seed, "Random seed");
}

json train_flags_json(const TrainFlags& f) {
    return {{"epochs", f.epochs},         {"batch_size", f.batch_size},
            {"learning_rate", f.learning_rate}, {"optimizer", f.optimizer},
            {"weight_decay", f.weight_decay},   {"momentum", f.momentum},
            {"augment", !f.no_augment},         {"seed", f.seed}};
}

dff::ModelConfig resolve_model_config(const std::string& config_path, const std::string& mixer) {
    dff::ModelConfig cfg = config_path.empty() ? dff::ModelConfig::table1()
                                               : dff::load_model_config(config_path);
    if (!mixer.empty()) {
        cfg.mixer_kind = dff::parse_mixer_kind(mixer);
    }
    return cfg;
}

void write_run_meta(const std::filesystem::path& out_dir, const std::string& subcommand,
                    int argc, char** argv, std::uint64_t seed, json extra) {
    std::filesystem::create_directories(out_dir);
    json meta;
    meta["subcommand"] = subcommand;
    meta["version"] = dff::kVersion;
    meta["seed"] = seed;
    json args = json::array();
    for (int i = 0; i < argc; ++i) {
        args.push_back(argv[i]);
    }
    meta["argv"] = std::move(args);
    meta["unix_time"] = std::chrono::duration_cast<std::chrono::seconds>(
                            std::chrono::system_clock::now().time_since_epoch())
                            .count();
    meta.update(extra);
    std::ofstream os(out_dir / "run_meta.json");
    os << meta.dump(2) << "\n";
}

void write_confusion_json(const std::filesystem::path& path, const dff::ConfusionMatrix& cm) {
    const dff::Rates r = dff::compute_metrics(cm);
    json j = {{"tp", cm.tp}, {"fp", cm.fp}, {"fn", cm.fn}, {"tn", cm.tn},
              {"accuracy", r.accuracy},       {"precision", r.precision},
              {"recall", r.recall},           {"specificity", r.specificity}};
    std::ofstream os(path);
    os << j.dump(2) << "\n";
}

void print_rates(std::ostream& os, const dff::Rates& r) {
    os << "accuracy " << dff::format_rate(r.accuracy) << "\n"
       << "precision " << dff::format_rate(r.precision) << "\n"
       << "recall " << dff::format_rate(r.recall) << "\n"
       << "specificity " << dff::format_rate(r.specificity) << "\n";
}

/// Normalization constants for a standalone evaluation: the manifest's
/// global stats when present, otherwise statistics of the non-test records
/// (or all records when nothing is held out).
dff::NormStats eval_norm_stats(const dff::LoadedDataset& data, int fold) {
    if (!data.manifest.per_fold_norm) {
        return data.manifest.global_norm;
    }
    std::vector<int> idx;
    for (std::size_t i = 0; i < data.manifest.records.size(); ++i) {
        if (fold < 0 || data.manifest.records[i].fold != fold) {
            idx.push_back(static_cast<int>(i));
        }
    }
    if (idx.empty()) {
        for (std::size_t i = 0; i < data.manifest.records.size(); ++i) {
            idx.push_back(static_cast<int>(i));
        }
    }
    return dff::compute_norm_stats(data.images, idx);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DeformableFormer training, evaluation, and verification tool"};
    app.require_subcommand(1);

    // --- synth ---
    auto* synth = app.add_subcommand("synth", "Generate the synthetic small-object dataset");
    std::string synth_out;
    dff::SyntheticParams sp;
    std::int64_t synth_size = 64;
    int synth_folds = 0;
    synth->add_option("--out", synth_out, "Output directory")->required();
    synth->add_option("--seed", sp.seed, "Random seed");
    synth->add_option("--size", synth_size, "Square image size");
    synth->add_option("--count-available", sp.count_available, "Positive-class image count");
    synth->add_option("--count-unavailable", sp.count_unavailable, "Negative-class image count");
    synth->add_option("--object-radius-min", sp.object_radius_min, "Blob radius lower bound");
    synth->add_option("--object-radius-max", sp.object_radius_max, "Blob radius upper bound");
    synth->add_option("--object-count-min", sp.object_count_min, "Blobs per positive image, min");
    synth->add_option("--object-count-max", sp.object_count_max, "Blobs per positive image, max");
    synth->add_option("--background-noise-std", sp.background_noise_std, "Background noise sigma");
    synth->add_option("--negative-occupancy-max", sp.negative_occupancy_max,
                      "Max blob area fraction in negatives");
    synth->add_option("--folds", synth_folds, "Assign K stratified folds in the manifest");

    // --- train ---
    auto* train = app.add_subcommand("train", "Train a single model");
    std::string train_manifest, train_out, train_config_path, train_mixer;
    int train_test_fold = -1;
    TrainFlags train_flags;
    train->add_option("--manifest", train_manifest, "Dataset manifest")->required();
    train->add_option("--out", train_out, "Output directory")->required();
    train->add_option("--config", train_config_path, "Model config JSON");
    train->add_option("--mixer", train_mixer, "Override mixer kind");
    train->add_option("--test-fold", train_test_fold, "Hold out this fold and evaluate on it");
    add_train_flags(train, train_flags);

    // --- eval ---
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    std::string eval_manifest, eval_out, eval_config_path, eval_checkpoint, eval_mixer;
    int eval_fold = -1;
    eval->add_option("--manifest", eval_manifest, "Dataset manifest")->required();
    eval->add_option("--checkpoint", eval_checkpoint, "Checkpoint directory")->required();
    eval->add_option("--out", eval_out, "Output directory")->required();
    eval->add_option("--config", eval_config_path, "Model config JSON");
    eval->add_option("--mixer", eval_mixer, "Override mixer kind");
    eval->add_option("--fold", eval_fold, "Evaluate only this fold");

    // --- crossval ---
    auto* crossval = app.add_subcommand("crossval", "K-fold cross-validation");
    std::string cv_manifest, cv_out, cv_config_path, cv_mixer, cv_label;
    int cv_folds = 0, cv_jobs = 1;
    TrainFlags cv_flags;
    crossval->add_option("--manifest", cv_manifest, "Dataset manifest")->required();
    crossval->add_option("--out", cv_out, "Output directory")->required();
    crossval->add_option("--config", cv_config_path, "Model config JSON");
    crossval->add_option("--mixer", cv_mixer, "Override mixer kind");
    crossval->add_option("--label", cv_label, "Row label for the report");
    crossval->add_option("--folds", cv_folds, "Assign K stratified folds before running");
    crossval->add_option("--jobs", cv_jobs, "Folds trained in parallel");
    add_train_flags(crossval, cv_flags);

    // --- gradcheck ---
    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
    std::uint64_t gc_seed = 0;
    std::string gc_out;
    gradcheck->add_option("--seed", gc_seed, "Random seed");
    gradcheck->add_option("--out", gc_out, "Optional output directory for gradcheck.json");

    // --- metrics ---
    auto* metrics = app.add_subcommand("metrics", "Rates from confusion counts");
    std::int64_t m_tp = 0, m_fp = 0, m_fn = 0, m_tn = 0;
    metrics->add_option("--tp", m_tp, "True positives")->required();
    metrics->add_option("--fp", m_fp, "False positives")->required();
    metrics->add_option("--fn", m_fn, "False negatives")->required();
    metrics->add_option("--tn", m_tn, "True negatives")->required();

    // --- shapes ---
    auto* shapes = app.add_subcommand("shapes", "Stage-by-stage shape table for a config");
    std::string sh_config_path, sh_mixer;
    std::int64_t sh_input = 224;
    shapes->add_option("--config", sh_config_path, "Model config JSON");
    shapes->add_option("--input", sh_input, "Square input size")->required();
    shapes->add_option("--mixer", sh_mixer, "Override mixer kind");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            return app.exit(e);  // --help
        }
        app.exit(e);
        return 2;
    }

    try {
        if (*synth) {
            sp.image_h = sp.image_w = synth_size;
            dff::DatasetManifest manifest = dff::generate_synthetic(sp, synth_out);
            if (synth_folds > 0) {
                dff::make_folds(manifest, synth_folds, sp.seed);
                dff::save_manifest(manifest, std::filesystem::path(synth_out) / "manifest.json");
            }
            write_run_meta(synth_out, "synth", argc, argv, sp.seed,
                           {{"count_available", sp.count_available},
                            {"count_unavailable", sp.count_unavailable},
                            {"image_size", synth_size},
                            {"folds", synth_folds}});
            std::cerr << "wrote " << manifest.records.size() << " images to " << synth_out
                      << "\n";
            return 0;
        }

        if (*train) {
            const dff::ModelConfig cfg = resolve_model_config(train_config_path, train_mixer);
            const dff::TrainConfig tc = train_flags.to_config();
            dff::LoadedDataset data = dff::load_dataset(train_manifest);
            std::vector<int> train_idx, test_idx;
            for (std::size_t i = 0; i < data.manifest.records.size(); ++i) {
                (train_test_fold >= 0 && data.manifest.records[i].fold == train_test_fold
                     ? test_idx
                     : train_idx)
                    .push_back(static_cast<int>(i));
            }
            const dff::NormStats norm = data.manifest.per_fold_norm
                                            ? dff::compute_norm_stats(data.images, train_idx)
                                            : data.manifest.global_norm;
            dff::Model<float> model = dff::build_model<float>(cfg, tc.seed);
            write_run_meta(train_out, "train", argc, argv, tc.seed,
                           {{"model_config", json::parse(dff::model_config_to_json(cfg))},
                            {"train_config", train_flags_json(train_flags)},
                            {"test_fold", train_test_fold}});
            const dff::FoldHistory history = dff::train_fold(model, data, train_idx, norm, tc);
            const std::filesystem::path out(train_out);
            dff::save_checkpoint(model.parameters(), out / "checkpoint");
            {
                std::ofstream os(out / "history.csv");
                os << "epoch,mean_loss\n";
                for (std::size_t e = 0; e < history.epoch_mean_loss.size(); ++e) {
                    os << e << "," << history.epoch_mean_loss[e] << "\n";
                }
            }
            if (!test_idx.empty()) {
                const dff::ConfusionMatrix cm =
                    dff::evaluate(model, data, test_idx, norm, tc.batch_size);
                write_confusion_json(out / "confusion.json", cm);
                print_rates(std::cout, dff::compute_metrics(cm));
            }
            std::cerr << "trained " << history.epoch_mean_loss.size() << " epochs, checkpoint at "
                      << (out / "checkpoint") << "\n";
            return 0;
        }

        if (*eval) {
            const dff::ModelConfig cfg = resolve_model_config(eval_config_path, eval_mixer);
            dff::LoadedDataset data = dff::load_dataset(eval_manifest);
            dff::Model<float> model(cfg);
            dff::load_checkpoint(model.parameters(), eval_checkpoint);
            std::vector<int> idx;
            for (std::size_t i = 0; i < data.manifest.records.size(); ++i) {
                if (eval_fold < 0 || data.manifest.records[i].fold == eval_fold) {
                    idx.push_back(static_cast<int>(i));
                }
            }
            const dff::NormStats norm = eval_norm_stats(data, eval_fold);
            const dff::ConfusionMatrix cm = dff::evaluate(model, data, idx, norm);
            write_run_meta(eval_out, "eval", argc, argv, 0,
                           {{"model_config", json::parse(dff::model_config_to_json(cfg))},
                            {"checkpoint", eval_checkpoint},
                            {"fold", eval_fold}});
            write_confusion_json(std::filesystem::path(eval_out) / "confusion.json", cm);
            std::cout << "tp " << cm.tp << "\nfp " << cm.fp << "\nfn " << cm.fn << "\ntn "
                      << cm.tn << "\n";
            print_rates(std::cout, dff::compute_metrics(cm));
            return 0;
        }

        if (*crossval) {
            const dff::ModelConfig cfg = resolve_model_config(cv_config_path, cv_mixer);
            const dff::TrainConfig tc = cv_flags.to_config();
            dff::LoadedDataset data = dff::load_dataset(cv_manifest);
            if (cv_folds > 0) {
                dff::make_folds(data.manifest, cv_folds, tc.seed);
            }
            write_run_meta(cv_out, "crossval", argc, argv, tc.seed,
                           {{"model_config", json::parse(dff::model_config_to_json(cfg))},
                            {"train_config", train_flags_json(cv_flags)},
                            {"k_folds", data.manifest.k_folds},
                            {"jobs", cv_jobs}});
            const dff::CrossValResult result =
                dff::cross_validate(data, cfg, tc, cv_out, cv_jobs, cv_label);
            if (result.failed) {
                std::cerr << "cross-validation failed: " << result.error << "\n";
                return 1;
            }
            std::cout << "tp " << result.aggregate.tp << "\nfp " << result.aggregate.fp << "\nfn "
                      << result.aggregate.fn << "\ntn " << result.aggregate.tn << "\n";
            print_rates(std::cout, result.rates);
            return 0;
        }

        if (*gradcheck) {
            const auto results = dff::run_gradcheck_suite(gc_seed);
            bool ok = true;
            json out = json::array();
            for (const auto& r : results) {
                const bool pass = r.max_rel_error < r.tolerance;
                ok = ok && pass;
                std::printf("%-26s max_rel_error %.3e tolerance %.0e %s\n", r.name.c_str(),
                            r.max_rel_error, r.tolerance, pass ? "PASS" : "FAIL");
                out.push_back({{"layer", r.name},
                               {"max_rel_error", r.max_rel_error},
                               {"tolerance", r.tolerance},
                               {"pass", pass}});
            }
            if (!gc_out.empty()) {
                write_run_meta(gc_out, "gradcheck", argc, argv, gc_seed, {});
                std::ofstream os(std::filesystem::path(gc_out) / "gradcheck.json");
                os << out.dump(2) << "\n";
            }
            return ok ? 0 : 1;
        }

        if (*metrics) {
            const dff::ConfusionMatrix cm{m_tp, m_fp, m_fn, m_tn};
            print_rates(std::cout, dff::compute_metrics(cm));
            return 0;
        }

        if (*shapes) {
            const dff::ModelConfig cfg = resolve_model_config(sh_config_path, sh_mixer);
            const auto ladder = dff::stage_output_shapes(cfg, sh_input, sh_input);
            std::cout << "input 3x" << sh_input << "x" << sh_input << "\n";
            for (std::size_t i = 0; i < ladder.size(); ++i) {
                std::cout << "stage" << (i + 1) << " " << ladder[i].channels << "x" << ladder[i].h
                          << "x" << ladder[i].w << "\n";
            }
            std::cout << "logits " << cfg.num_classes << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
