// Acceptance suite: runs every criterion at its stated tolerance and prints
// one pass/fail line per criterion. Exit code 0 only if all pass.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <thread>
#include <vector>

#include "dfformer/data.hpp"
#include "dfformer/gradcheck_suite.hpp"
#include "dfformer/metrics.hpp"
#include "dfformer/model.hpp"
#include "dfformer/train.hpp"

using namespace dff;

namespace {

const std::filesystem::path kWorkDir =
    std::filesystem::temp_directory_path() / "dfformer_acceptance";

std::vector<char> file_bytes(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

Tensor<float> random_input(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w,
                           std::uint64_t seed) {
    Rng rng(seed);
    Tensor<float> t(b, c, h, w);
    for (auto& v : t.data) {
        v = static_cast<float>(rng.normal(0.0, 0.5));
    }
    return t;
}

int acceptance_jobs() {
    const unsigned hw = std::thread::hardware_concurrency();
    return std::max(1, std::min(5, static_cast<int>(hw == 0 ? 1 : hw)));
}

/// The shared 200-image, 5-fold cross-validation runs used by criteria 6-8:
/// two identical deformable runs (determinism) and one pooling run (the
/// comparison harness row).
struct CvRuns {
    LoadedDataset data;
    CrossValResult deformable_a, deformable_b, pooling;
    std::filesystem::path dir_a, dir_b, dir_pool;

    static const CvRuns& get() {
        static CvRuns runs = make();
        return runs;
    }

private:
    static CvRuns make() {
        CvRuns r;
        const auto synth_dir = kWorkDir / "synth200";
        SyntheticParams params;
        params.image_h = params.image_w = 64;
        params.count_available = 100;
        params.count_unavailable = 100;
        params.seed = 42;
        if (!std::filesystem::exists(synth_dir / "manifest.json")) {
            generate_synthetic(params, synth_dir);
        }
        r.data = load_dataset(synth_dir / "manifest.json");
        make_folds(r.data.manifest, 5, 42);

        TrainConfig tc;
        tc.epochs = 2;
        tc.batch_size = 5;
        tc.learning_rate = 0.001;
        tc.optimizer = TrainConfig::Opt::adamw;
        tc.seed = 42;

        ModelConfig deform = ModelConfig::desk();
        ModelConfig pool = deform;
        pool.mixer_kind = MixerKind::pooling;

        const int jobs = acceptance_jobs();
        r.dir_a = kWorkDir / "cv_deformable_a";
        r.dir_b = kWorkDir / "cv_deformable_b";
        r.dir_pool = kWorkDir / "cv_pooling";
        std::filesystem::remove_all(r.dir_a);
        std::filesystem::remove_all(r.dir_b);
        std::filesystem::remove_all(r.dir_pool);
        r.deformable_a = cross_validate(r.data, deform, tc, r.dir_a, jobs);
        r.deformable_b = cross_validate(r.data, deform, tc, r.dir_b, jobs);
        r.pooling = cross_validate(r.data, pool, tc, r.dir_pool, jobs);
        return r;
    }
};

// ---------------------------------------------------------------------------

bool criterion_metric_reproduction(std::ostream& log) {
    struct Row {
        const char* name;
        ConfusionMatrix cm;
        const char* acc, *prec, *rec, *spec;
    };
    const Row rows[] = {
        {"specialist", {129, 13, 16, 15}, "83.24", "90.85", "88.97", "53.57"},
        {"resnet34", {120, 19, 25, 9}, "74.57", "86.33", "82.76", "32.14"},
        {"contrastive", {131, 13, 14, 15}, "84.39", "90.97", "90.34", "53.57"},
        {"poolformer", {136, 14, 9, 14}, "86.71", "90.67", "93.79", "50.00"},
        {"proposed", {135, 10, 10, 18}, "88.44", "93.10", "93.10", "64.29"},
    };
    bool ok = true;
    for (const Row& row : rows) {
        const Rates r = compute_metrics(row.cm);
        const std::pair<std::string, const char*> checks[] = {
            {format_rate(r.accuracy), row.acc},
            {format_rate(r.precision), row.prec},
            {format_rate(r.recall), row.rec},
            {format_rate(r.specificity), row.spec},
        };
        for (const auto& [got, want] : checks) {
            if (got != want) {
                log << "    " << row.name << ": got " << got << ", want " << want << "\n";
                ok = false;
            }
        }
    }
    return ok;
}

bool criterion_zero_offset_equivalence(std::ostream& log) {
    Rng rng(2024);
    double worst = 0.0;
    for (int trial = 0; trial < 120; ++trial) {
        const std::int64_t b = 1 + static_cast<std::int64_t>(rng.below(2));
        const std::int64_t cin = 1 + static_cast<std::int64_t>(rng.below(8));
        const std::int64_t cout = 1 + static_cast<std::int64_t>(rng.below(8));
        const std::int64_t k = std::array<std::int64_t, 3>{1, 3, 5}[rng.below(3)];
        const std::int64_t h = k + static_cast<std::int64_t>(rng.below(16 - k + 1));
        const std::int64_t w = k + static_cast<std::int64_t>(rng.below(16 - k + 1));
        Tensor<double> x(b, cin, h, w);
        for (auto& v : x.data) {
            v = rng.normal();
        }
        Tensor<double> wt(cout, cin, k, k);
        for (auto& v : wt.data) {
            v = rng.normal();
        }
        std::vector<double> bias(static_cast<std::size_t>(cout));
        for (auto& v : bias) {
            v = rng.normal();
        }
        OffsetField<double> zeros(b, 2 * k * k, h, w);
        const Tensor<double> a = deformable_conv_forward(x, zeros, wt, bias);
        const Tensor<double> c = conv2d_forward(x, wt, bias, 1, k / 2);
        for (std::size_t i = 0; i < a.data.size(); ++i) {
            worst = std::max(worst, std::abs(a.data[i] - c.data[i]));
        }
    }
    log << "    worst |deformable(0) - conv| over 120 instances: " << worst << "\n";
    return worst < 1e-12;
}

bool criterion_gradient_oracle(std::ostream& log) {
    bool ok = true;
    for (const GradCheckEntry& e : run_gradcheck_suite(0)) {
        const bool pass = e.max_rel_error < e.tolerance;
        char buf[160];
        std::snprintf(buf, sizeof(buf), "    %-26s %.3e (tol %.0e) %s\n", e.name.c_str(),
                      e.max_rel_error, e.tolerance, pass ? "ok" : "FAIL");
        log << buf;
        ok = ok && pass;
    }
    return ok;
}

bool criterion_shape_ladder(std::ostream& log) {
    bool ok = true;
    Model<float> model = build_model<float>(ModelConfig::table1(), 0);
    model.set_training(false);

    const auto check_ladder = [&](std::int64_t hw, std::int64_t batch) {
        const Tensor<float> x = random_input(batch, 3, hw, hw, 5);
        const Tensor<float> logits = model.forward(x);
        const auto& shapes = model.last_stage_shapes();
        const std::int64_t want_c[] = {64, 128, 320, 512};
        for (std::size_t i = 0; i < 4; ++i) {
            const std::int64_t want_hw = hw / (4LL << i);
            if (shapes[i][1] != want_c[i] || shapes[i][2] != want_hw ||
                shapes[i][3] != want_hw) {
                log << "    input " << hw << ": stage " << i + 1 << " got (" << shapes[i][1]
                    << "," << shapes[i][2] << "," << shapes[i][3] << "), want (" << want_c[i]
                    << "," << want_hw << "," << want_hw << ")\n";
                ok = false;
            }
        }
        if (logits.shape != std::array<std::int64_t, 4>{batch, 2, 1, 1}) {
            log << "    input " << hw << ": logits " << shape_str(logits) << ", want (B,2,1,1)\n";
            ok = false;
        }
        log << "    input " << hw << ": " << shapes[0][2] << "/" << shapes[1][2] << "/"
            << shapes[2][2] << "/" << shapes[3][2] << ", logits " << shape_str(logits) << "\n";
    };
    check_ladder(224, 1);
    check_ladder(1600, 1);

    // every 3x3 deformable mixer predicts a 2N = 18 channel offset field
    const std::int64_t stage_channels[] = {64, 128, 320, 512};
    for (std::size_t s = 0; s < 4; ++s) {
        auto* mixer = dynamic_cast<DeformableMixer<float>*>(&model.block(s, 0).mixer());
        if (mixer == nullptr) {
            log << "    stage " << s << ": mixer is not deformable\n";
            ok = false;
            continue;
        }
        const OffsetField<float> of =
            mixer->conv().predict_offsets(random_input(1, stage_channels[s], 8, 8, 6));
        if (of.c() != 18) {
            log << "    stage " << s << ": offset field has " << of.c() << " channels, want 18\n";
            ok = false;
        }
    }
    return ok;
}

bool criterion_augmentation_and_folds(std::ostream& log) {
    bool ok = true;
    Rng rng(31);
    Tensor<float> img(1, 3, 16, 16);
    for (auto& v : img.data) {
        v = static_cast<float>(rng.uniform());
    }
    if (augment(img, Label::available).size() != 2) {
        log << "    Available augmentation cardinality != 2\n";
        ok = false;
    }
    if (augment(img, Label::unavailable).size() != 9) {
        log << "    Unavailable augmentation cardinality != 9\n";
        ok = false;
    }
    if (rot90(rot90(rot90(rot90(img)))).data != img.data) {
        log << "    rot90^4 != id\n";
        ok = false;
    }
    if (hflip(hflip(img)).data != img.data || vflip(vflip(img)).data != img.data) {
        log << "    flips are not involutive\n";
        ok = false;
    }
    if (rot180(img).data != rot90(rot90(img)).data) {
        log << "    rot180 != rot90^2\n";
        ok = false;
    }

    DatasetManifest m;
    for (int i = 0; i < 145; ++i) {
        m.records.push_back({"a" + std::to_string(i), "x.png", Label::available, -1});
    }
    for (int i = 0; i < 28; ++i) {
        m.records.push_back({"u" + std::to_string(i), "x.png", Label::unavailable, -1});
    }
    make_folds(m, 28, 0);
    std::map<int, int> unavail, size;
    for (const auto& r : m.records) {
        if (r.fold < 0 || r.fold >= 28) {
            log << "    record assigned outside [0, 28)\n";
            return false;
        }
        ++size[r.fold];
        if (r.label == Label::unavailable) {
            ++unavail[r.fold];
        }
    }
    int n6 = 0, n7 = 0;
    for (int f = 0; f < 28; ++f) {
        if (unavail[f] != 1) {
            log << "    fold " << f << " has " << unavail[f] << " Unavailable, want exactly 1\n";
            ok = false;
        }
        n6 += size[f] == 6;
        n7 += size[f] == 7;
    }
    if (n6 != 23 || n7 != 5) {
        log << "    fold sizes: " << n6 << "x6 + " << n7 << "x7, want 23x6 + 5x7\n";
        ok = false;
    }
    return ok;
}

bool criterion_trainability(std::ostream& log) {
    bool ok = true;

    // overfit oracle: 10 images, desk config, 200 steps without augmentation
    const auto overfit_dir = kWorkDir / "synth10";
    SyntheticParams params;
    params.image_h = params.image_w = 64;
    params.count_available = 5;
    params.count_unavailable = 5;
    params.seed = 7;
    if (!std::filesystem::exists(overfit_dir / "manifest.json")) {
        generate_synthetic(params, overfit_dir);
    }
    LoadedDataset small = load_dataset(overfit_dir / "manifest.json");
    std::vector<int> idx(small.manifest.records.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        idx[i] = static_cast<int>(i);
    }
    TrainConfig tc;
    tc.epochs = 100;  // 2 steps per epoch at batch 5
    tc.batch_size = 5;
    tc.augment = false;
    tc.seed = 0;
    const NormStats norm = compute_norm_stats(small.images, idx);
    Model<float> model = build_model<float>(ModelConfig::desk(), 0);
    const FoldHistory h = train_fold(model, small, idx, norm, tc);
    const ConfusionMatrix cm = evaluate(model, small, idx, norm);
    log << "    overfit: 200 steps, final loss " << h.epoch_mean_loss.back() << ", train acc "
        << (cm.tp + cm.tn) << "/10\n";
    if (h.epoch_mean_loss.back() >= 0.05 || cm.tp + cm.tn != 10) {
        ok = false;
    }

    // 5-fold synthetic cross-validation with the deformable mixer
    const CvRuns& runs = CvRuns::get();
    if (runs.deformable_a.failed) {
        log << "    cross-validation failed: " << runs.deformable_a.error << "\n";
        return false;
    }
    const double acc = runs.deformable_a.rates.accuracy;
    log << "    5-fold deformable aggregate accuracy " << format_rate(acc) << "% (need >= 90)\n";
    if (!(acc >= 90.0)) {
        ok = false;
    }
    if (!(runs.deformable_a.aggregate == runs.deformable_b.aggregate)) {
        log << "    repeated run changed the aggregate matrix (not seed-deterministic)\n";
        ok = false;
    }
    return ok;
}

bool criterion_baseline_harness(std::ostream& log) {
    const CvRuns& runs = CvRuns::get();
    if (runs.deformable_a.failed || runs.pooling.failed) {
        log << "    a run failed: " << runs.deformable_a.error << runs.pooling.error << "\n";
        return false;
    }
    const auto path = kWorkDir / "comparison.csv";
    write_report_csv(path, {
                               {"deformable", runs.deformable_a.aggregate, runs.deformable_a.rates},
                               {"pooling", runs.pooling.aggregate, runs.pooling.rates},
                           });

    std::ifstream is(path);
    std::string line;
    std::getline(is, line);
    if (line != "method,accuracy,precision,recall,specificity") {
        log << "    bad header: " << line << "\n";
        return false;
    }
    int rows = 0;
    bool ok = true;
    while (std::getline(is, line) && !line.empty()) {
        ++rows;
        log << "    " << line << "\n";
        std::stringstream ss(line);
        std::string field;
        int fields = 0;
        while (std::getline(ss, field, ',')) {
            if (fields > 0 && field != "nan") {
                try {
                    (void)std::stod(field);
                } catch (...) {
                    log << "    unparsable rate '" << field << "'\n";
                    ok = false;
                }
            }
            ++fields;
        }
        if (fields != 5) {
            log << "    row has " << fields << " fields, want 5\n";
            ok = false;
        }
    }
    if (rows != 2) {
        log << "    " << rows << " rows, want 2\n";
        ok = false;
    }
    return ok;
}

bool criterion_determinism(std::ostream& log) {
    const CvRuns& runs = CvRuns::get();
    if (runs.deformable_a.failed || runs.deformable_b.failed) {
        log << "    a run failed\n";
        return false;
    }
    bool ok = true;
    if (!(runs.deformable_a.aggregate == runs.deformable_b.aggregate)) {
        log << "    aggregate confusion matrices differ between identical-seed runs\n";
        ok = false;
    }
    for (std::size_t f = 0; f < runs.deformable_a.folds.size(); ++f) {
        if (!(runs.deformable_a.folds[f].cm == runs.deformable_b.folds[f].cm)) {
            log << "    fold " << f << " confusion matrix differs\n";
            ok = false;
        }
    }
    if (file_bytes(runs.dir_a / "report.csv") != file_bytes(runs.dir_b / "report.csv")) {
        log << "    report.csv is not byte-identical\n";
        ok = false;
    }
    log << "    aggregate tp/fp/fn/tn = " << runs.deformable_a.aggregate.tp << "/"
        << runs.deformable_a.aggregate.fp << "/" << runs.deformable_a.aggregate.fn << "/"
        << runs.deformable_a.aggregate.tn << ", report.csv byte-identical\n";
    return ok;
}

}  // namespace

int main() {
    std::filesystem::create_directories(kWorkDir);
    struct Criterion {
        int id;
        const char* name;
        std::function<bool(std::ostream&)> run;
    };
    const std::vector<Criterion> criteria = {
        {1, "metric reproduction (reference matrices, 20 values to 2 decimals)",
         criterion_metric_reproduction},
        {2, "zero-offset equivalence (< 1e-12 wide precision)", criterion_zero_offset_equivalence},
        {3, "gradient oracle (finite differences, every layer + tiny model)",
         criterion_gradient_oracle},
        {4, "shape ladder (224 and 1600 inputs, offset channels)", criterion_shape_ladder},
        {5, "augmentation contract and fold partition", criterion_augmentation_and_folds},
        {6, "trainability (overfit oracle, 5-fold synthetic >= 90%)", criterion_trainability},
        {7, "baseline comparison harness (deformable vs pooling CSV)",
         criterion_baseline_harness},
        {8, "determinism (identical seeds, byte-identical report)", criterion_determinism},
    };

    bool all_ok = true;
    for (const auto& c : criteria) {
        const auto start = std::chrono::steady_clock::now();
        std::ostringstream log;
        bool ok = false;
        try {
            ok = c.run(log);
        } catch (const std::exception& e) {
            log << "    exception: " << e.what() << "\n";
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::printf("[%s] criterion %d: %s (%.1fs)\n", ok ? "PASS" : "FAIL", c.id, c.name, secs);
        std::fputs(log.str().c_str(), stdout);
        all_ok = all_ok && ok;
    }
    return all_ok ? 0 : 1;
}
