#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dfformer/data.hpp"

namespace dff {

/// Two-class confusion counts; Available is the positive class.
struct ConfusionMatrix {
    std::int64_t tp = 0;
    std::int64_t fp = 0;
    std::int64_t fn = 0;
    std::int64_t tn = 0;

    std::int64_t total() const { return tp + fp + fn + tn; }

    void add(Label truth, Label predicted) {
        if (truth == Label::available) {
            (predicted == Label::available) ? ++tp : ++fn;
        } else {
            (predicted == Label::available) ? ++fp : ++tn;
        }
    }

    ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }

    bool operator==(const ConfusionMatrix&) const = default;
};

/// The four evaluation rates as percentages, full precision. A rate with a
/// zero denominator is NaN, never 0.
struct Rates {
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double specificity = 0.0;
};

/// accuracy = (TP+TN)/total, precision = TP/(TP+FP), recall = TP/(TP+FN),
/// specificity = TN/(FP+TN). Requires at least one nonzero count.
Rates compute_metrics(const ConfusionMatrix& cm);

/// Half-up rounding to 2 decimals, the display convention for rates.
double round_half_up_2(double pct);

/// "88.44" style; NaN renders as "nan".
std::string format_rate(double pct);

/// One display row of a comparison table.
struct ReportRow {
    std::string label;
    ConfusionMatrix cm;
    Rates rates;
};

/// CSV with header method,accuracy,precision,recall,specificity and one
/// 2-decimal row per entry.
void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows);

}  // namespace dff
