#include "dfformer/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace dff {

namespace {

double rate_pct(std::int64_t numerator, std::int64_t denominator) {
    if (denominator == 0) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    return 100.0 * static_cast<double>(numerator) / static_cast<double>(denominator);
}

}  // namespace

Rates compute_metrics(const ConfusionMatrix& cm) {
    if (cm.tp < 0 || cm.fp < 0 || cm.fn < 0 || cm.tn < 0) {
        throw std::invalid_argument("compute_metrics: negative count");
    }
    if (cm.total() == 0) {
        throw std::invalid_argument("compute_metrics: all counts zero");
    }
    Rates r;
    r.accuracy = rate_pct(cm.tp + cm.tn, cm.total());
    r.precision = rate_pct(cm.tp, cm.tp + cm.fp);
    r.recall = rate_pct(cm.tp, cm.tp + cm.fn);
    r.specificity = rate_pct(cm.tn, cm.fp + cm.tn);
    return r;
}

double round_half_up_2(double pct) {
    if (std::isnan(pct)) {
        return pct;
    }
    return std::floor(pct * 100.0 + 0.5) / 100.0;
}

std::string format_rate(double pct) {
    if (std::isnan(pct)) {
        return "nan";
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", round_half_up_2(pct));
    return buf;
}

void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows) {
    std::ofstream os(path);
    if (!os) {
        throw std::runtime_error("cannot write " + path.string());
    }
    os << "method,accuracy,precision,recall,specificity\n";
    for (const auto& row : rows) {
        os << row.label << "," << format_rate(row.rates.accuracy) << ","
           << format_rate(row.rates.precision) << "," << format_rate(row.rates.recall) << ","
           << format_rate(row.rates.specificity) << "\n";
    }
}

}  // namespace dff
