#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace cirm {

struct MetricsReport {
    std::size_t n = 0;
    long tp = 0, fp = 0, fn = 0, tn = 0;
    double accuracy = 0.0;
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double macro_f1 = 0.0;
    double p_pos = 0.0, r_pos = 0.0, f1_pos = 0.0;
    double p_neg = 0.0, r_neg = 0.0, f1_neg = 0.0;
    std::optional<std::pair<double, double>> wilson_ci;
    std::string config_hash;
    std::uint64_t seed = 0;
};

// Binary macro metrics with the 0/0 -> 0 convention for degenerate
// precision/recall/F1. Positive class is label 1.
MetricsReport macro_metrics(const std::vector<int>& preds, const std::vector<int>& labels);

// Chance-corrected agreement over an arbitrary shared label alphabet.
double cohens_kappa(const std::vector<int>& a, const std::vector<int>& b);

// Score interval with fixed z (1.96 reproduces the 95% brackets of the
// truncation study exactly). Clamped to [0,1].
std::pair<double, double> wilson_interval(long successes, long n, double z = 1.96);

enum class ReportFormat { lines, table };

// lines: one JSON object per report, full round-trip precision.
// table: fixed-width percentages with two decimals.
std::string render_report(const MetricsReport& r, ReportFormat format);
std::string render_report(const std::vector<std::pair<std::string, MetricsReport>>& rows,
                          ReportFormat format);
MetricsReport parse_report_line(const std::string& line);

// Header line shared by report files.
std::string report_file_header();

}  // namespace cirm
