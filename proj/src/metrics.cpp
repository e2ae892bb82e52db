#include "cirm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include <json.hpp>

#include "cirm/tensor.hpp"

namespace cirm {

namespace {

double safe_div(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

double f1_of(double p, double r) { return (p + r) == 0.0 ? 0.0 : 2.0 * p * r / (p + r); }

std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v * 100.0);
    return buf;
}

}  // namespace

MetricsReport macro_metrics(const std::vector<int>& preds, const std::vector<int>& labels) {
    if (preds.size() != labels.size()) throw DimensionError("macro_metrics: length mismatch");
    if (preds.empty()) throw DimensionError("macro_metrics: need n >= 1");
    MetricsReport r;
    r.n = preds.size();
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const bool p = preds[i] != 0, y = labels[i] != 0;
        if (p && y) ++r.tp;
        else if (p && !y) ++r.fp;
        else if (!p && y) ++r.fn;
        else ++r.tn;
    }
    r.accuracy = static_cast<double>(r.tp + r.tn) / static_cast<double>(r.n);
    r.p_pos = safe_div(r.tp, static_cast<double>(r.tp + r.fp));
    r.r_pos = safe_div(r.tp, static_cast<double>(r.tp + r.fn));
    r.f1_pos = f1_of(r.p_pos, r.r_pos);
    r.p_neg = safe_div(r.tn, static_cast<double>(r.tn + r.fn));
    r.r_neg = safe_div(r.tn, static_cast<double>(r.tn + r.fp));
    r.f1_neg = f1_of(r.p_neg, r.r_neg);
    r.macro_precision = 0.5 * (r.p_pos + r.p_neg);
    r.macro_recall = 0.5 * (r.r_pos + r.r_neg);
    r.macro_f1 = 0.5 * (r.f1_pos + r.f1_neg);
    return r;
}

double cohens_kappa(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size()) throw DimensionError("cohens_kappa: length mismatch");
    if (a.empty()) throw DimensionError("cohens_kappa: need n >= 1");
    const double n = static_cast<double>(a.size());
    std::map<int, double> ma, mb;
    double agree = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma[a[i]] += 1.0;
        mb[b[i]] += 1.0;
        if (a[i] == b[i]) agree += 1.0;
    }
    const double po = agree / n;
    double pe = 0.0;
    for (const auto& [k, ca] : ma) {
        auto it = mb.find(k);
        if (it != mb.end()) pe += (ca / n) * (it->second / n);
    }
    if (pe >= 1.0) {
        if (po >= 1.0) return 1.0;
        throw DegenerateMarginals("cohens_kappa: chance agreement is 1 with disagreement");
    }
    return (po - pe) / (1.0 - pe);
}

std::pair<double, double> wilson_interval(long successes, long n, double z) {
    if (n < 1 || successes < 0 || successes > n)
        throw DomainError("wilson_interval: need 0 <= successes <= n, n >= 1");
    const double nn = static_cast<double>(n);
    const double p = static_cast<double>(successes) / nn;
    const double z2 = z * z;
    const double denom = 1.0 + z2 / nn;
    const double center = (p + z2 / (2.0 * nn)) / denom;
    const double half =
        z * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn)) / denom;
    return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

std::string report_file_header() {
    return "{\"format\":\"cirm-report\",\"version\":1}";
}

std::string render_report(const MetricsReport& r, ReportFormat format) {
    if (format == ReportFormat::lines) {
        nlohmann::ordered_json j;
        j["n"] = r.n;
        j["tp"] = r.tp;
        j["fp"] = r.fp;
        j["fn"] = r.fn;
        j["tn"] = r.tn;
        j["accuracy"] = r.accuracy;
        j["macro_precision"] = r.macro_precision;
        j["macro_recall"] = r.macro_recall;
        j["macro_f1"] = r.macro_f1;
        j["per_class"] = {{"pos", {{"precision", r.p_pos}, {"recall", r.r_pos}, {"f1", r.f1_pos}}},
                          {"neg", {{"precision", r.p_neg}, {"recall", r.r_neg}, {"f1", r.f1_neg}}}};
        if (r.wilson_ci) j["wilson_ci"] = {r.wilson_ci->first, r.wilson_ci->second};
        j["config_hash"] = r.config_hash;
        j["seed"] = r.seed;
        return j.dump();
    }
    return render_report({{std::string("report"), r}}, ReportFormat::table);
}

std::string render_report(const std::vector<std::pair<std::string, MetricsReport>>& rows,
                          ReportFormat format) {
    if (format == ReportFormat::lines) {
        std::string out = report_file_header() + "\n";
        for (const auto& [name, r] : rows) out += render_report(r, ReportFormat::lines) + "\n";
        return out;
    }
    std::size_t w = 12;
    for (const auto& [name, r] : rows) w = std::max(w, name.size() + 2);
    std::ostringstream os;
    os << std::left;
    auto cell = [&](const std::string& s, std::size_t width) {
        os << s;
        for (std::size_t i = s.size(); i < width; ++i) os << ' ';
    };
    cell("Model", w);
    cell("n", 8);
    cell("Acc(%)", 9);
    cell("P(%)", 9);
    cell("R(%)", 9);
    cell("F1(%)", 9);
    os << "95% CI (Acc)\n";
    for (const auto& [name, r] : rows) {
        cell(name, w);
        cell(std::to_string(r.n), 8);
        cell(pct(r.accuracy), 9);
        cell(pct(r.macro_precision), 9);
        cell(pct(r.macro_recall), 9);
        cell(pct(r.macro_f1), 9);
        if (r.wilson_ci)
            os << "[" << pct(r.wilson_ci->first) << ", " << pct(r.wilson_ci->second) << "]";
        os << "\n";
    }
    return os.str();
}

MetricsReport parse_report_line(const std::string& line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("report line: bad JSON: ") + e.what());
    }
    MetricsReport r;
    try {
        r.n = j.at("n").get<std::size_t>();
        r.tp = j.at("tp").get<long>();
        r.fp = j.at("fp").get<long>();
        r.fn = j.at("fn").get<long>();
        r.tn = j.at("tn").get<long>();
        r.accuracy = j.at("accuracy").get<double>();
        r.macro_precision = j.at("macro_precision").get<double>();
        r.macro_recall = j.at("macro_recall").get<double>();
        r.macro_f1 = j.at("macro_f1").get<double>();
        const auto& pc = j.at("per_class");
        r.p_pos = pc.at("pos").at("precision").get<double>();
        r.r_pos = pc.at("pos").at("recall").get<double>();
        r.f1_pos = pc.at("pos").at("f1").get<double>();
        r.p_neg = pc.at("neg").at("precision").get<double>();
        r.r_neg = pc.at("neg").at("recall").get<double>();
        r.f1_neg = pc.at("neg").at("f1").get<double>();
        if (j.contains("wilson_ci"))
            r.wilson_ci = {j["wilson_ci"][0].get<double>(), j["wilson_ci"][1].get<double>()};
        r.config_hash = j.at("config_hash").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("report line: ") + e.what());
    }
    return r;
}

}  // namespace cirm
