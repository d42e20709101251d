#include "modfuse/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "modfuse/error.hpp"

namespace modfuse {

ConfusionCounts confusion(const LabelGrid& pred, const LabelGrid& gt)
{
    if (pred.shape != gt.shape || pred.size() != gt.size()) {
        throw Error(ErrorCode::ShapeMismatch, "confusion: prediction and ground truth shapes differ");
    }
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred.labels[i] != 0;
        const bool g = gt.labels[i] != 0;
        if (p && g) {
            ++c.tp;
        } else if (p) {
            ++c.fp;
        } else if (g) {
            ++c.fn;
        } else {
            ++c.tn;
        }
    }
    return c;
}

namespace {

double ratio(std::uint64_t num, std::uint64_t den)
{
    return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

double dsc(const ConfusionCounts& c)
{
    const std::uint64_t den = 2 * c.tp + c.fp + c.fn;
    return den == 0 ? 1.0 : ratio(2 * c.tp, den);
}

double acc(const ConfusionCounts& c)
{
    return c.total() == 0 ? 1.0 : ratio(c.tp + c.tn, c.total());
}

double sensitivity(const ConfusionCounts& c)
{
    return c.tp + c.fn == 0 ? 1.0 : ratio(c.tp, c.tp + c.fn);
}

double specificity(const ConfusionCounts& c)
{
    return c.tn + c.fp == 0 ? 1.0 : ratio(c.tn, c.tn + c.fp);
}

double precision(const ConfusionCounts& c)
{
    if (c.tp + c.fp == 0) return c.fn == 0 ? 1.0 : 0.0;
    return ratio(c.tp, c.tp + c.fp);
}

MetricValues MetricValues::from_counts(const ConfusionCounts& c)
{
    return {modfuse::dsc(c), modfuse::acc(c), sensitivity(c), specificity(c), precision(c)};
}

double metric_at(const MetricValues& m, std::size_t index)
{
    switch (index) {
    case 0: return m.dsc;
    case 1: return m.acc;
    case 2: return m.se;
    case 3: return m.sp;
    case 4: return m.pre;
    }
    throw Error(ErrorCode::IndexOutOfRange, "metric index " + std::to_string(index));
}

namespace {

double& metric_ref(MetricValues& m, std::size_t index)
{
    double* f[5] = {&m.dsc, &m.acc, &m.se, &m.sp, &m.pre};
    return *f[index];
}

std::string trim(std::string_view s)
{
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string_view::npos) return {};
    const auto b = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(a, b - a + 1));
}

}  // namespace

std::vector<Region> parse_regions(std::string_view text)
{
    std::vector<Region> regions;
    std::set<std::string> names;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto semi = text.find(';', pos);
        const std::string item = trim(text.substr(pos, semi == std::string_view::npos ? std::string_view::npos : semi - pos));
        pos = semi == std::string_view::npos ? text.size() + 1 : semi + 1;
        if (item.empty()) continue;
        const auto colon = item.find(':');
        if (colon == std::string::npos || colon == 0) {
            throw Error(ErrorCode::ConfigInvalid, "region '" + item + "' must look like name:label,label");
        }
        Region r;
        r.name = trim(item.substr(0, colon));
        if (r.name.find('.') != std::string::npos || r.name.front() == '@') {
            throw Error(ErrorCode::ConfigInvalid, "region name '" + r.name + "' may not contain '.' or start with '@'");
        }
        std::istringstream labels(item.substr(colon + 1));
        std::string tok;
        while (std::getline(labels, tok, ',')) {
            tok = trim(tok);
            std::size_t used = 0;
            int v = -1;
            try {
                v = std::stoi(tok, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || used != tok.size() || v < 1) {
                throw Error(ErrorCode::ConfigInvalid, "region " + r.name + ": bad label '" + tok + "'");
            }
            r.labels.push_back(v);
        }
        if (r.labels.empty()) throw Error(ErrorCode::ConfigInvalid, "region " + r.name + " lists no labels");
        if (!names.insert(r.name).second) throw Error(ErrorCode::ConfigInvalid, "region " + r.name + " listed twice");
        regions.push_back(std::move(r));
    }
    if (regions.empty()) throw Error(ErrorCode::EmptyRegionList, "no evaluation regions given");
    return regions;
}

std::string format_regions(const std::vector<Region>& regions)
{
    std::string s;
    for (std::size_t i = 0; i < regions.size(); ++i) {
        if (i) s += ';';
        s += regions[i].name + ':';
        for (std::size_t j = 0; j < regions[i].labels.size(); ++j) {
            if (j) s += ',';
            s += std::to_string(regions[i].labels[j]);
        }
    }
    return s;
}

LabelGrid binarize(const LabelGrid& labels, const Region& region)
{
    LabelGrid out(labels.shape, 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        for (auto l : region.labels) {
            if (labels.labels[i] == l) {
                out.labels[i] = 1;
                break;
            }
        }
    }
    return out;
}

CaseMetrics evaluate_case(const LabelGrid& pred, const LabelGrid& gt, const std::vector<Region>& regions,
                          const std::string& case_id)
{
    if (regions.empty()) throw Error(ErrorCode::EmptyRegionList, "no evaluation regions given");
    if (pred.shape != gt.shape) {
        throw Error(ErrorCode::ShapeMismatch, "case " + case_id + ": prediction and ground truth shapes differ");
    }
    CaseMetrics cm;
    cm.case_id = case_id;
    for (const auto& r : regions) {
        cm.regions.push_back(MetricValues::from_counts(confusion(binarize(pred, r), binarize(gt, r))));
    }
    for (std::size_t k = 0; k < 5; ++k) {
        double s = 0.0;
        for (const auto& m : cm.regions) s += metric_at(m, k);
        metric_ref(cm.region_mean, k) = s / static_cast<double>(cm.regions.size());
    }
    return cm;
}

MetricsReport aggregate(std::vector<CaseMetrics> cases, const std::vector<Region>& regions)
{
    if (regions.empty()) throw Error(ErrorCode::EmptyRegionList, "no evaluation regions given");
    MetricsReport r;
    for (const auto& reg : regions) r.region_names.push_back(reg.name);
    r.cases = std::move(cases);
    const std::size_t R = regions.size();
    r.mean.assign(R + 1, MetricValues{});
    r.std.assign(R + 1, MetricValues{});
    if (r.cases.empty()) return r;
    const double n = static_cast<double>(r.cases.size());
    for (std::size_t g = 0; g <= R; ++g) {
        for (std::size_t k = 0; k < 5; ++k) {
            auto value = [&](const CaseMetrics& c) { return metric_at(g < R ? c.regions.at(g) : c.region_mean, k); };
            double s = 0.0;
            for (const auto& c : r.cases) s += value(c);
            const double mean = s / n;
            double ss = 0.0;
            for (const auto& c : r.cases) ss += (value(c) - mean) * (value(c) - mean);
            metric_ref(r.mean[g], k) = mean;
            metric_ref(r.std[g], k) = std::sqrt(ss / n);
        }
    }
    return r;
}

MetricsReport evaluate(const LabelGrid& pred, const LabelGrid& gt, const std::vector<Region>& regions)
{
    return aggregate({evaluate_case(pred, gt, regions)}, regions);
}

double MetricsReport::mean_dsc() const
{
    return mean.empty() ? 0.0 : mean.back().dsc;
}

namespace {

void kv_lines(std::ostringstream& out, const std::string& id, const std::string& region, const MetricValues& m)
{
    char buf[64];
    for (std::size_t k = 0; k < 5; ++k) {
        std::snprintf(buf, sizeof buf, "%.6f", metric_at(m, k));
        out << id << '.' << region << '.' << metric_names[k] << " = " << buf << '\n';
    }
}

}  // namespace

std::string format_report_kv(const MetricsReport& r)
{
    std::ostringstream out;
    for (const auto& c : r.cases) {
        for (std::size_t g = 0; g < r.region_names.size(); ++g) kv_lines(out, c.case_id, r.region_names[g], c.regions[g]);
        kv_lines(out, c.case_id, "@all", c.region_mean);
    }
    for (std::size_t g = 0; g < r.mean.size(); ++g) {
        const std::string region = g < r.region_names.size() ? r.region_names[g] : "@all";
        kv_lines(out, "@mean", region, r.mean[g]);
        kv_lines(out, "@std", region, r.std[g]);
    }
    return out.str();
}

std::map<std::string, double> parse_report_kv(std::string_view text)
{
    std::map<std::string, double> kv;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw Error(ErrorCode::BadHeader, "report line " + std::to_string(line_no) + " has no '='");
        }
        const std::string value = trim(line.substr(eq + 1));
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(value, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != value.size()) {
            throw Error(ErrorCode::BadHeader, "report line " + std::to_string(line_no) + ": bad value '" + value + "'");
        }
        kv[trim(line.substr(0, eq))] = v;
    }
    return kv;
}

std::string format_report_table(const MetricsReport& r)
{
    std::ostringstream out;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-16s %-10s %9s %9s %9s %9s %9s\n", "case", "region", "DSC", "ACC", "SE", "SP",
                  "PRE");
    out << buf;
    auto row = [&](const std::string& id, const std::string& region, const MetricValues& m) {
        std::snprintf(buf, sizeof buf, "%-16s %-10s %9.6f %9.6f %9.6f %9.6f %9.6f\n", id.c_str(), region.c_str(), m.dsc,
                      m.acc, m.se, m.sp, m.pre);
        out << buf;
    };
    for (const auto& c : r.cases) {
        for (std::size_t g = 0; g < r.region_names.size(); ++g) row(c.case_id, r.region_names[g], c.regions[g]);
        row(c.case_id, "@all", c.region_mean);
    }
    for (std::size_t g = 0; g < r.mean.size(); ++g) {
        const std::string region = g < r.region_names.size() ? r.region_names[g] : "@all";
        row("@mean", region, r.mean[g]);
        row("@std", region, r.std[g]);
    }
    return out.str();
}

}  // namespace modfuse
