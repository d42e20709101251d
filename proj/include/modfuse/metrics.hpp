#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "modfuse/volume.hpp"

namespace modfuse {

struct ConfusionCounts {
    std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;

    std::uint64_t total() const { return tp + tn + fp + fn; }
    friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

// Nonzero voxels are positive.
ConfusionCounts confusion(const LabelGrid& pred, const LabelGrid& gt);

// Empty-denominator conventions: dsc 1 when P and G are empty, se 1 when G is
// empty, sp 1 when G^c is empty, pre 1 when P and G are empty and 0 when only
// P is.
double dsc(const ConfusionCounts& c);
double acc(const ConfusionCounts& c);
double sensitivity(const ConfusionCounts& c);
double specificity(const ConfusionCounts& c);
double precision(const ConfusionCounts& c);

struct MetricValues {
    double dsc = 0, acc = 0, se = 0, sp = 0, pre = 0;

    static MetricValues from_counts(const ConfusionCounts& c);
    friend bool operator==(const MetricValues&, const MetricValues&) = default;
};

inline constexpr const char* metric_names[5] = {"dsc", "acc", "se", "sp", "pre"};
double metric_at(const MetricValues& m, std::size_t index);

struct Region {
    std::string name;
    std::vector<std::int32_t> labels;
};

// "whole:1,2;core:2"
std::vector<Region> parse_regions(std::string_view text);
std::string format_regions(const std::vector<Region>& regions);

LabelGrid binarize(const LabelGrid& labels, const Region& region);

struct CaseMetrics {
    std::string case_id;
    std::vector<MetricValues> regions;  // parallel to MetricsReport::region_names
    MetricValues region_mean;
};

struct MetricsReport {
    std::vector<std::string> region_names;
    std::vector<CaseMetrics> cases;
    // Across cases (population std). Index regions.size() holds the per-case
    // region means ("@all").
    std::vector<MetricValues> mean;
    std::vector<MetricValues> std;

    // Mean DSC over regions and cases.
    double mean_dsc() const;
};

CaseMetrics evaluate_case(const LabelGrid& pred, const LabelGrid& gt, const std::vector<Region>& regions,
                          const std::string& case_id = "case");
MetricsReport aggregate(std::vector<CaseMetrics> cases, const std::vector<Region>& regions);
MetricsReport evaluate(const LabelGrid& pred, const LabelGrid& gt, const std::vector<Region>& regions);

// "case_id.region.metric = value" with 6 decimals; aggregates use the case
// ids "@mean" and "@std", region means use the region "@all".
std::string format_report_kv(const MetricsReport& r);
std::map<std::string, double> parse_report_kv(std::string_view text);
std::string format_report_table(const MetricsReport& r);

}  // namespace modfuse
