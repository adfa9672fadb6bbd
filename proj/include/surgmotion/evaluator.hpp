#pragma once

#include "surgmotion/dataset_io.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace surgmotion {

inline constexpr std::array<double, 5> kThresholds{1.0, 2.0, 4.0, 8.0, 16.0};
inline constexpr int kEvalSize = 256;

/// Metrics for one group of points. Ratios are nullopt when their
/// denominator is empty.
struct CategoryMetrics {
  std::optional<double> aj;
  std::optional<double> delta_avg;
  std::optional<double> oa;
  std::array<std::optional<double>, 5> delta_fraction{};
  std::array<std::optional<double>, 5> jaccard{};
  std::array<long, 5> tp{};
  std::array<long, 5> fp{};
  std::array<long, 5> fn{};
  long points = 0;
  long visible_cells = 0;  // GT-visible, non-query
  long scored_cells = 0;   // non-query
};

struct DeltaResult {
  std::array<std::optional<double>, 5> fractions{};
  std::optional<double> mean;
};

// All three take sets at the same scale with matching ids and frame counts
// (ValidationError otherwise). Query-frame cells are skipped.
DeltaResult delta_avg(const TrajectorySet& gt, const TrajectorySet& pred);
std::optional<double> average_jaccard(const TrajectorySet& gt, const TrajectorySet& pred);
std::optional<double> occlusion_accuracy(const TrajectorySet& gt, const TrajectorySet& pred);

/// Full metrics over the GT points selected by `category` (all points when nullopt).
CategoryMetrics compute_metrics(const TrajectorySet& gt, const TrajectorySet& pred,
                                std::optional<Category> category = std::nullopt);

/// Throws ValidationError describing the first structural mismatch.
void check_structure(const TrajectorySet& gt, const TrajectorySet& pred);

struct MetricsReport {
  std::string video;
  std::string method;
  CategoryMetrics tools;
  CategoryMetrics tissue;
  CategoryMetrics overall;
};

/// Resizes both sets to 256x256 (unless `resize` is false) and scores them
/// per category and overall.
MetricsReport build_report(const TrajectorySet& gt, const TrajectorySet& pred, const std::string& method = "surgmotion",
                           bool resize = true);

nlohmann::json to_json(const CategoryMetrics& m);
nlohmann::json to_json(const MetricsReport& r);
MetricsReport report_from_json(const nlohmann::json& j);

/// One row per (method, category), like the benchmark table's column groups.
std::string report_csv(const std::vector<MetricsReport>& reports);
/// Aligned text: Method | Tools AJ <d-avg OA | Tissue AJ <d-avg OA, in percent.
std::string report_table(const std::vector<MetricsReport>& reports);

/// Percent with one decimal, or "N/A".
std::string format_percent(const std::optional<double>& ratio);

struct ChallengingSplit {
  std::vector<std::string> challenging;
  std::vector<std::string> regular;
};

/// A video is challenging iff its baseline tools delta_avg < 0.75.
ChallengingSplit challenging_split(const std::vector<MetricsReport>& baseline_reports);

struct BenchmarkRow {
  std::string method;
  std::string subset;  // "all" or "challenging"
  std::optional<double> tools_aj, tools_delta, tools_oa;
  std::optional<double> tissue_aj, tissue_delta, tissue_oa;
  int videos = 0;
};

struct BenchmarkTable {
  std::vector<BenchmarkRow> rows;
  ChallengingSplit split;

  std::string to_text() const;
  std::string to_csv() const;
  nlohmann::json to_json() const;
};

/// Averages per-video reports per method over all videos and over the
/// challenging subset defined by `baseline_method`'s reports.
BenchmarkTable build_benchmark(const std::vector<MetricsReport>& reports, const std::string& baseline_method);

}  // namespace surgmotion
