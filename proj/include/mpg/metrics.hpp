#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace mpg {

/// One CSV row. Numeric fields are kept as text so files round-trip exactly;
/// summary rows leave the per-action fields empty.
struct MetricRow {
  int stage = 1;
  int episode = 0;
  int step = 0;
  std::string action_kind;  // move/grasp/push/heuristic, or window=N for summaries
  std::string reward, loss, q_max, epsilon, success;
  bool operator==(const MetricRow&) const = default;
};

inline constexpr const char* kMetricsHeader = "stage,episode,step,action_kind,reward,loss,q_max,epsilon,success";
inline constexpr const char* kGapMarker = "gap";

std::string format_number(double x);

void write_metrics(std::ostream& out, const std::vector<MetricRow>& rows);
/// Parses a metrics CSV; malformed rows raise parse_error naming the line.
std::vector<MetricRow> read_metrics(std::istream& in);

bool is_summary(const MetricRow& row);

/// Grasp success ratio over consecutive windows of `window` action rows.
/// Windows without a grasp attempt yield nullopt (a gap, not zero).
/// Only complete windows are reported.
std::vector<std::optional<double>> grasp_success_window(const std::vector<MetricRow>& rows, int window = 200);

/// Success ratio over the last n grasp attempts (fewer if not available).
std::optional<double> recent_grasp_success(const std::vector<MetricRow>& rows, int n);

}  // namespace mpg
