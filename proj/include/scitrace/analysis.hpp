#pragma once

// Aggregations over query result tables, plus SVG chart output.
//
// Every operation takes ResultTables in the query endpoint's column layout,
// so it works the same against a local store or a remote collector.

#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "scitrace/clock.hpp"
#include "scitrace/model.hpp"
#include "scitrace/store.hpp"

namespace scitrace::analysis {

inline constexpr std::size_t kDefaultBins = 20;
inline constexpr Nanos kDefaultSampleInterval = std::chrono::seconds(5);

struct TimeSeries {
  std::string metric;
  std::string unit;
  Nanos bucket_width{0};
  std::vector<UnixNanos> bucket_start;
  std::vector<double> value;

  bool empty() const { return value.empty(); }
  // Columns: bucket_start (int), value (float).
  store::ResultTable to_table() const;
};

struct Distribution {
  std::string metric;
  std::string unit;
  std::vector<double> bin_edges;  // counts.size() + 1 entries
  std::vector<std::size_t> counts;
  double min = 0;
  double max = 0;
  double mean = 0;
  std::size_t open_count = 0;  // job_durations only

  bool empty() const { return counts.empty(); }
  std::size_t total() const;
  // Columns: bin_start (float), bin_end (float), count (int).
  store::ResultTable to_table() const;
};

// Equal-width histogram of `values` over [min, max]. When all values are equal
// the single bin is [v - 0.5, v + 0.5]. Errc::invalid_argument if bins == 0.
Distribution histogram(const std::vector<double>& values, std::size_t bins);

// Job identity of a table row (job.id, job.uid, host.name, job.array_task_id).
std::optional<JobIdentity> row_job(const store::ResultTable& table, std::size_t row);

// Per bucket, sums each job's last sample at or before the bucket end, provided
// it is no older than `horizon`. Buckets start at `start`.
TimeSeries total_usage_over_time(const store::ResultTable& metrics, std::string_view metric, UnixNanos start,
                                 UnixNanos end, Nanos bucket_width, Nanos horizon = 2 * kDefaultSampleInterval);

Distribution max_per_job_distribution(const store::ResultTable& metrics, std::string_view metric,
                                      std::size_t bins = kDefaultBins);

// Durations in seconds of closed spans of kind "job"; open ones are counted.
Distribution job_durations(const store::ResultTable& spans, std::size_t bins = kDefaultBins);

// Count of job spans whose [start, end) meets each bucket. Open spans run to `end`.
TimeSeries active_jobs_timeline(const store::ResultTable& spans, UnixNanos start, UnixNanos end,
                                Nanos bucket_width);

struct JobSeries {
  JobIdentity job;
  double duration_s = 0;
  std::vector<UnixNanos> time;
  std::vector<double> value;
};

struct JobSelector {
  enum class Mode { shortest_k, ids } mode = Mode::shortest_k;
  std::size_t k = 5;
  std::vector<std::uint64_t> ids;  // job.id values
};

struct Grid {
  std::string metric;
  std::string unit;
  std::vector<JobSeries> series;

  // The selected jobs' raw sample rows, in the query table layout.
  store::ResultTable rows;
};

// Picks jobs by closed job-span duration (ties by job id) or by id, and
// returns each one's raw samples. Errc::not_found lists unknown ids.
Grid per_job_grid(const store::ResultTable& metrics, const store::ResultTable& spans, std::string_view metric,
                  const JobSelector& selector);

enum class ChartKind { line, histogram, grid };

std::string_view to_string(ChartKind k);
ChartKind chart_kind_from_string(std::string_view s);

using ChartData = std::variant<TimeSeries, Distribution, Grid>;

// Standalone SVG. Byte-identical for identical input. Errc::invalid_argument on
// empty data or a kind that does not fit the data.
std::string render_svg(const ChartData& data, ChartKind kind);
void render_chart(const ChartData& data, ChartKind kind, const std::filesystem::path& out);

}  // namespace scitrace::analysis
