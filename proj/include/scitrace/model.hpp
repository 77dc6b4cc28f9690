#pragma once

// Telemetry data model shared by every component: job identity, tags, metric
// samples, trace context, spans and raw cgroup snapshots.

#include <array>
#include <compare>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "scitrace/clock.hpp"

namespace scitrace {

struct JobIdentity {
  std::uint64_t uid = 0;
  std::uint64_t job_id = 0;
  std::optional<std::uint64_t> array_task_id;
  std::string hostname;

  auto operator<=>(const JobIdentity&) const = default;
  bool operator==(const JobIdentity&) const = default;
};

// Throws Errc::invalid_argument when hostname is empty.
void validate(const JobIdentity& job);

std::string to_string(const JobIdentity& job);

// Lowercases, strips a leading "--", maps '-' to '_'. The result must match
// [a-z0-9_.-]+ or Errc::invalid_key is thrown.
std::string normalize_tag_key(std::string_view raw);

inline constexpr std::array<std::string_view, 4> kReservedTagKeys = {
    "case_number", "pipeline_identifier", "pipeline_name", "step_name"};

class TagSet {
 public:
  using Map = std::map<std::string, std::string>;

  TagSet() = default;

  // Key is normalized. Reserved keys reject empty values.
  void set(std::string_view key, std::string value);
  std::optional<std::string> get(std::string_view key) const;
  bool contains(std::string_view key) const { return entries_.contains(std::string(key)); }
  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }

  const Map& entries() const { return entries_; }
  Map::const_iterator begin() const { return entries_.begin(); }
  Map::const_iterator end() const { return entries_.end(); }

  bool operator==(const TagSet&) const = default;

 private:
  Map entries_;
};

enum class MetricKind { gauge, cumulative_counter };

std::string_view to_string(MetricKind kind);
MetricKind metric_kind_from_wire(std::string_view wire);  // "gauge" | "cumulative"
std::string_view to_wire(MetricKind kind);

using MetricValue = std::variant<std::int64_t, double>;

double as_double(const MetricValue& v);

struct TraceId {
  std::array<std::uint8_t, 16> bytes{};
  bool is_zero() const;
  std::string hex() const;
  static std::optional<TraceId> from_hex(std::string_view hex);
  auto operator<=>(const TraceId&) const = default;
};

struct SpanId {
  std::array<std::uint8_t, 8> bytes{};
  bool is_zero() const;
  std::string hex() const;
  static std::optional<SpanId> from_hex(std::string_view hex);
  auto operator<=>(const SpanId&) const = default;
};

struct TraceContext {
  TraceId trace_id;
  SpanId span_id;
  std::uint8_t flags = 0x01;

  bool operator==(const TraceContext&) const = default;
};

struct MetricSample {
  std::string name;
  std::string unit;
  UnixNanos time_unix_nano = 0;
  MetricValue value = std::int64_t{0};
  MetricKind kind = MetricKind::gauge;
  JobIdentity job;
  TagSet tags;
  std::optional<TraceId> trace_id;

  bool operator==(const MetricSample&) const = default;
};

enum class SpanKind { pipeline, job, task, custom };
enum class SpanStatus { unset, ok, error };

std::string_view to_string(SpanKind kind);
std::string_view to_string(SpanStatus status);
SpanKind span_kind_from_string(std::string_view s);
SpanStatus span_status_from_string(std::string_view s);

struct Span {
  std::string name;
  TraceContext context;
  std::optional<SpanId> parent_span_id;
  UnixNanos start_unix_nano = 0;
  std::optional<UnixNanos> end_unix_nano;
  SpanKind kind = SpanKind::custom;
  TagSet attributes;
  SpanStatus status = SpanStatus::unset;
  // Resource identity of the emitting job; absent for orchestrator-level spans.
  std::optional<JobIdentity> job;

  bool closed() const { return end_unix_nano.has_value(); }
  bool operator==(const Span&) const = default;
};

// Throws Errc::invalid_argument on a violated Span invariant.
void validate(const Span& span);

struct CgroupSnapshot {
  UnixNanos taken_unix_nano = 0;
  std::uint64_t rss_bytes = 0;
  std::uint64_t cache_bytes = 0;
  std::uint64_t memory_current_bytes = 0;
  std::uint64_t cpu_usage_ns_cumulative = 0;
  std::uint64_t pid_count = 0;
  std::uint64_t open_files = 0;

  bool operator==(const CgroupSnapshot&) const = default;
};

// Metric names produced by the agent.
namespace metric_names {
inline constexpr std::string_view kMemoryRss = "job.memory.rss";
inline constexpr std::string_view kMemoryCache = "job.memory.cache";
inline constexpr std::string_view kMemoryCurrent = "job.memory.current";
inline constexpr std::string_view kCpuTime = "job.cpu.time";
inline constexpr std::string_view kCpuUtilization = "job.cpu.utilization";
inline constexpr std::string_view kOpenFiles = "job.open_files";
inline constexpr std::string_view kPids = "job.pids";
}  // namespace metric_names

struct MetricRegistration {
  std::string name;
  std::string unit;
  MetricKind kind = MetricKind::gauge;
  bool operator==(const MetricRegistration&) const = default;
};

class MetricRegistry {
 public:
  MetricRegistry() = default;

  // Idempotent for identical registrations; Errc::conflict on unit/kind mismatch.
  MetricRegistration register_metric(std::string_view name, std::string_view unit, MetricKind kind);
  std::optional<MetricRegistration> find(std::string_view name) const;
  std::vector<MetricRegistration> all() const;

  // The registry pre-populated with every metric this toolkit emits.
  static MetricRegistry& builtin();

 private:
  mutable std::mutex mu_;
  std::map<std::string, MetricRegistration, std::less<>> table_;
};

}  // namespace scitrace
