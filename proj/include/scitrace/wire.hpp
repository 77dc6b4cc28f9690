#pragma once

// OTLP-compatible JSON payloads for POST /v1/metrics and POST /v1/traces.
//
//   {"resource":{"attributes":{"host.name":..,"job.uid":..,"job.id":..,
//                              "job.array_task_id":..,<tags>}},
//    "metrics":[{"name":..,"unit":..,"kind":"gauge"|"cumulative",
//                "points":[{"timeUnixNano":"<decimal>","value":<number>,
//                           "traceId":<hex|null>}]}]}
//
//   {"resource":{...},
//    "spans":[{"name":..,"traceId":..,"spanId":..,"parentSpanId":<hex|null>,
//              "kind":..,"startTimeUnixNano":"..","endTimeUnixNano":"..",
//              "status":..,"attributes":{...}}]}

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "scitrace/model.hpp"

namespace scitrace::wire {

inline constexpr std::string_view kMetricsPath = "/v1/metrics";
inline constexpr std::string_view kTracesPath = "/v1/traces";

// All samples must share one resource (job identity + tags); Errc::invalid_argument otherwise.
nlohmann::json encode_metrics(std::span<const MetricSample> samples);

// Spans must share one resource (job identity, possibly absent).
nlohmann::json encode_spans(std::span<const Span> spans);

// Groups samples by resource, preserving first-appearance order.
std::vector<std::vector<MetricSample>> group_by_resource(std::span<const MetricSample> samples);
std::vector<std::vector<Span>> group_by_resource(std::span<const Span> spans);

struct RecordError {
  std::size_t index = 0;  // flat record index within the payload
  std::string field;      // JSON path of the offending field
  std::string reason;
};

template <typename Record>
struct Decoded {
  std::vector<Record> records;
  std::vector<std::size_t> record_index;  // flat index of each accepted record
  std::vector<RecordError> errors;
  std::size_t total = 0;
};

// Payload-level schema violations throw Error(Errc::schema) naming the field.
// Record-level violations are collected so valid records can proceed.
Decoded<MetricSample> decode_metrics(const nlohmann::json& payload,
                                     const MetricRegistry& registry = MetricRegistry::builtin());
Decoded<Span> decode_spans(const nlohmann::json& payload);

}  // namespace scitrace::wire
