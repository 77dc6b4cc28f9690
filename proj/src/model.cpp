#include "scitrace/model.hpp"

#include <algorithm>
#include <cctype>

#include "scitrace/error.hpp"
#include "scitrace/util.hpp"

namespace scitrace {

void validate(const JobIdentity& job) {
  if (job.hostname.empty()) {
    throw Error(Errc::invalid_argument, "job identity requires a non-empty hostname");
  }
}

std::string to_string(const JobIdentity& job) {
  std::string out = "uid=" + std::to_string(job.uid) + " job=" + std::to_string(job.job_id);
  if (job.array_task_id) out += " task=" + std::to_string(*job.array_task_id);
  out += " host=" + job.hostname;
  return out;
}

std::string normalize_tag_key(std::string_view raw) {
  if (raw.empty()) throw Error(Errc::invalid_key, "empty tag key");
  std::string_view body = raw;
  if (body.starts_with("--")) body.remove_prefix(2);
  std::string out;
  out.reserve(body.size());
  for (char c : body) {
    char lower = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (lower == '-') lower = '_';
    bool ok = (lower >= 'a' && lower <= 'z') || (lower >= '0' && lower <= '9') || lower == '_' ||
              lower == '.';
    if (!ok) {
      throw Error(Errc::invalid_key, "tag key '" + std::string(raw) + "' contains disallowed character");
    }
    out.push_back(lower);
  }
  if (out.empty()) throw Error(Errc::invalid_key, "tag key '" + std::string(raw) + "' is empty after normalization");
  return out;
}

void TagSet::set(std::string_view key, std::string value) {
  std::string k = normalize_tag_key(key);
  bool reserved = std::find(kReservedTagKeys.begin(), kReservedTagKeys.end(), k) != kReservedTagKeys.end();
  if (reserved && value.empty()) {
    throw Error(Errc::invalid_argument, "reserved tag '" + k + "' requires a non-empty value");
  }
  entries_[std::move(k)] = std::move(value);
}

std::optional<std::string> TagSet::get(std::string_view key) const {
  auto it = entries_.find(std::string(key));
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

std::string_view to_string(MetricKind kind) {
  return kind == MetricKind::gauge ? "gauge" : "cumulative_counter";
}

std::string_view to_wire(MetricKind kind) {
  return kind == MetricKind::gauge ? "gauge" : "cumulative";
}

MetricKind metric_kind_from_wire(std::string_view wire) {
  if (wire == "gauge") return MetricKind::gauge;
  if (wire == "cumulative" || wire == "cumulative_counter") return MetricKind::cumulative_counter;
  throw Error(Errc::schema, "unknown metric kind '" + std::string(wire) + "'");
}

double as_double(const MetricValue& v) {
  return std::visit([](auto x) { return static_cast<double>(x); }, v);
}

namespace {

template <std::size_t N>
bool all_zero(const std::array<std::uint8_t, N>& bytes) {
  return std::all_of(bytes.begin(), bytes.end(), [](std::uint8_t b) { return b == 0; });
}

template <typename Id>
std::optional<Id> id_from_hex(std::string_view hex) {
  Id id;
  if (hex.size() != id.bytes.size() * 2) return std::nullopt;
  auto decoded = scitrace::from_hex(hex);
  if (!decoded) return std::nullopt;
  std::copy(decoded->begin(), decoded->end(), id.bytes.begin());
  return id;
}

}  // namespace

bool TraceId::is_zero() const { return all_zero(bytes); }
std::string TraceId::hex() const { return to_hex(bytes); }
std::optional<TraceId> TraceId::from_hex(std::string_view hex) { return id_from_hex<TraceId>(hex); }

bool SpanId::is_zero() const { return all_zero(bytes); }
std::string SpanId::hex() const { return to_hex(bytes); }
std::optional<SpanId> SpanId::from_hex(std::string_view hex) { return id_from_hex<SpanId>(hex); }

std::string_view to_string(SpanKind kind) {
  switch (kind) {
    case SpanKind::pipeline: return "pipeline";
    case SpanKind::job: return "job";
    case SpanKind::task: return "task";
    case SpanKind::custom: return "custom";
  }
  return "custom";
}

std::string_view to_string(SpanStatus status) {
  switch (status) {
    case SpanStatus::unset: return "unset";
    case SpanStatus::ok: return "ok";
    case SpanStatus::error: return "error";
  }
  return "unset";
}

SpanKind span_kind_from_string(std::string_view s) {
  if (s == "pipeline") return SpanKind::pipeline;
  if (s == "job") return SpanKind::job;
  if (s == "task") return SpanKind::task;
  if (s == "custom") return SpanKind::custom;
  throw Error(Errc::invalid_argument, "unknown span kind '" + std::string(s) + "'");
}

SpanStatus span_status_from_string(std::string_view s) {
  if (s == "unset") return SpanStatus::unset;
  if (s == "ok") return SpanStatus::ok;
  if (s == "error") return SpanStatus::error;
  throw Error(Errc::invalid_argument, "unknown span status '" + std::string(s) + "'");
}

void validate(const Span& span) {
  if (span.name.empty()) throw Error(Errc::invalid_argument, "span name is empty");
  if (span.context.trace_id.is_zero() || span.context.span_id.is_zero()) {
    throw Error(Errc::invalid_argument, "span '" + span.name + "' has a zero id");
  }
  if (span.parent_span_id && *span.parent_span_id == span.context.span_id) {
    throw Error(Errc::invalid_argument, "span '" + span.name + "' is its own parent");
  }
  if (span.end_unix_nano && *span.end_unix_nano < span.start_unix_nano) {
    throw Error(Errc::invalid_argument, "span '" + span.name + "' ends before it starts");
  }
  if (span.job) validate(*span.job);
}

MetricRegistration MetricRegistry::register_metric(std::string_view name, std::string_view unit,
                                                   MetricKind kind) {
  if (name.empty()) throw Error(Errc::invalid_argument, "metric name is empty");
  std::lock_guard lock(mu_);
  MetricRegistration reg{std::string(name), std::string(unit), kind};
  auto it = table_.find(name);
  if (it != table_.end()) {
    if (it->second != reg) {
      throw Error(Errc::conflict, "metric '" + reg.name + "' already registered as " +
                                      it->second.unit + "/" + std::string(to_string(it->second.kind)));
    }
    return it->second;
  }
  table_.emplace(reg.name, reg);
  return reg;
}

std::optional<MetricRegistration> MetricRegistry::find(std::string_view name) const {
  std::lock_guard lock(mu_);
  auto it = table_.find(name);
  if (it == table_.end()) return std::nullopt;
  return it->second;
}

std::vector<MetricRegistration> MetricRegistry::all() const {
  std::lock_guard lock(mu_);
  std::vector<MetricRegistration> out;
  for (const auto& [_, reg] : table_) out.push_back(reg);
  return out;
}

MetricRegistry& MetricRegistry::builtin() {
  static MetricRegistry registry;
  static const bool populated = [] {
    using namespace metric_names;
    registry.register_metric(kMemoryRss, "By", MetricKind::gauge);
    registry.register_metric(kMemoryCache, "By", MetricKind::gauge);
    registry.register_metric(kMemoryCurrent, "By", MetricKind::gauge);
    registry.register_metric(kCpuTime, "ns", MetricKind::cumulative_counter);
    registry.register_metric(kCpuUtilization, "1", MetricKind::gauge);
    registry.register_metric(kOpenFiles, "1", MetricKind::gauge);
    registry.register_metric(kPids, "1", MetricKind::gauge);
    return true;
  }();
  (void)populated;
  return registry;
}

}  // namespace scitrace
