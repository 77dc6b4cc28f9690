#include "scitrace/wire.hpp"

#include <cmath>
#include <limits>

#include "scitrace/error.hpp"
#include "scitrace/util.hpp"

namespace scitrace::wire {

using nlohmann::json;

namespace {

constexpr std::string_view kHostKey = "host.name";
constexpr std::string_view kUidKey = "job.uid";
constexpr std::string_view kJobKey = "job.id";
constexpr std::string_view kTaskKey = "job.array_task_id";

bool is_identity_key(std::string_view key) {
  return key == kHostKey || key == kUidKey || key == kJobKey || key == kTaskKey;
}

json encode_resource(const std::optional<JobIdentity>& job, const TagSet& tags) {
  json attrs = json::object();
  if (job) {
    attrs[std::string(kHostKey)] = job->hostname;
    attrs[std::string(kUidKey)] = job->uid;
    attrs[std::string(kJobKey)] = job->job_id;
    attrs[std::string(kTaskKey)] = job->array_task_id ? json(*job->array_task_id) : json(nullptr);
  }
  for (const auto& [k, v] : tags) attrs[k] = v;
  return json{{"attributes", std::move(attrs)}};
}

json encode_value(const MetricValue& v) {
  if (const auto* i = std::get_if<std::int64_t>(&v)) return *i;
  return std::get<double>(v);
}

struct Resource {
  std::optional<JobIdentity> job;
  TagSet tags;
};

[[noreturn]] void schema_error(const std::string& field, const std::string& reason) {
  throw Error(Errc::schema, field + ": " + reason);
}

std::uint64_t require_uint(const json& attrs, std::string_view key, const std::string& path) {
  auto it = attrs.find(std::string(key));
  if (it == attrs.end()) schema_error(path + "." + std::string(key), "missing");
  if (!it->is_number_unsigned()) {
    if (it->is_number_integer() && it->get<std::int64_t>() >= 0) return it->get<std::uint64_t>();
    schema_error(path + "." + std::string(key), "must be a non-negative integer");
  }
  return it->get<std::uint64_t>();
}

Resource decode_resource(const json& payload, bool job_required) {
  auto rit = payload.find("resource");
  if (rit == payload.end() || !rit->is_object()) schema_error("resource", "missing or not an object");
  auto ait = rit->find("attributes");
  if (ait == rit->end() || !ait->is_object()) {
    schema_error("resource.attributes", "missing or not an object");
  }
  const json& attrs = *ait;
  const std::string path = "resource.attributes";
  Resource res;
  bool has_host = attrs.contains(std::string(kHostKey));
  if (has_host || job_required) {
    JobIdentity job;
    auto hit = attrs.find(std::string(kHostKey));
    if (hit == attrs.end()) schema_error(path + ".host.name", "missing");
    if (!hit->is_string() || hit->get<std::string>().empty()) {
      schema_error(path + ".host.name", "must be a non-empty string");
    }
    job.hostname = hit->get<std::string>();
    job.uid = require_uint(attrs, kUidKey, path);
    job.job_id = require_uint(attrs, kJobKey, path);
    auto tit = attrs.find(std::string(kTaskKey));
    if (tit != attrs.end() && !tit->is_null()) {
      job.array_task_id = require_uint(attrs, kTaskKey, path);
    }
    res.job = std::move(job);
  }
  for (auto it = attrs.begin(); it != attrs.end(); ++it) {
    if (is_identity_key(it.key())) continue;
    if (!it->is_string()) schema_error(path + "." + it.key(), "tag values must be strings");
    try {
      res.tags.set(it.key(), it->get<std::string>());
    } catch (const Error& e) {
      schema_error(path + "." + it.key(), e.what());
    }
  }
  return res;
}

std::optional<UnixNanos> decode_time(const json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end() || !it->is_string()) return std::nullopt;
  return parse_u64(it->get<std::string>());
}

template <typename Record, typename KeyFn>
std::vector<std::vector<Record>> group_records(std::span<const Record> records, KeyFn key) {
  std::vector<std::vector<Record>> groups;
  for (const auto& r : records) {
    auto it = std::find_if(groups.begin(), groups.end(),
                           [&](const auto& g) { return key(g.front()) == key(r); });
    if (it == groups.end()) {
      groups.push_back({r});
    } else {
      it->push_back(r);
    }
  }
  return groups;
}

}  // namespace

json encode_metrics(std::span<const MetricSample> samples) {
  if (samples.empty()) throw Error(Errc::invalid_argument, "cannot encode an empty metric batch");
  const auto& first = samples.front();
  json metrics = json::array();
  for (const auto& s : samples) {
    if (s.job != first.job || s.tags != first.tags) {
      throw Error(Errc::invalid_argument, "metric batch mixes resources");
    }
    json point{{"timeUnixNano", std::to_string(s.time_unix_nano)},
               {"value", encode_value(s.value)},
               {"traceId", s.trace_id ? json(s.trace_id->hex()) : json(nullptr)}};
    auto it = std::find_if(metrics.begin(), metrics.end(), [&](const json& m) {
      return m["name"] == s.name && m["unit"] == s.unit && m["kind"] == to_wire(s.kind);
    });
    if (it == metrics.end()) {
      metrics.push_back({{"name", s.name},
                         {"unit", s.unit},
                         {"kind", std::string(to_wire(s.kind))},
                         {"points", json::array({std::move(point)})}});
    } else {
      (*it)["points"].push_back(std::move(point));
    }
  }
  return json{{"resource", encode_resource(first.job, first.tags)}, {"metrics", std::move(metrics)}};
}

json encode_spans(std::span<const Span> spans) {
  if (spans.empty()) throw Error(Errc::invalid_argument, "cannot encode an empty span batch");
  const auto& job = spans.front().job;
  json out = json::array();
  for (const auto& s : spans) {
    if (s.job != job) throw Error(Errc::invalid_argument, "span batch mixes resources");
    json attrs = json::object();
    for (const auto& [k, v] : s.attributes) attrs[k] = v;
    out.push_back({{"name", s.name},
                   {"traceId", s.context.trace_id.hex()},
                   {"spanId", s.context.span_id.hex()},
                   {"parentSpanId", s.parent_span_id ? json(s.parent_span_id->hex()) : json(nullptr)},
                   {"kind", std::string(to_string(s.kind))},
                   {"startTimeUnixNano", std::to_string(s.start_unix_nano)},
                   {"endTimeUnixNano",
                    s.end_unix_nano ? json(std::to_string(*s.end_unix_nano)) : json(nullptr)},
                   {"status", std::string(to_string(s.status))},
                   {"attributes", std::move(attrs)}});
  }
  return json{{"resource", encode_resource(job, TagSet{})}, {"spans", std::move(out)}};
}

std::vector<std::vector<MetricSample>> group_by_resource(std::span<const MetricSample> samples) {
  return group_records(samples, [](const MetricSample& s) { return std::tie(s.job, s.tags); });
}

std::vector<std::vector<Span>> group_by_resource(std::span<const Span> spans) {
  return group_records(spans, [](const Span& s) { return s.job; });
}

Decoded<MetricSample> decode_metrics(const json& payload, const MetricRegistry& registry) {
  if (!payload.is_object()) schema_error("$", "payload must be a JSON object");
  Resource res = decode_resource(payload, /*job_required=*/true);
  auto mit = payload.find("metrics");
  if (mit == payload.end() || !mit->is_array()) schema_error("metrics", "missing or not an array");

  Decoded<MetricSample> out;
  std::size_t flat = 0;
  for (std::size_t mi = 0; mi < mit->size(); ++mi) {
    const json& metric = (*mit)[mi];
    const std::string mpath = "metrics[" + std::to_string(mi) + "]";
    if (!metric.is_object()) schema_error(mpath, "not an object");
    auto pit = metric.find("points");
    if (pit == metric.end() || !pit->is_array()) schema_error(mpath + ".points", "missing or not an array");
    const std::size_t npoints = pit->size();
    out.total += npoints;

    // Metric-level problems reject every point of that metric.
    std::optional<RecordError> metric_error;
    std::optional<MetricRegistration> reg;
    MetricKind kind = MetricKind::gauge;
    auto fail_metric = [&](std::string field, std::string reason) {
      if (!metric_error) metric_error = RecordError{0, std::move(field), std::move(reason)};
    };
    auto name_it = metric.find("name");
    auto unit_it = metric.find("unit");
    auto kind_it = metric.find("kind");
    if (name_it == metric.end() || !name_it->is_string()) {
      fail_metric(mpath + ".name", "missing or not a string");
    } else if (!(reg = registry.find(name_it->get<std::string>()))) {
      fail_metric(mpath + ".name", "unregistered metric '" + name_it->get<std::string>() + "'");
    }
    if (unit_it == metric.end() || !unit_it->is_string()) {
      fail_metric(mpath + ".unit", "missing or not a string");
    } else if (reg && unit_it->get<std::string>() != reg->unit) {
      fail_metric(mpath + ".unit", "expected unit '" + reg->unit + "'");
    }
    if (kind_it == metric.end() || !kind_it->is_string()) {
      fail_metric(mpath + ".kind", "missing or not a string");
    } else {
      try {
        kind = metric_kind_from_wire(kind_it->get<std::string>());
        if (reg && kind != reg->kind) fail_metric(mpath + ".kind", "kind does not match registration");
      } catch (const Error& e) {
        fail_metric(mpath + ".kind", e.what());
      }
    }

    for (std::size_t pi = 0; pi < npoints; ++pi, ++flat) {
      if (metric_error) {
        RecordError err = *metric_error;
        err.index = flat;
        out.errors.push_back(std::move(err));
        continue;
      }
      const json& point = (*pit)[pi];
      const std::string ppath = mpath + ".points[" + std::to_string(pi) + "]";
      auto reject = [&](std::string field, std::string reason) {
        out.errors.push_back({flat, ppath + "." + field, std::move(reason)});
      };
      if (!point.is_object()) {
        out.errors.push_back({flat, ppath, "not an object"});
        continue;
      }
      auto t = decode_time(point, "timeUnixNano");
      if (!t) {
        reject("timeUnixNano", "missing or not a decimal string");
        continue;
      }
      if (*t == 0) {
        reject("timeUnixNano", "must be positive");
        continue;
      }
      auto vit = point.find("value");
      MetricValue value;
      if (vit == point.end() || !vit->is_number()) {
        reject("value", "missing or not a number");
        continue;
      }
      if (vit->is_number_float()) {
        double d = vit->get<double>();
        if (!std::isfinite(d)) {
          reject("value", "not finite");
          continue;
        }
        value = d;
      } else if (vit->is_number_unsigned() &&
                 vit->get<std::uint64_t>() > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max())) {
        reject("value", "integer out of range");
        continue;
      } else {
        value = vit->get<std::int64_t>();
      }
      std::optional<TraceId> trace_id;
      auto tit = point.find("traceId");
      if (tit != point.end() && !tit->is_null()) {
        if (!tit->is_string() || !(trace_id = TraceId::from_hex(tit->get<std::string>())) ||
            trace_id->is_zero()) {
          reject("traceId", "must be 32 lowercase hex chars, nonzero, or null");
          continue;
        }
      }
      MetricSample sample;
      sample.name = reg->name;
      sample.unit = reg->unit;
      sample.kind = kind;
      sample.time_unix_nano = *t;
      sample.value = value;
      sample.job = *res.job;
      sample.tags = res.tags;
      sample.trace_id = trace_id;
      out.records.push_back(std::move(sample));
      out.record_index.push_back(flat);
    }
  }
  return out;
}

Decoded<Span> decode_spans(const json& payload) {
  if (!payload.is_object()) schema_error("$", "payload must be a JSON object");
  Resource res = decode_resource(payload, /*job_required=*/false);
  if (!res.tags.empty()) schema_error("resource.attributes", "span resources carry only job identity");
  auto sit = payload.find("spans");
  if (sit == payload.end() || !sit->is_array()) schema_error("spans", "missing or not an array");

  Decoded<Span> out;
  out.total = sit->size();
  for (std::size_t i = 0; i < sit->size(); ++i) {
    const json& js = (*sit)[i];
    const std::string path = "spans[" + std::to_string(i) + "]";
    auto reject = [&](std::string field, std::string reason) {
      out.errors.push_back({i, path + "." + field, std::move(reason)});
    };
    if (!js.is_object()) {
      out.errors.push_back({i, path, "not an object"});
      continue;
    }
    Span span;
    span.job = res.job;
    auto name_it = js.find("name");
    if (name_it == js.end() || !name_it->is_string() || name_it->get<std::string>().empty()) {
      reject("name", "missing or empty");
      continue;
    }
    span.name = name_it->get<std::string>();
    auto tid = js.find("traceId");
    std::optional<TraceId> trace_id;
    if (tid == js.end() || !tid->is_string() || !(trace_id = TraceId::from_hex(tid->get<std::string>())) ||
        trace_id->is_zero()) {
      reject("traceId", "must be 32 lowercase hex chars, nonzero");
      continue;
    }
    auto sid = js.find("spanId");
    std::optional<SpanId> span_id;
    if (sid == js.end() || !sid->is_string() || !(span_id = SpanId::from_hex(sid->get<std::string>())) ||
        span_id->is_zero()) {
      reject("spanId", "must be 16 lowercase hex chars, nonzero");
      continue;
    }
    span.context = TraceContext{*trace_id, *span_id, 0x01};
    auto pid = js.find("parentSpanId");
    if (pid != js.end() && !pid->is_null()) {
      std::optional<SpanId> parent;
      if (!pid->is_string() || !(parent = SpanId::from_hex(pid->get<std::string>())) || parent->is_zero()) {
        reject("parentSpanId", "must be 16 lowercase hex chars, nonzero, or null");
        continue;
      }
      span.parent_span_id = parent;
    }
    try {
      auto kit = js.find("kind");
      span.kind = span_kind_from_string(kit != js.end() && kit->is_string() ? kit->get<std::string>() : "");
    } catch (const Error&) {
      reject("kind", "must be one of pipeline|job|task|custom");
      continue;
    }
    try {
      auto stit = js.find("status");
      span.status =
          span_status_from_string(stit != js.end() && stit->is_string() ? stit->get<std::string>() : "");
    } catch (const Error&) {
      reject("status", "must be one of ok|error|unset");
      continue;
    }
    auto start = decode_time(js, "startTimeUnixNano");
    if (!start || *start == 0) {
      reject("startTimeUnixNano", "missing, zero, or not a decimal string");
      continue;
    }
    span.start_unix_nano = *start;
    auto eit = js.find("endTimeUnixNano");
    if (eit != js.end() && !eit->is_null()) {
      auto end = decode_time(js, "endTimeUnixNano");
      if (!end) {
        reject("endTimeUnixNano", "not a decimal string");
        continue;
      }
      span.end_unix_nano = end;
    }
    auto ait = js.find("attributes");
    if (ait != js.end() && !ait->is_null()) {
      if (!ait->is_object()) {
        reject("attributes", "not an object");
        continue;
      }
      bool bad = false;
      for (auto it = ait->begin(); it != ait->end() && !bad; ++it) {
        try {
          if (!it->is_string()) throw Error(Errc::schema, "attribute values must be strings");
          span.attributes.set(it.key(), it->get<std::string>());
        } catch (const Error& e) {
          reject("attributes." + it.key(), e.what());
          bad = true;
        }
      }
      if (bad) continue;
    }
    try {
      validate(span);
    } catch (const Error& e) {
      reject("endTimeUnixNano", e.what());
      continue;
    }
    out.records.push_back(std::move(span));
    out.record_index.push_back(i);
  }
  return out;
}

}  // namespace scitrace::wire
