#include "scitrace/collector.hpp"

#include <algorithm>
#include <fstream>

#include "scitrace/error.hpp"
#include "scitrace/util.hpp"

namespace scitrace::collector {

using nlohmann::json;

AttributeRule make_rule(std::string key, std::string pattern) {
  AttributeRule rule;
  rule.key = normalize_tag_key(key);
  rule.pattern = std::move(pattern);
  try {
    rule.regex = std::regex(rule.pattern, std::regex::ECMAScript);
  } catch (const std::regex_error& e) {
    throw Error(Errc::configuration, "invalid regex '" + rule.pattern + "' for key '" + rule.key + "': " + e.what());
  }
  return rule;
}

namespace {

Nanos duration_value(const json& v, const std::string& field) {
  if (v.is_number()) return Nanos(static_cast<std::int64_t>(v.get<double>() * 1e9));
  if (v.is_string()) return parse_duration(v.get<std::string>());
  throw Error(Errc::configuration, field + " must be a duration string or a number of seconds");
}

std::vector<AttributeRule> parse_rules(const json& arr, const std::string& field) {
  if (!arr.is_array()) throw Error(Errc::configuration, field + " must be an array");
  std::vector<AttributeRule> rules;
  for (const auto& r : arr) {
    if (r.is_array() && r.size() == 2 && r[0].is_string() && r[1].is_string()) {
      rules.push_back(make_rule(r[0].get<std::string>(), r[1].get<std::string>()));
    } else if (r.is_object() && r.contains("key") && r.contains("regex")) {
      rules.push_back(make_rule(r["key"].get<std::string>(), r["regex"].get<std::string>()));
    } else {
      throw Error(Errc::configuration, field + " entries must be {\"key\",\"regex\"} or [key, regex]");
    }
  }
  return rules;
}

std::optional<std::string> record_attribute(const store::StoredRecord& record, const std::string& key) {
  if (const auto* m = std::get_if<MetricSample>(&record.body)) {
    if (auto v = m->tags.get(key)) return v;
    if (key == "host.name") return m->job.hostname;
    if (key == "job.id") return std::to_string(m->job.job_id);
    if (key == "job.uid") return std::to_string(m->job.uid);
    return std::nullopt;
  }
  const auto& s = std::get<Span>(record.body);
  if (auto v = s.attributes.get(key)) return v;
  if (s.job) {
    if (key == "host.name") return s.job->hostname;
    if (key == "job.id") return std::to_string(s.job->job_id);
    if (key == "job.uid") return std::to_string(s.job->uid);
  }
  return std::nullopt;
}

bool passes(const store::StoredRecord& record, const FilterProcessor& filter) {
  for (const auto& p : filter.predicates) {
    auto v = record_attribute(record, p.key);
    if (!v || !std::regex_search(*v, p.regex)) return false;
  }
  return true;
}

}  // namespace

PipelineConfig parse_config(const json& doc) {
  if (!doc.is_object()) throw Error(Errc::configuration, "config must be a JSON object");
  PipelineConfig cfg;
  bool seen_batch = false;
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string& key = it.key();
    const json& v = it.value();
    if (key == "listen_address") {
      cfg.listen_address = v.get<std::string>();
    } else if (key == "store_dir") {
      cfg.store_dir = v.get<std::string>();
    } else if (key == "drop_rules") {
      cfg.drop_rules = parse_rules(v, "drop_rules");
    } else if (key == "processors") {
      if (!v.is_array()) throw Error(Errc::configuration, "processors must be an array");
      for (const auto& p : v) {
        if (p.contains("filter")) {
          cfg.filters.push_back(FilterProcessor{parse_rules(p["filter"], "processors.filter")});
        } else if (p.contains("batch")) {
          if (seen_batch) throw Error(Errc::configuration, "at most one batch processor is allowed");
          seen_batch = true;
          const json& b = p["batch"];
          if (b.contains("max_records")) {
            auto n = b["max_records"].get<std::int64_t>();
            if (n < 1) throw Error(Errc::configuration, "batch.max_records must be at least 1");
            cfg.batch.max_records = static_cast<std::size_t>(n);
          }
          if (b.contains("max_delay")) cfg.batch.max_delay = duration_value(b["max_delay"], "batch.max_delay");
        } else {
          throw Error(Errc::configuration, "unknown processor " + p.dump());
        }
      }
    } else if (key == "shutdown_deadline") {
      cfg.shutdown_deadline = duration_value(v, key);
    } else if (key == "fsync") {
      cfg.store_options.fsync = v.get<bool>();
    } else if (key == "max_segment_bytes") {
      cfg.store_options.max_segment_bytes = v.get<std::uint64_t>();
    } else if (key == "max_segment_span") {
      cfg.store_options.max_segment_span = duration_value(v, key);
    } else {
      throw Error(Errc::configuration, "unknown config key '" + key + "'");
    }
  }
  return cfg;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  std::string text = read_file(path);
  json doc = json::parse(text, nullptr, false);
  if (doc.is_discarded()) throw Error(Errc::configuration, "config " + path.string() + " is not valid JSON");
  return parse_config(doc);
}

FilterDecision apply_filter(const store::StoredRecord& record, const std::vector<AttributeRule>& rules) {
  for (std::size_t i = 0; i < rules.size(); ++i) {
    auto v = record_attribute(record, rules[i].key);
    if (v && std::regex_search(*v, rules[i].regex)) return {Decision::drop, i};
  }
  return {Decision::keep, std::nullopt};
}

json IngestResult::to_json() const {
  json errs = json::array();
  for (const auto& e : errors) errs.push_back({{"index", e.index}, {"field", e.field}, {"reason", e.reason}});
  json j{{"accepted", accepted}, {"rejected", rejected}, {"duplicates", duplicates},
         {"filtered", filtered}, {"errors", std::move(errs)}};
  if (!message.empty()) j["message"] = message;
  return j;
}

std::string_view to_string(FlushTrigger t) {
  switch (t) {
    case FlushTrigger::size: return "size";
    case FlushTrigger::timer: return "timer";
    case FlushTrigger::shutdown: return "shutdown";
  }
  return "unknown";
}

Pipeline::Pipeline(PipelineConfig cfg, std::shared_ptr<store::Store> store, const Clock& clock)
    : cfg_(std::move(cfg)), store_(std::move(store)), clock_(clock) {
  seen_ = store_->record_ids();
}

IngestResult Pipeline::ingest(const std::string& body, store::Signal signal) {
  json payload = json::parse(body, nullptr, false);
  if (payload.is_discarded()) {
    IngestResult r;
    r.http_status = 400;
    r.message = "payload is not valid JSON";
    return r;
  }
  return ingest(payload, signal);
}

IngestResult Pipeline::ingest(const json& payload, store::Signal signal) {
  IngestResult result;
  std::vector<store::StoredRecord> records;
  try {
    if (signal == store::Signal::metrics) {
      auto decoded = wire::decode_metrics(payload);
      result.errors = std::move(decoded.errors);
      for (auto& m : decoded.records) {
        std::string id = store::record_id(m);
        records.push_back(store::StoredRecord{std::move(id), 0, std::move(m)});
      }
    } else {
      auto decoded = wire::decode_spans(payload);
      result.errors = std::move(decoded.errors);
      for (auto& s : decoded.records) {
        std::string id = store::record_id(s);
        records.push_back(store::StoredRecord{std::move(id), 0, std::move(s)});
      }
    }
  } catch (const Error& e) {
    result.http_status = 400;
    result.message = e.what();
    return result;
  }
  result.rejected = result.errors.size();
  if (records.empty() && !result.errors.empty()) {
    result.http_status = 400;
    result.message = result.errors.front().field + ": " + result.errors.front().reason;
    return result;
  }

  std::lock_guard lock(mu_);
  if (metrics_buf_.records.size() + spans_buf_.records.size() >= cfg_.max_backlog_records) {
    result.http_status = 503;
    result.message = "store unavailable; backlog full";
    result.rejected += records.size();
    return result;
  }
  const UnixNanos now = clock_.now();
  Buffer& buf = buffer(signal);
  for (auto& r : records) {
    r.receive_time = now;
    bool kept = std::all_of(cfg_.filters.begin(), cfg_.filters.end(),
                            [&](const FilterProcessor& f) { return passes(r, f); });
    if (!kept) {
      ++result.filtered;
      continue;
    }
    auto decision = apply_filter(r, cfg_.drop_rules);
    if (decision.decision == Decision::drop) {
      ++result.filtered;
      stats_.log.push_back("drop rule " + std::to_string(*decision.rule_index) + " (" +
                           cfg_.drop_rules[*decision.rule_index].key + ") dropped " + r.id);
      continue;
    }
    if (!seen_.insert(r.id).second) {
      ++result.duplicates;
      continue;
    }
    accepted_.insert(r.id);
    ++result.accepted;
    if (!buf.oldest_receive) buf.oldest_receive = now;
    buf.records.push_back(std::move(r));
  }
  while (buf.records.size() >= cfg_.batch.max_records && !buf.retry_at) {
    if (!flush_locked(buf, cfg_.batch.max_records, FlushTrigger::size)) break;
  }
  return result;
}

bool Pipeline::flush_locked(Buffer& buf, std::size_t n, FlushTrigger trigger) {
  n = std::min(n, buf.records.size());
  if (n == 0) return true;
  std::vector<store::StoredRecord> batch(buf.records.begin(), buf.records.begin() + static_cast<std::ptrdiff_t>(n));
  try {
    store_->append(batch);
  } catch (const Error& e) {
    ++buf.failures;
    ++stats_.store_failures;
    auto delay = cfg_.retry_base * (1LL << std::min(buf.failures - 1, 20));
    delay = std::min<Nanos>(delay, cfg_.retry_max);
    buf.retry_at = clock_.now() + static_cast<UnixNanos>(delay.count());
    stats_.log.push_back(std::string("store write failed (") + e.what() + "); retry scheduled");
    return false;
  }
  buf.records.erase(buf.records.begin(), buf.records.begin() + static_cast<std::ptrdiff_t>(n));
  buf.failures = 0;
  buf.retry_at.reset();
  buf.oldest_receive = buf.records.empty() ? std::nullopt : std::optional(buf.records.front().receive_time);
  stats_.records_written += n;
  switch (trigger) {
    case FlushTrigger::size: ++stats_.flushes_size; break;
    case FlushTrigger::timer: ++stats_.flushes_timer; break;
    case FlushTrigger::shutdown: ++stats_.flushes_shutdown; break;
  }
  return true;
}

void Pipeline::on_timer() {
  std::lock_guard lock(mu_);
  const UnixNanos now = clock_.now();
  for (Buffer* buf : {&metrics_buf_, &spans_buf_}) {
    if (buf->records.empty()) continue;
    if (buf->retry_at && now < *buf->retry_at) continue;
    bool due = buf->retry_at.has_value() ||
               (buf->oldest_receive && now - *buf->oldest_receive >= static_cast<UnixNanos>(cfg_.batch.max_delay.count()));
    if (!due) continue;
    // A retried batch keeps its size trigger; only the remainder is timer-flushed.
    while (!buf->records.empty()) {
      auto trigger = buf->records.size() >= cfg_.batch.max_records ? FlushTrigger::size : FlushTrigger::timer;
      if (!flush_locked(*buf, cfg_.batch.max_records, trigger)) break;
    }
  }
}

std::size_t Pipeline::shutdown() {
  auto deadline = std::chrono::steady_clock::now() + cfg_.shutdown_deadline;
  std::unique_lock lock(mu_);
  for (Buffer* buf : {&metrics_buf_, &spans_buf_}) {
    while (!buf->records.empty()) {
      auto trigger = buf->records.size() >= cfg_.batch.max_records ? FlushTrigger::size : FlushTrigger::shutdown;
      if (flush_locked(*buf, cfg_.batch.max_records, trigger)) continue;
      auto remaining = deadline - std::chrono::steady_clock::now();
      if (remaining <= Nanos::zero()) break;
      auto wait = std::min<Nanos>(cfg_.retry_base * (1LL << std::min(buf->failures - 1, 20)), cfg_.retry_max);
      lock.unlock();
      std::this_thread::sleep_for(std::min<Nanos>(wait, std::chrono::duration_cast<Nanos>(remaining)));
      lock.lock();
    }
  }
  stats_.unflushed_at_shutdown = metrics_buf_.records.size() + spans_buf_.records.size();
  return stats_.unflushed_at_shutdown;
}

std::unordered_set<std::string> Pipeline::accepted_ids() const {
  std::lock_guard lock(mu_);
  return accepted_;
}

std::size_t Pipeline::buffered() const {
  std::lock_guard lock(mu_);
  return metrics_buf_.records.size() + spans_buf_.records.size();
}

PipelineStats Pipeline::stats() const {
  std::lock_guard lock(mu_);
  return stats_;
}

store::QueryRequest parse_query_params(const std::multimap<std::string, std::string>& params) {
  store::QueryRequest req;
  bool have_start = false, have_end = false;
  for (const auto& [k, v] : params) {
    if (k == "signal") {
      req.signal = store::signal_from_string(v);
    } else if (k == "start" || k == "end") {
      auto t = parse_u64(v);
      if (!t) throw Error(Errc::invalid_argument, k + " must be unix nanoseconds");
      (k == "start" ? req.start_time : req.end_time) = *t;
      (k == "start" ? have_start : have_end) = true;
    } else if (k == "name") {
      if (!req.metric_names) req.metric_names.emplace();
      for (auto part : split(v, ',')) {
        if (!part.empty()) req.metric_names->emplace_back(part);
      }
    } else if (k == "trace_id") {
      req.trace_id = v;
    } else if (k.starts_with("attr.")) {
      req.attribute_filters[normalize_tag_key(k.substr(5))] = v;
    } else {
      throw Error(Errc::invalid_argument, "unknown query parameter '" + k + "'");
    }
  }
  if (!have_start || !have_end) throw Error(Errc::invalid_argument, "start and end are required");
  store::validate(req);
  return req;
}

}  // namespace scitrace::collector
