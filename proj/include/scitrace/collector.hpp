#pragma once

// Receiver -> processor -> exporter pipeline in front of the telemetry store.

#include <condition_variable>
#include <deque>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "scitrace/clock.hpp"
#include "scitrace/store.hpp"
#include "scitrace/wire.hpp"

namespace scitrace::collector {

struct AttributeRule {
  std::string key;
  std::string pattern;
  std::regex regex;  // compiled at config load
};

// Compiles `pattern`; Errc::configuration on an invalid regex.
AttributeRule make_rule(std::string key, std::string pattern);

struct FilterProcessor {
  // A record passes when every predicate's key is present and matches.
  std::vector<AttributeRule> predicates;
};

struct BatchProcessor {
  std::size_t max_records = 512;
  Nanos max_delay = std::chrono::seconds(1);
};

struct PipelineConfig {
  std::string listen_address = "127.0.0.1:4318";
  std::vector<FilterProcessor> filters;  // applied in order
  BatchProcessor batch;
  std::filesystem::path store_dir = "scitrace-store";
  std::vector<AttributeRule> drop_rules;
  store::StoreOptions store_options;
  Nanos shutdown_deadline = std::chrono::seconds(10);
  Nanos retry_base = std::chrono::milliseconds(100);
  Nanos retry_max = std::chrono::seconds(5);
  std::size_t max_backlog_records = 100'000;  // beyond this, ingest answers 503
};

// Reads the declarative config document (JSON). Keys: listen_address,
// processors ([{"filter":[{"key","regex"}]}, {"batch":{"max_records","max_delay"}}]),
// store_dir, drop_rules ([{"key","regex"}] or [[key, regex]]).
PipelineConfig parse_config(const nlohmann::json& doc);
PipelineConfig load_config(const std::filesystem::path& path);

enum class Decision { keep, drop };

struct FilterDecision {
  Decision decision = Decision::keep;
  std::optional<std::size_t> rule_index;  // rule that caused a drop
};

// Drop iff some rule's key is present on the record and its value matches.
FilterDecision apply_filter(const store::StoredRecord& record, const std::vector<AttributeRule>& rules);

struct IngestResult {
  int http_status = 200;
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::size_t duplicates = 0;
  std::size_t filtered = 0;
  std::vector<wire::RecordError> errors;
  std::string message;

  nlohmann::json to_json() const;
};

enum class FlushTrigger { size, timer, shutdown };

std::string_view to_string(FlushTrigger t);

struct PipelineStats {
  std::size_t flushes_size = 0;
  std::size_t flushes_timer = 0;
  std::size_t flushes_shutdown = 0;
  std::size_t store_failures = 0;
  std::size_t records_written = 0;
  std::size_t unflushed_at_shutdown = 0;
  std::vector<std::string> log;  // filter decisions and flush events
};

class Pipeline {
 public:
  Pipeline(PipelineConfig cfg, std::shared_ptr<store::Store> store, const Clock& clock);

  // `body` is the raw request payload. Returns the HTTP answer to send.
  IngestResult ingest(const std::string& body, store::Signal signal);
  IngestResult ingest(const nlohmann::json& payload, store::Signal signal);

  // Flushes on timer if the oldest buffered record is older than max_delay,
  // and retries a previously failed write once its backoff has elapsed.
  void on_timer();
  // Drains every buffer, retrying store failures until the deadline.
  // Returns the number of records left unflushed.
  std::size_t shutdown();

  // Ids of every record accepted so far (stored or still buffered).
  std::unordered_set<std::string> accepted_ids() const;
  std::size_t buffered() const;
  PipelineStats stats() const;
  const PipelineConfig& config() const { return cfg_; }
  store::Store& store() { return *store_; }

 private:
  struct Buffer {
    std::deque<store::StoredRecord> records;
    std::optional<UnixNanos> oldest_receive;
    std::optional<UnixNanos> retry_at;
    int failures = 0;
  };

  // Writes the first `n` buffered records as one batch. Returns false and
  // schedules a retry on store failure. Caller holds mu_.
  bool flush_locked(Buffer& buf, std::size_t n, FlushTrigger trigger);
  Buffer& buffer(store::Signal s) { return s == store::Signal::metrics ? metrics_buf_ : spans_buf_; }

  PipelineConfig cfg_;
  std::shared_ptr<store::Store> store_;
  const Clock& clock_;

  mutable std::mutex mu_;
  std::unordered_set<std::string> seen_;
  std::unordered_set<std::string> accepted_;
  Buffer metrics_buf_;
  Buffer spans_buf_;
  PipelineStats stats_;
};

// HTTP front end: POST /v1/metrics, POST /v1/traces, GET /healthz, GET /v1/query.
class Server {
 public:
  Server(std::shared_ptr<Pipeline> pipeline, Nanos timer_period = std::chrono::milliseconds(50));
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // Binds and starts serving on a background thread. Port 0 picks a free
  // port. Returns the bound port.
  int start(const std::string& host, int port);
  // Stops accepting requests and flushes the pipeline.
  std::size_t stop();
  int port() const { return port_; }

  // Returning a status short-circuits the request (fault injection).
  using PreHandler = std::function<std::optional<int>(const std::string& method, const std::string& path)>;
  void set_pre_handler(PreHandler handler);

  Pipeline& pipeline() { return *pipeline_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::shared_ptr<Pipeline> pipeline_;
  int port_ = 0;
};

// Parses the query-string parameters of GET /v1/query into a request:
// signal, start, end, name (repeatable or comma-separated), trace_id, attr.<key>=<value>.
store::QueryRequest parse_query_params(const std::multimap<std::string, std::string>& params);

// Runs the collector until SIGINT/SIGTERM; used by `scitrace collector`.
int run_collector(const PipelineConfig& cfg);

}  // namespace scitrace::collector
