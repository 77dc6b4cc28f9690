#pragma once

// Append-only telemetry store.
//
// Records live in newline-delimited JSON segment files, one series of files
// per signal ("metrics-000001.ndjson", "spans-000001.ndjson", ...). Each
// appended batch is terminated by a commit line {"commit":<seq>,"records":<n>};
// readers ignore everything after the last commit line, and the writer
// truncates such a tail on open. A batch is therefore visible entirely or not
// at all.

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_set>
#include <variant>
#include <vector>

#include "json.hpp"
#include "scitrace/clock.hpp"
#include "scitrace/model.hpp"

namespace scitrace::store {

namespace fs = std::filesystem;

enum class Signal { metrics, spans };

std::string_view to_string(Signal s);
Signal signal_from_string(std::string_view s);  // Errc::invalid_argument on unknown

struct StoredRecord {
  std::string id;
  UnixNanos receive_time = 0;
  std::variant<MetricSample, Span> body;

  Signal signal() const { return std::holds_alternative<MetricSample>(body) ? Signal::metrics : Signal::spans; }
  UnixNanos time() const;
  bool operator==(const StoredRecord&) const = default;
};

// Record identity used for deduplication: metrics hash (resource, name,
// time, value); spans use (trace id, span id) plus an ":open" suffix for
// not-yet-closed spans.
std::string record_id(const MetricSample& s);
std::string record_id(const Span& s);

nlohmann::json to_json(const StoredRecord& r);
// Errc::parse_error for lines that are not a valid stored record.
StoredRecord record_from_json(const nlohmann::json& j);

struct SegmentInfo {
  fs::path path;
  Signal signal = Signal::metrics;
  UnixNanos min_time = 0;
  UnixNanos max_time = 0;
  std::size_t record_count = 0;
  std::uint64_t bytes = 0;
  bool sealed = false;
};

struct QueryRequest {
  Signal signal = Signal::metrics;
  UnixNanos start_time = 0;
  UnixNanos end_time = 0;
  std::optional<std::vector<std::string>> metric_names;
  std::map<std::string, std::string> attribute_filters;
  std::optional<std::string> trace_id;
};

// Errc::invalid_range when start >= end.
void validate(const QueryRequest& req);

enum class ColumnType { int_, float_, string_ };

std::string_view to_string(ColumnType t);

struct Column {
  std::string name;
  ColumnType type = ColumnType::string_;
  bool operator==(const Column&) const = default;
};

using Cell = std::variant<std::monostate, std::int64_t, double, std::string>;

struct ResultTable {
  std::vector<Column> columns;
  std::vector<std::vector<Cell>> rows;

  std::optional<std::size_t> column_index(std::string_view name) const;
  nlohmann::json to_json() const;
  static ResultTable from_json(const nlohmann::json& j);
  std::string to_csv() const;

  bool operator==(const ResultTable&) const = default;
};

// Leading columns of every result table, in order.
std::vector<Column> fixed_columns(Signal signal);

// Row construction shared by query() and anything that tabulates records.
ResultTable tabulate(Signal signal, const std::vector<const StoredRecord*>& records);

// Does `r` satisfy every predicate of `req` (time, names, attributes, trace)?
bool matches(const StoredRecord& r, const QueryRequest& req);

struct TraceSummary {
  std::string trace_id;
  std::string root_name;
  UnixNanos start = 0;
  std::optional<UnixNanos> end;
  std::size_t span_count = 0;
  std::size_t orphan_count = 0;

  nlohmann::json to_json() const;
};

struct StoreOptions {
  std::uint64_t max_segment_bytes = 64ULL << 20;
  Nanos max_segment_span = std::chrono::hours(1);
  bool fsync = true;
  bool read_only = false;
};

class Store {
 public:
  explicit Store(fs::path dir, StoreOptions options = {});
  ~Store();
  Store(const Store&) = delete;
  Store& operator=(const Store&) = delete;

  // Single writer. Records of each signal are committed as one batch; on
  // failure nothing of that batch is visible and Errc::io is thrown.
  std::size_t append(const std::vector<StoredRecord>& records);

  ResultTable query(const QueryRequest& req) const;
  std::vector<TraceSummary> list_traces(UnixNanos start, UnixNanos end) const;

  // Records of one signal in store order.
  std::vector<StoredRecord> records(Signal signal) const;
  std::unordered_set<std::string> record_ids() const;
  std::vector<SegmentInfo> segments() const;
  const fs::path& dir() const { return dir_; }

  // Called before every physical write; throwing simulates an unavailable disk.
  void set_fault_injector(std::function<void()> injector);

 private:
  struct Segment;
  struct SignalState;

  void load();
  void append_signal(Signal signal, const std::vector<const StoredRecord*>& batch);
  SignalState& state(Signal s);
  const SignalState& state(Signal s) const;

  fs::path dir_;
  StoreOptions options_;
  mutable std::shared_mutex mu_;
  std::unique_ptr<SignalState> metrics_;
  std::unique_ptr<SignalState> spans_;
  std::function<void()> fault_injector_;
  std::uint64_t commit_seq_ = 0;
};

}  // namespace scitrace::store
