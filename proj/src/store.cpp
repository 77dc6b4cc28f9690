#include "scitrace/store.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <mutex>
#include <set>
#include <sstream>

#include "scitrace/error.hpp"
#include "scitrace/util.hpp"

namespace scitrace::store {

using nlohmann::json;

std::string_view to_string(Signal s) { return s == Signal::metrics ? "metrics" : "spans"; }

Signal signal_from_string(std::string_view s) {
  if (s == "metrics") return Signal::metrics;
  if (s == "spans" || s == "traces") return Signal::spans;
  throw Error(Errc::invalid_argument, "unknown signal '" + std::string(s) + "'");
}

std::string_view to_string(ColumnType t) {
  switch (t) {
    case ColumnType::int_: return "int";
    case ColumnType::float_: return "float";
    case ColumnType::string_: return "string";
  }
  return "string";
}

UnixNanos StoredRecord::time() const {
  if (const auto* m = std::get_if<MetricSample>(&body)) return m->time_unix_nano;
  return std::get<Span>(body).start_unix_nano;
}

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string canonical_resource(const JobIdentity& job, const TagSet& tags) {
  std::string out = job.hostname + '\x1f' + std::to_string(job.uid) + '\x1f' + std::to_string(job.job_id) + '\x1f' +
                    (job.array_task_id ? std::to_string(*job.array_task_id) : std::string("-"));
  for (const auto& [k, v] : tags) out += '\x1f' + k + '=' + v;
  return out;
}

std::string hash128(const std::string& canonical) {
  char buf[33];
  std::snprintf(buf, sizeof buf, "%016" PRIx64 "%016" PRIx64, fnv1a64(canonical),
                fnv1a64(canonical, 0x84222325cbf29ce4ULL));
  return buf;
}

json resource_json(const std::optional<JobIdentity>& job, const TagSet& tags) {
  json r = json::object();
  if (job) {
    r["host.name"] = job->hostname;
    r["job.uid"] = job->uid;
    r["job.id"] = job->job_id;
    r["job.array_task_id"] = job->array_task_id ? json(*job->array_task_id) : json(nullptr);
  }
  for (const auto& [k, v] : tags) r[k] = v;
  return r;
}

std::pair<std::optional<JobIdentity>, TagSet> resource_from_json(const json& r) {
  std::optional<JobIdentity> job;
  TagSet tags;
  if (r.contains("host.name")) {
    JobIdentity j;
    j.hostname = r.at("host.name").get<std::string>();
    j.uid = r.at("job.uid").get<std::uint64_t>();
    j.job_id = r.at("job.id").get<std::uint64_t>();
    if (r.contains("job.array_task_id") && !r.at("job.array_task_id").is_null()) {
      j.array_task_id = r.at("job.array_task_id").get<std::uint64_t>();
    }
    job = std::move(j);
  }
  for (auto it = r.begin(); it != r.end(); ++it) {
    const auto& k = it.key();
    if (k == "host.name" || k == "job.uid" || k == "job.id" || k == "job.array_task_id") continue;
    tags.set(k, it->get<std::string>());
  }
  return {std::move(job), std::move(tags)};
}

// Attribute lookup shared by filters and tabulation: tags first, then the
// identity fields under their resource attribute names.
std::optional<std::string> attribute_of(const StoredRecord& r, const std::string& key) {
  const TagSet* tags = nullptr;
  const JobIdentity* job = nullptr;
  if (const auto* m = std::get_if<MetricSample>(&r.body)) {
    tags = &m->tags;
    job = &m->job;
  } else {
    const auto& s = std::get<Span>(r.body);
    tags = &s.attributes;
    job = s.job ? &*s.job : nullptr;
  }
  if (auto v = tags->get(key)) return v;
  if (!job) return std::nullopt;
  if (key == "host.name") return job->hostname;
  if (key == "job.id") return std::to_string(job->job_id);
  if (key == "job.uid") return std::to_string(job->uid);
  if (key == "job.array_task_id" && job->array_task_id) return std::to_string(*job->array_task_id);
  return std::nullopt;
}

constexpr std::string_view kCommitKey = "commit";

}  // namespace

std::string record_id(const MetricSample& s) {
  std::string value = std::holds_alternative<std::int64_t>(s.value)
                          ? "i" + std::to_string(std::get<std::int64_t>(s.value))
                          : "d" + format_double(std::get<double>(s.value));
  return "m:" + hash128(canonical_resource(s.job, s.tags) + '\x1e' + s.name + '\x1e' +
                        std::to_string(s.time_unix_nano) + '\x1e' + value);
}

std::string record_id(const Span& s) {
  return "s:" + s.context.trace_id.hex() + ":" + s.context.span_id.hex() + (s.closed() ? "" : ":open");
}

json to_json(const StoredRecord& r) {
  json j{{"id", r.id}, {"recv", r.receive_time}};
  if (const auto* m = std::get_if<MetricSample>(&r.body)) {
    j["signal"] = "metrics";
    j["t"] = m->time_unix_nano;
    j["name"] = m->name;
    j["unit"] = m->unit;
    j["kind"] = std::string(to_wire(m->kind));
    if (const auto* i = std::get_if<std::int64_t>(&m->value)) j["value"] = *i;
    else j["value"] = std::get<double>(m->value);
    j["trace_id"] = m->trace_id ? json(m->trace_id->hex()) : json(nullptr);
    j["resource"] = resource_json(m->job, m->tags);
  } else {
    const auto& s = std::get<Span>(r.body);
    j["signal"] = "spans";
    j["t"] = s.start_unix_nano;
    j["end"] = s.end_unix_nano ? json(*s.end_unix_nano) : json(nullptr);
    j["name"] = s.name;
    j["trace_id"] = s.context.trace_id.hex();
    j["span_id"] = s.context.span_id.hex();
    j["flags"] = s.context.flags;
    j["parent_span_id"] = s.parent_span_id ? json(s.parent_span_id->hex()) : json(nullptr);
    j["kind"] = std::string(to_string(s.kind));
    j["status"] = std::string(to_string(s.status));
    j["resource"] = resource_json(s.job, TagSet{});
    json attrs = json::object();
    for (const auto& [k, v] : s.attributes) attrs[k] = v;
    j["attributes"] = std::move(attrs);
  }
  return j;
}

StoredRecord record_from_json(const json& j) {
  try {
    StoredRecord r;
    r.id = j.at("id").get<std::string>();
    r.receive_time = j.at("recv").get<UnixNanos>();
    const auto signal = j.at("signal").get<std::string>();
    if (signal == "metrics") {
      MetricSample m;
      m.time_unix_nano = j.at("t").get<UnixNanos>();
      m.name = j.at("name").get<std::string>();
      m.unit = j.at("unit").get<std::string>();
      m.kind = metric_kind_from_wire(j.at("kind").get<std::string>());
      const auto& v = j.at("value");
      if (v.is_number_float()) m.value = v.get<double>();
      else m.value = v.get<std::int64_t>();
      if (!j.at("trace_id").is_null()) {
        auto tid = TraceId::from_hex(j.at("trace_id").get<std::string>());
        if (!tid) throw Error(Errc::parse_error, "bad trace_id");
        m.trace_id = tid;
      }
      auto [job, tags] = resource_from_json(j.at("resource"));
      if (!job) throw Error(Errc::parse_error, "metric record without job identity");
      m.job = std::move(*job);
      m.tags = std::move(tags);
      r.body = std::move(m);
    } else if (signal == "spans") {
      Span s;
      s.start_unix_nano = j.at("t").get<UnixNanos>();
      if (!j.at("end").is_null()) s.end_unix_nano = j.at("end").get<UnixNanos>();
      s.name = j.at("name").get<std::string>();
      auto tid = TraceId::from_hex(j.at("trace_id").get<std::string>());
      auto sid = SpanId::from_hex(j.at("span_id").get<std::string>());
      if (!tid || !sid) throw Error(Errc::parse_error, "bad span ids");
      s.context = TraceContext{*tid, *sid, j.value("flags", std::uint8_t{1})};
      if (!j.at("parent_span_id").is_null()) {
        auto pid = SpanId::from_hex(j.at("parent_span_id").get<std::string>());
        if (!pid) throw Error(Errc::parse_error, "bad parent_span_id");
        s.parent_span_id = pid;
      }
      s.kind = span_kind_from_string(j.at("kind").get<std::string>());
      s.status = span_status_from_string(j.at("status").get<std::string>());
      s.job = resource_from_json(j.at("resource")).first;
      for (auto it = j.at("attributes").begin(); it != j.at("attributes").end(); ++it) {
        s.attributes.set(it.key(), it->get<std::string>());
      }
      r.body = std::move(s);
    } else {
      throw Error(Errc::parse_error, "unknown signal '" + signal + "'");
    }
    return r;
  } catch (const Error& e) {
    throw Error(Errc::parse_error, std::string("invalid stored record: ") + e.what());
  } catch (const std::exception& e) {
    throw Error(Errc::parse_error, std::string("invalid stored record: ") + e.what());
  }
}

void validate(const QueryRequest& req) {
  if (req.start_time >= req.end_time) {
    throw Error(Errc::invalid_range, "query start (" + std::to_string(req.start_time) + ") must be before end (" +
                                         std::to_string(req.end_time) + ")");
  }
}

std::vector<Column> fixed_columns(Signal signal) {
  using T = ColumnType;
  if (signal == Signal::metrics) {
    return {{"time_unix_nano", T::int_}, {"name", T::string_},     {"value", T::float_},
            {"job.id", T::int_},         {"job.uid", T::int_},     {"host.name", T::string_},
            {"job.array_task_id", T::int_}, {"unit", T::string_},  {"trace_id", T::string_}};
  }
  return {{"time_unix_nano", T::int_},   {"name", T::string_},         {"duration_ns", T::int_},
          {"job.id", T::int_},           {"job.uid", T::int_},         {"host.name", T::string_},
          {"job.array_task_id", T::int_}, {"end_time_unix_nano", T::int_}, {"trace_id", T::string_},
          {"span_id", T::string_},       {"parent_span_id", T::string_}, {"kind", T::string_},
          {"status", T::string_}};
}

std::optional<std::size_t> ResultTable::column_index(std::string_view name) const {
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (columns[i].name == name) return i;
  }
  return std::nullopt;
}

json ResultTable::to_json() const {
  json cols = json::array();
  for (const auto& c : columns) cols.push_back({{"name", c.name}, {"type", std::string(to_string(c.type))}});
  json rws = json::array();
  for (const auto& row : rows) {
    json r = json::array();
    for (const auto& cell : row) {
      std::visit(
          [&](const auto& v) {
            using V = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<V, std::monostate>) r.push_back(nullptr);
            else r.push_back(v);
          },
          cell);
    }
    rws.push_back(std::move(r));
  }
  return json{{"columns", std::move(cols)}, {"rows", std::move(rws)}};
}

ResultTable ResultTable::from_json(const json& j) {
  ResultTable t;
  for (const auto& c : j.at("columns")) {
    auto type = c.at("type").get<std::string>();
    ColumnType ct = type == "int" ? ColumnType::int_ : type == "float" ? ColumnType::float_ : ColumnType::string_;
    t.columns.push_back({c.at("name").get<std::string>(), ct});
  }
  for (const auto& r : j.at("rows")) {
    std::vector<Cell> row;
    for (std::size_t i = 0; i < r.size(); ++i) {
      const auto& v = r[i];
      if (v.is_null()) row.emplace_back(std::monostate{});
      else if (t.columns.at(i).type == ColumnType::int_) row.emplace_back(v.get<std::int64_t>());
      else if (t.columns.at(i).type == ColumnType::float_) row.emplace_back(v.get<double>());
      else row.emplace_back(v.get<std::string>());
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

namespace {

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += '"';
  return out;
}

}  // namespace

std::string ResultTable::to_csv() const {
  std::string out;
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (i) out += ',';
    out += csv_escape(columns[i].name);
  }
  out += '\n';
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out += ',';
      std::visit(
          [&](const auto& v) {
            using V = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<V, std::int64_t>) out += std::to_string(v);
            else if constexpr (std::is_same_v<V, double>) out += format_double(v);
            else if constexpr (std::is_same_v<V, std::string>) out += csv_escape(v);
          },
          row[i]);
    }
    out += '\n';
  }
  return out;
}

ResultTable tabulate(Signal signal, const std::vector<const StoredRecord*>& records) {
  ResultTable table;
  table.columns = fixed_columns(signal);
  const std::size_t nfixed = table.columns.size();
  std::set<std::string> fixed_names;
  for (const auto& c : table.columns) fixed_names.insert(c.name);

  std::set<std::string> attr_keys;
  for (const auto* r : records) {
    const TagSet& tags = signal == Signal::metrics ? std::get<MetricSample>(r->body).tags
                                                   : std::get<Span>(r->body).attributes;
    for (const auto& [k, _] : tags) attr_keys.insert(k);
  }
  std::vector<std::string> keys(attr_keys.begin(), attr_keys.end());
  for (const auto& k : keys) {
    table.columns.push_back({fixed_names.contains(k) ? "attr." + k : k, ColumnType::string_});
  }

  auto job_cells = [](const std::optional<JobIdentity>& job, std::vector<Cell>& row) {
    if (job) {
      row.emplace_back(static_cast<std::int64_t>(job->job_id));
      row.emplace_back(static_cast<std::int64_t>(job->uid));
      row.emplace_back(job->hostname);
      if (job->array_task_id) row.emplace_back(static_cast<std::int64_t>(*job->array_task_id));
      else row.emplace_back(std::monostate{});
    } else {
      row.insert(row.end(), 4, Cell{});
    }
  };

  table.rows.reserve(records.size());
  for (const auto* r : records) {
    std::vector<Cell> row;
    row.reserve(nfixed + keys.size());
    const TagSet* tags = nullptr;
    if (signal == Signal::metrics) {
      const auto& m = std::get<MetricSample>(r->body);
      row.emplace_back(static_cast<std::int64_t>(m.time_unix_nano));
      row.emplace_back(m.name);
      row.emplace_back(as_double(m.value));
      job_cells(m.job, row);
      row.emplace_back(m.unit);
      row.emplace_back(m.trace_id ? Cell(m.trace_id->hex()) : Cell{});
      tags = &m.tags;
    } else {
      const auto& s = std::get<Span>(r->body);
      row.emplace_back(static_cast<std::int64_t>(s.start_unix_nano));
      row.emplace_back(s.name);
      row.emplace_back(s.end_unix_nano ? Cell(static_cast<std::int64_t>(*s.end_unix_nano - s.start_unix_nano))
                                       : Cell{});
      job_cells(s.job, row);
      row.emplace_back(s.end_unix_nano ? Cell(static_cast<std::int64_t>(*s.end_unix_nano)) : Cell{});
      row.emplace_back(s.context.trace_id.hex());
      row.emplace_back(s.context.span_id.hex());
      row.emplace_back(s.parent_span_id ? Cell(s.parent_span_id->hex()) : Cell{});
      row.emplace_back(std::string(to_string(s.kind)));
      row.emplace_back(std::string(to_string(s.status)));
      tags = &s.attributes;
    }
    for (const auto& k : keys) {
      auto v = tags->get(k);
      row.emplace_back(v ? Cell(*v) : Cell{});
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

bool matches(const StoredRecord& r, const QueryRequest& req) {
  if (r.signal() != req.signal) return false;
  UnixNanos t = r.time();
  if (t < req.start_time || t >= req.end_time) return false;
  if (const auto* m = std::get_if<MetricSample>(&r.body)) {
    if (req.metric_names &&
        std::find(req.metric_names->begin(), req.metric_names->end(), m->name) == req.metric_names->end()) {
      return false;
    }
    if (req.trace_id && (!m->trace_id || m->trace_id->hex() != *req.trace_id)) return false;
  } else {
    const auto& s = std::get<Span>(r.body);
    if (req.metric_names &&
        std::find(req.metric_names->begin(), req.metric_names->end(), s.name) == req.metric_names->end()) {
      return false;
    }
    if (req.trace_id && s.context.trace_id.hex() != *req.trace_id) return false;
  }
  for (const auto& [k, v] : req.attribute_filters) {
    auto actual = attribute_of(r, k);
    if (!actual || *actual != v) return false;
  }
  return true;
}

nlohmann::json TraceSummary::to_json() const {
  return json{{"trace_id", trace_id},       {"root_name", root_name},      {"start", start},
              {"end", end ? json(*end) : json(nullptr)}, {"span_count", span_count}, {"orphan_count", orphan_count}};
}

// ---------------------------------------------------------------------------

struct Store::Segment {
  SegmentInfo info;
  std::vector<StoredRecord> records;
  int fd = -1;
};

struct Store::SignalState {
  Signal signal;
  std::vector<std::unique_ptr<Segment>> segments;
  std::size_t next_index = 1;
};

namespace {

std::optional<std::pair<Signal, std::size_t>> parse_segment_name(const std::string& name) {
  for (Signal s : {Signal::metrics, Signal::spans}) {
    std::string prefix = std::string(to_string(s)) + "-";
    if (name.starts_with(prefix) && name.ends_with(".ndjson")) {
      auto digits = std::string_view(name).substr(prefix.size(), name.size() - prefix.size() - 7);
      if (auto n = parse_u64(digits)) return std::make_pair(s, static_cast<std::size_t>(*n));
    }
  }
  return std::nullopt;
}

std::string segment_name(Signal s, std::size_t index) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s-%06zu.ndjson", std::string(to_string(s)).c_str(), index);
  return buf;
}

bool is_commit_line(const json& j) { return j.is_object() && j.contains(kCommitKey); }

}  // namespace

Store::Store(fs::path dir, StoreOptions options)
    : dir_(std::move(dir)),
      options_(options),
      metrics_(std::make_unique<SignalState>(SignalState{Signal::metrics, {}, 1})),
      spans_(std::make_unique<SignalState>(SignalState{Signal::spans, {}, 1})) {
  std::error_code ec;
  if (options_.read_only) {
    if (!fs::is_directory(dir_, ec)) throw Error(Errc::not_found, "store directory not found: " + dir_.string());
  } else {
    fs::create_directories(dir_, ec);
    if (ec) throw Error(Errc::io, "cannot create store directory " + dir_.string() + ": " + ec.message());
  }
  load();
}

Store::~Store() {
  for (auto* st : {metrics_.get(), spans_.get()}) {
    for (auto& seg : st->segments) {
      if (seg->fd >= 0) ::close(seg->fd);
    }
  }
}

Store::SignalState& Store::state(Signal s) { return s == Signal::metrics ? *metrics_ : *spans_; }
const Store::SignalState& Store::state(Signal s) const { return s == Signal::metrics ? *metrics_ : *spans_; }

void Store::load() {
  std::vector<std::tuple<Signal, std::size_t, fs::path>> files;
  for (const auto& entry : fs::directory_iterator(dir_)) {
    if (!entry.is_regular_file()) continue;
    if (auto parsed = parse_segment_name(entry.path().filename().string())) {
      files.emplace_back(parsed->first, parsed->second, entry.path());
    }
  }
  std::sort(files.begin(), files.end(),
            [](const auto& a, const auto& b) { return std::tie(std::get<0>(a), std::get<1>(a)) <
                                                      std::tie(std::get<0>(b), std::get<1>(b)); });

  for (const auto& [signal, index, path] : files) {
    auto seg = std::make_unique<Segment>();
    seg->info.path = path;
    seg->info.signal = signal;
    std::string content = read_file(path);

    std::vector<StoredRecord> pending;
    std::size_t committed_bytes = 0;
    std::size_t pos = 0;
    while (pos < content.size()) {
      auto nl = content.find('\n', pos);
      if (nl == std::string::npos) break;  // torn trailing line
      auto j = json::parse(content.begin() + static_cast<std::ptrdiff_t>(pos),
                           content.begin() + static_cast<std::ptrdiff_t>(nl), nullptr, false);
      pos = nl + 1;
      if (j.is_discarded()) continue;
      if (is_commit_line(j)) {
        commit_seq_ = std::max(commit_seq_, j[kCommitKey].get<std::uint64_t>() + 1);
        for (auto& r : pending) seg->records.push_back(std::move(r));
        pending.clear();
        committed_bytes = pos;
        continue;
      }
      try {
        pending.push_back(record_from_json(j));
      } catch (const Error&) {
        // unreadable record lines are skipped
      }
    }
    if (committed_bytes < content.size() && !options_.read_only) {
      if (::truncate(path.c_str(), static_cast<off_t>(committed_bytes)) != 0) {
        throw Error(Errc::io, "cannot truncate uncommitted tail of " + path.string());
      }
    }
    seg->info.bytes = committed_bytes;
    seg->info.record_count = seg->records.size();
    if (!seg->records.empty()) {
      auto [lo, hi] = std::minmax_element(seg->records.begin(), seg->records.end(),
                                          [](const auto& a, const auto& b) { return a.time() < b.time(); });
      seg->info.min_time = lo->time();
      seg->info.max_time = hi->time();
    }
    auto& st = state(signal);
    if (!st.segments.empty()) st.segments.back()->info.sealed = true;
    st.next_index = index + 1;
    st.segments.push_back(std::move(seg));
  }
  for (auto* st : {metrics_.get(), spans_.get()}) {
    if (st->segments.empty()) continue;
    auto& info = st->segments.back()->info;
    info.sealed = info.bytes >= options_.max_segment_bytes ||
                  (info.record_count > 0 &&
                   info.max_time - info.min_time >= static_cast<UnixNanos>(options_.max_segment_span.count()));
  }
}

void Store::set_fault_injector(std::function<void()> injector) {
  std::unique_lock lock(mu_);
  fault_injector_ = std::move(injector);
}

std::size_t Store::append(const std::vector<StoredRecord>& records) {
  if (options_.read_only) throw Error(Errc::io, "store opened read-only");
  if (records.empty()) return 0;
  std::vector<const StoredRecord*> metrics, spans;
  for (const auto& r : records) (r.signal() == Signal::metrics ? metrics : spans).push_back(&r);
  std::unique_lock lock(mu_);
  if (!metrics.empty()) append_signal(Signal::metrics, metrics);
  if (!spans.empty()) append_signal(Signal::spans, spans);
  return records.size();
}

void Store::append_signal(Signal signal, const std::vector<const StoredRecord*>& batch) {
  auto& st = state(signal);
  if (st.segments.empty() || st.segments.back()->info.sealed) {
    if (!st.segments.empty() && st.segments.back()->fd >= 0) {
      ::close(st.segments.back()->fd);
      st.segments.back()->fd = -1;
    }
    auto seg = std::make_unique<Segment>();
    seg->info.path = dir_ / segment_name(signal, st.next_index++);
    seg->info.signal = signal;
    st.segments.push_back(std::move(seg));
  }
  Segment& seg = *st.segments.back();

  std::string data;
  for (const auto* r : batch) {
    data += to_json(*r).dump();
    data += '\n';
  }
  data += json{{std::string(kCommitKey), commit_seq_}, {"records", batch.size()}}.dump();
  data += '\n';

  if (fault_injector_) fault_injector_();
  if (seg.fd < 0) {
    seg.fd = ::open(seg.info.path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (seg.fd < 0) throw Error(Errc::io, "cannot open segment " + seg.info.path.string() + ": " + std::strerror(errno));
  }
  const off_t before = static_cast<off_t>(seg.info.bytes);
  const char* p = data.data();
  std::size_t left = data.size();
  auto fail = [&](const char* what) {
    int err = errno;
    if (::ftruncate(seg.fd, before) != 0) {
      // the uncommitted tail is discarded on the next open
    }
    throw Error(Errc::io, std::string(what) + " " + seg.info.path.string() + ": " + std::strerror(err));
  };
  while (left > 0) {
    ssize_t n = ::write(seg.fd, p, left);
    if (n < 0) {
      if (errno == EINTR) continue;
      fail("write failed on");
    }
    p += n;
    left -= static_cast<std::size_t>(n);
  }
  if (options_.fsync && ::fdatasync(seg.fd) != 0) fail("fdatasync failed on");

  ++commit_seq_;
  for (const auto* r : batch) {
    if (seg.info.record_count == 0) {
      seg.info.min_time = seg.info.max_time = r->time();
    } else {
      seg.info.min_time = std::min(seg.info.min_time, r->time());
      seg.info.max_time = std::max(seg.info.max_time, r->time());
    }
    ++seg.info.record_count;
    seg.records.push_back(*r);
  }
  seg.info.bytes += data.size();
  if (seg.info.bytes >= options_.max_segment_bytes ||
      seg.info.max_time - seg.info.min_time >= static_cast<UnixNanos>(options_.max_segment_span.count())) {
    seg.info.sealed = true;
  }
}

ResultTable Store::query(const QueryRequest& req) const {
  validate(req);
  std::shared_lock lock(mu_);
  std::vector<const StoredRecord*> hits;
  for (const auto& seg : state(req.signal).segments) {
    if (seg->info.record_count == 0) continue;
    if (seg->info.max_time < req.start_time || seg->info.min_time >= req.end_time) continue;
    for (const auto& r : seg->records) {
      if (matches(r, req)) hits.push_back(&r);
    }
  }
  std::stable_sort(hits.begin(), hits.end(), [](const auto* a, const auto* b) { return a->time() < b->time(); });
  return tabulate(req.signal, hits);
}

std::vector<TraceSummary> Store::list_traces(UnixNanos start, UnixNanos end) const {
  if (start >= end) throw Error(Errc::invalid_range, "trace listing start must be before end");
  std::shared_lock lock(mu_);
  // trace -> span id -> span (closed versions win)
  std::map<std::string, std::map<std::string, const Span*>> traces;
  for (const auto& seg : spans_->segments) {
    for (const auto& r : seg->records) {
      const auto& s = std::get<Span>(r.body);
      auto& slot = traces[s.context.trace_id.hex()][s.context.span_id.hex()];
      if (!slot || (!slot->closed() && s.closed())) slot = &s;
    }
  }
  std::vector<TraceSummary> out;
  for (const auto& [trace_id, spans] : traces) {
    const Span* root = nullptr;
    std::size_t orphans = 0;
    for (const auto& [_, s] : spans) {
      if (!s->parent_span_id) {
        if (!root || s->start_unix_nano < root->start_unix_nano) root = s;
      } else if (!spans.contains(s->parent_span_id->hex())) {
        ++orphans;
      }
    }
    if (!root || root->start_unix_nano < start || root->start_unix_nano >= end) continue;
    out.push_back(TraceSummary{trace_id, root->name, root->start_unix_nano, root->end_unix_nano, spans.size(), orphans});
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return std::tie(a.start, a.trace_id) < std::tie(b.start, b.trace_id);
  });
  return out;
}

std::vector<StoredRecord> Store::records(Signal signal) const {
  std::shared_lock lock(mu_);
  std::vector<StoredRecord> out;
  for (const auto& seg : state(signal).segments) out.insert(out.end(), seg->records.begin(), seg->records.end());
  return out;
}

std::unordered_set<std::string> Store::record_ids() const {
  std::shared_lock lock(mu_);
  std::unordered_set<std::string> ids;
  for (auto* st : {metrics_.get(), spans_.get()}) {
    for (const auto& seg : st->segments) {
      for (const auto& r : seg->records) ids.insert(r.id);
    }
  }
  return ids;
}

std::vector<SegmentInfo> Store::segments() const {
  std::shared_lock lock(mu_);
  std::vector<SegmentInfo> out;
  for (auto* st : {metrics_.get(), spans_.get()}) {
    for (const auto& seg : st->segments) out.push_back(seg->info);
  }
  return out;
}

}  // namespace scitrace::store
