#include "scitrace/sim.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include "scitrace/agent.hpp"
#include "scitrace/analysis.hpp"
#include "scitrace/cgroup.hpp"
#include "scitrace/collector.hpp"
#include "scitrace/error.hpp"
#include "scitrace/store.hpp"
#include "scitrace/trace.hpp"
#include "scitrace/transport.hpp"
#include "scitrace/util.hpp"

namespace scitrace::sim {

using nlohmann::json;

namespace {

constexpr std::uint64_t kUid = 1000;
constexpr std::uint64_t kJobIdBase = 100000;
constexpr std::uint64_t kPidBase = 10000;
constexpr std::uint64_t kProcsPerJob = 2;
constexpr std::uint64_t kFdsPerProc = 3;
constexpr int kHosts = 8;

double unit_interval(const RandomSource& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double draw(const Range& r, const RandomSource& rng) { return r.low + (r.high - r.low) * unit_interval(rng); }

Nanos seconds(double s) { return Nanos(static_cast<std::int64_t>(std::llround(s * 1e9))); }

// Rounds to the nearest positive multiple of the interval.
Nanos quantize(Nanos d, Nanos step) {
  auto k = std::max<std::int64_t>(1, (d.count() + step.count() / 2) / step.count());
  return step * k;
}

Range range_from_json(const json& j, const std::string& field) {
  if (j.is_array() && j.size() == 2) return {j[0].get<double>(), j[1].get<double>()};
  if (j.is_object()) return {j.at("low").get<double>(), j.at("high").get<double>()};
  throw Error(Errc::invalid_argument, field + " must be [low, high] or {\"low\",\"high\"}");
}

Nanos duration_from_json(const json& j) {
  if (j.is_number()) return seconds(j.get<double>());
  return parse_duration(j.get<std::string>());
}

std::string hex_id(const TraceId& id) { return id.hex(); }

}  // namespace

json ScenarioSpec::to_json() const {
  json outliers = json::array();
  for (const auto& o : planted_outliers) outliers.push_back({o.job_index, o.duration_s});
  json j{{"name", name},
         {"job_count", job_count},
         {"concurrency_cap", concurrency_cap},
         {"duration_dist", {duration_dist.low, duration_dist.high}},
         {"memory_plateau_dist", {memory_plateau_dist.low, memory_plateau_dist.high}},
         {"cpu_cores", cpu_cores},
         {"sample_interval", format_duration(sample_interval)},
         {"planted_outliers", std::move(outliers)},
         {"seed", seed},
         {"cgroup_version", cgroup_version},
         {"start_unix_nano", start_unix_nano},
         {"drop_metric_requests", drop_metric_requests}};
  if (collector_outage) j["collector_outage"] = {{"at_s", collector_outage->at_s}, {"requests", collector_outage->requests}};
  return j;
}

ScenarioSpec ScenarioSpec::from_json(const json& j) {
  if (!j.is_object()) throw Error(Errc::invalid_argument, "scenario spec must be a JSON object");
  ScenarioSpec s;
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto& k = it.key();
      const auto& v = it.value();
      if (k == "name") s.name = v.get<std::string>();
      else if (k == "job_count") s.job_count = v.get<std::size_t>();
      else if (k == "concurrency_cap") s.concurrency_cap = v.get<std::size_t>();
      else if (k == "duration_dist") s.duration_dist = range_from_json(v, k);
      else if (k == "memory_plateau_dist") s.memory_plateau_dist = range_from_json(v, k);
      else if (k == "cpu_cores") s.cpu_cores = v.get<double>();
      else if (k == "sample_interval") s.sample_interval = duration_from_json(v);
      else if (k == "seed") s.seed = v.get<std::uint64_t>();
      else if (k == "cgroup_version") s.cgroup_version = v.get<std::string>();
      else if (k == "start_unix_nano") s.start_unix_nano = v.get<UnixNanos>();
      else if (k == "drop_metric_requests") s.drop_metric_requests = v.get<std::vector<std::size_t>>();
      else if (k == "collector_outage") s.collector_outage = CollectorOutage{v.at("at_s").get<double>(), v.at("requests").get<std::size_t>()};
      else if (k == "planted_outliers") {
        for (const auto& o : v) {
          if (o.is_array() && o.size() == 2) s.planted_outliers.push_back({o[0].get<std::size_t>(), o[1].get<double>()});
          else s.planted_outliers.push_back({o.at("job_index").get<std::size_t>(), o.at("duration").get<double>()});
        }
      } else {
        throw Error(Errc::invalid_argument, "unknown scenario field '" + k + "'");
      }
    }
  } catch (const json::exception& e) {
    throw Error(Errc::invalid_argument, std::string("scenario spec: ") + e.what());
  }
  return s;
}

void validate(const ScenarioSpec& spec) {
  auto fail = [](const std::string& m) { throw Error(Errc::invalid_argument, "invalid scenario: " + m); };
  if (spec.concurrency_cap < 1) fail("concurrency_cap must be at least 1");
  if (spec.duration_dist.low > spec.duration_dist.high) fail("duration_dist low > high");
  if (spec.memory_plateau_dist.low > spec.memory_plateau_dist.high) fail("memory_plateau_dist low > high");
  if (spec.memory_plateau_dist.low < 0) fail("memory_plateau_dist must be non-negative");
  if (spec.cpu_cores < 0) fail("cpu_cores must be non-negative");
  if (spec.sample_interval <= Nanos::zero()) fail("sample_interval must be positive");
  if (spec.cgroup_version != "v1" && spec.cgroup_version != "v2") fail("cgroup_version must be v1 or v2");
  // The plateau is the middle half of a job; it must span three intervals.
  auto check_plateau = [&](double d, const std::string& what) {
    auto q = quantize(seconds(d), spec.sample_interval);
    if (q / 2 < 3 * spec.sample_interval) fail(what + " too short to hold the plateau for 3 sample intervals");
  };
  if (spec.job_count > 0) check_plateau(spec.duration_dist.low, "duration_dist low");
  for (const auto& o : spec.planted_outliers) {
    if (o.job_index >= spec.job_count) fail("planted outlier index " + std::to_string(o.job_index) + " out of range");
    check_plateau(o.duration_s, "planted outlier duration");
  }
}

json GroundTruthLedger::to_json() const {
  json jobs_j = json::array();
  for (const auto& j : jobs) {
    json written = json::array();
    for (const auto& c : j.written) {
      written.push_back({c.time, c.rss, c.cache, c.current, c.cpu_ns, c.pids, c.open_files});
    }
    jobs_j.push_back({{"index", j.index},
                      {"job", scitrace::to_string(j.job)},
                      {"planned_duration_ns", j.planned_duration.count()},
                      {"planned_max_memory", j.planned_max_memory},
                      {"planned_cores", j.planned_cores},
                      {"start", j.start ? json(*j.start) : json(nullptr)},
                      {"end", j.end ? json(*j.end) : json(nullptr)},
                      {"written", std::move(written)},
                      {"job_span_id", j.job_span_id},
                      {"task_span_id", j.task_span_id}});
  }
  return json{{"trace_id", trace_id}, {"root_span_id", root_span_id}, {"jobs", std::move(jobs_j)}};
}

GroundTruthLedger plan(const ScenarioSpec& spec) {
  validate(spec);
  auto rng = seeded_random(spec.seed);
  GroundTruthLedger ledger;
  for (std::size_t i = 0; i < spec.job_count; ++i) {
    LedgerJob j;
    j.index = i;
    j.job.uid = kUid;
    j.job.job_id = kJobIdBase + i;
    j.job.array_task_id = i;
    j.job.hostname = "node" + std::to_string(i % kHosts);
    j.planned_duration = quantize(seconds(draw(spec.duration_dist, rng)), spec.sample_interval);
    j.planned_max_memory = static_cast<std::uint64_t>(std::llround(draw(spec.memory_plateau_dist, rng)));
    j.planned_cores = spec.cpu_cores;
    ledger.jobs.push_back(std::move(j));
  }
  for (const auto& o : spec.planted_outliers) {
    ledger.jobs[o.job_index].planned_duration = quantize(seconds(o.duration_s), spec.sample_interval);
  }
  return ledger;
}

WrittenCounters counters_at(const LedgerJob& job, Nanos elapsed, UnixNanos time) {
  using u128 = unsigned __int128;
  const auto d = static_cast<std::uint64_t>(job.planned_duration.count());
  const auto e = static_cast<std::uint64_t>(std::clamp<std::int64_t>(elapsed.count(), 0, job.planned_duration.count()));
  const std::uint64_t quarter = d / 4;
  const std::uint64_t p = job.planned_max_memory;
  std::uint64_t rss;
  if (quarter == 0) {
    rss = p;
  } else if (e < quarter) {
    rss = static_cast<std::uint64_t>(u128(p) * e / quarter);
  } else if (e <= d - quarter) {
    rss = p;
  } else {
    rss = static_cast<std::uint64_t>(u128(p) * (d - e) / quarter);
  }
  WrittenCounters c;
  c.time = time;
  c.rss = rss;
  c.cache = rss / 8;
  c.current = c.rss + c.cache;
  c.cpu_ns = static_cast<std::uint64_t>(std::llround(job.planned_cores * static_cast<double>(e)));
  c.pids = kProcsPerJob;
  c.open_files = kProcsPerJob * kFdsPerProc;
  return c;
}

namespace {

fs::path cgroup_root(const fs::path& root) { return root / "cgroup"; }
fs::path proc_root(const fs::path& root) { return root / "proc"; }

std::vector<std::uint64_t> job_pids(const LedgerJob& job) {
  std::vector<std::uint64_t> pids;
  for (std::uint64_t k = 0; k < kProcsPerJob; ++k) pids.push_back(kPidBase + 10 * job.index + k);
  return pids;
}

}  // namespace

void write_job_fixture(const ScenarioSpec& spec, const LedgerJob& job, const WrittenCounters& c, const fs::path& root) {
  const fs::path cg = cgroup_root(root);
  std::string procs;
  for (auto pid : job_pids(job)) procs += std::to_string(pid) + "\n";
  if (spec.cgroup_version == "v2") {
    fs::create_directories(cg);
    if (!fs::exists(cg / "cgroup.controllers")) write_file(cg / "cgroup.controllers", "cpu memory pids\n");
    fs::path dir = cgroup::v2_job_dir(cg, job.job.uid, job.job.job_id);
    fs::create_directories(dir);
    write_file(dir / "memory.stat", "anon " + std::to_string(c.rss) + "\nfile " + std::to_string(c.cache) +
                                        "\nkernel_stack 16384\n");
    write_file(dir / "memory.current", std::to_string(c.current) + "\n");
    write_file(dir / "cpu.stat", "usage_usec " + std::to_string(c.cpu_ns / 1000) + "\nuser_usec " +
                                     std::to_string(c.cpu_ns / 1000) + "\nsystem_usec 0\n");
    write_file(dir / "cgroup.procs", procs);
  } else {
    fs::path mem = cgroup::v1_memory_dir(cg, job.job.uid, job.job.job_id);
    fs::path cpu = cgroup::v1_cpu_dir(cg, job.job.uid, job.job.job_id);
    fs::create_directories(mem);
    fs::create_directories(cpu);
    write_file(mem / "memory.stat", "cache " + std::to_string(c.cache) + "\nrss " + std::to_string(c.rss) +
                                        "\ntotal_cache " + std::to_string(c.cache) + "\ntotal_rss " +
                                        std::to_string(c.rss) + "\n");
    write_file(mem / "memory.usage_in_bytes", std::to_string(c.current) + "\n");
    write_file(mem / "cgroup.procs", procs);
    write_file(cpu / "cpuacct.usage", std::to_string(c.cpu_ns) + "\n");
  }
  for (auto pid : job_pids(job)) {
    fs::path fd = proc_root(root) / std::to_string(pid) / "fd";
    if (fs::exists(fd)) continue;
    fs::create_directories(fd);
    for (std::uint64_t k = 0; k < kFdsPerProc; ++k) write_file(fd / std::to_string(k), "");
  }
}

void remove_job_fixture(const ScenarioSpec& spec, const LedgerJob& job, const fs::path& root) {
  const fs::path cg = cgroup_root(root);
  if (spec.cgroup_version == "v2") {
    fs::remove_all(cgroup::v2_job_dir(cg, job.job.uid, job.job.job_id));
  } else {
    fs::remove_all(cgroup::v1_memory_dir(cg, job.job.uid, job.job.job_id));
    fs::remove_all(cgroup::v1_cpu_dir(cg, job.job.uid, job.job.job_id));
  }
  for (auto pid : job_pids(job)) fs::remove_all(proc_root(root) / std::to_string(pid));
}

// The fixture at `t` reflects the counters that will be sampled at `t`.
void generate_fixture_tree(const ScenarioSpec& spec, GroundTruthLedger& ledger, UnixNanos t, const fs::path& root) {
  for (auto& job : ledger.jobs) {
    if (!job.start || t < *job.start) continue;
    const UnixNanos end = *job.start + static_cast<UnixNanos>(job.planned_duration.count());
    if (t >= end) continue;
    auto c = counters_at(job, Nanos(static_cast<std::int64_t>(t - *job.start)), t);
    if (spec.cgroup_version == "v2") c.cpu_ns = c.cpu_ns / 1000 * 1000;
    job.written.push_back(c);
    write_job_fixture(spec, job, c, root);
  }
}

// Scenario driver

namespace {

// Reads simulated time; retry sleeps take real time so they cannot move it.
class AgentClock final : public Clock {
 public:
  explicit AgentClock(const ManualClock& sim) : sim_(sim) {}
  UnixNanos now() const override { return sim_.now(); }
  void sleep_for(Nanos d) const override { std::this_thread::sleep_for(d); }

 private:
  const ManualClock& sim_;
};

class RecordingTransport final : public Transport {
 public:
  RecordingTransport(Transport& inner, bool keep) : inner_(inner), keep_(keep) {}

  HttpResult post(std::string_view path, const std::string& body, std::string_view content_type) override {
    HttpResult r = inner_.post(path, body, content_type);
    if (keep_ && r.status >= 200 && r.status < 300) {
      std::lock_guard lock(mu_);
      payloads_.push_back({std::string(path), body});
    }
    return r;
  }
  std::vector<Payload> take() { return std::move(payloads_); }

 private:
  Transport& inner_;
  bool keep_;
  std::mutex mu_;
  std::vector<Payload> payloads_;
};

bool ulp_equal(double a, double b) {
  return a == b || std::nextafter(a, b) == b;
}

json series_json(const std::vector<double>& v) { return json(v); }

bool series_equal(const std::vector<double>& a, const std::vector<double>& b, bool exact) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (exact ? a[i] != b[i] : !ulp_equal(a[i], b[i])) return false;
  }
  return true;
}

struct DistSummary {
  double min = 0, max = 0;
  std::vector<std::size_t> counts;
};

// Equal-width binning, written independently of the analysis module.
DistSummary summarize(std::vector<double> values, std::size_t bins) {
  DistSummary s;
  if (values.empty()) return s;
  std::sort(values.begin(), values.end());
  s.min = values.front();
  s.max = values.back();
  if (s.min == s.max) {
    s.counts = {values.size()};
    return s;
  }
  s.counts.assign(bins, 0);
  for (double v : values) {
    std::size_t idx = bins - 1;
    for (std::size_t b = 0; b < bins; ++b) {
      double hi = b + 1 == bins ? s.max : s.min + (s.max - s.min) * static_cast<double>(b + 1) / static_cast<double>(bins);
      if (v < hi) {
        idx = b;
        break;
      }
    }
    ++s.counts[idx];
  }
  return s;
}

json dist_json(double min, double max, const std::vector<std::size_t>& counts) {
  return json{{"min", min}, {"max", max}, {"counts", counts}};
}

struct Interval {
  UnixNanos start;
  std::optional<UnixNanos> end;
};

std::vector<double> stab_counts(const std::vector<Interval>& iv, UnixNanos start, std::size_t n, UnixNanos w,
                                UnixNanos query_end) {
  std::vector<double> out(n, 0.0);
  for (std::size_t b = 0; b < n; ++b) {
    const UnixNanos lo = start + b * w, hi = lo + w;
    for (const auto& i : iv) {
      const UnixNanos e = i.end.value_or(std::max(query_end, hi));
      if (i.start < hi && e > lo) out[b] += 1.0;
    }
  }
  return out;
}

using JobSamples = std::map<JobIdentity, std::vector<std::pair<UnixNanos, double>>>;

std::vector<double> carry_forward_sum(const JobSamples& jobs, UnixNanos start, std::size_t n, UnixNanos w,
                                      UnixNanos horizon) {
  std::vector<double> out(n, 0.0);
  for (std::size_t b = 0; b < n; ++b) {
    const UnixNanos be = start + (b + 1) * w;
    double sum = 0;
    for (const auto& [_, samples] : jobs) {
      const std::pair<UnixNanos, double>* last = nullptr;
      for (const auto& s : samples) {
        if (s.first <= be) last = &s;
      }
      if (last && be - last->first <= horizon) sum += last->second;
    }
    out[b] = sum;
  }
  return out;
}

double value_as_double(const MetricValue& v) {
  return std::visit([](auto x) { return static_cast<double>(x); }, v);
}

void add_check(ScenarioReport& r, std::string name, json expected, json actual, bool passed) {
  r.checks.push_back(Check{std::move(name), std::move(expected), std::move(actual), passed});
}

}  // namespace

json ScenarioReport::to_json() const {
  json cs = json::array();
  for (const auto& c : checks) {
    cs.push_back({{"name", c.name}, {"passed", c.passed}, {"expected", c.expected}, {"actual", c.actual}});
  }
  json j{{"spec", spec.to_json()}, {"completed", completed}, {"checks", std::move(cs)}, {"stats", stats}};
  if (!failed_component.empty()) {
    j["failed_component"] = failed_component;
    j["failure"] = failure;
  }
  j["passed"] = oracle_check(*this).passed;
  return j;
}

ScenarioRun run_scenario(const ScenarioSpec& spec, const RunOptions& options) {
  validate(spec);
  ScenarioRun run;
  run.report.spec = spec;
  run.ledger = plan(spec);
  auto& ledger = run.ledger;
  auto& report = run.report;

  const fs::path work = options.work_dir;
  const fs::path fixtures = work / "fixtures";
  const fs::path state_dir = work / "state";
  run.store_dir = work / "store";
  fs::remove_all(fixtures);
  fs::remove_all(state_dir);
  fs::remove_all(run.store_dir);
  fs::create_directories(fixtures / "cgroup");
  fs::create_directories(fixtures / "proc");
  fs::create_directories(state_dir);

  const Nanos dt = spec.sample_interval;
  const auto dtn = static_cast<UnixNanos>(dt.count());
  ManualClock sim(spec.start_unix_nano);
  AgentClock agent_clock(sim);
  auto id_rng = seeded_random(spec.seed ^ 0x5eed5eed5eed5eedULL);
  auto jitter_rng = seeded_random(spec.seed + 1);

  std::string component = "collector";
  std::shared_ptr<store::Store> store;
  std::shared_ptr<collector::Pipeline> pipeline;
  std::unique_ptr<collector::Server> server;
  std::uint64_t total_batches_dropped = 0, total_export_failures = 0, total_attempts = 0, agent_samples = 0;
  std::size_t outage_left = spec.collector_outage ? spec.collector_outage->requests : 0;
  std::size_t outage_served = 0, forced_drops = 0;

  try {
    collector::PipelineConfig cfg;
    cfg.store_dir = run.store_dir;
    cfg.store_options.fsync = false;
    store = std::make_shared<store::Store>(cfg.store_dir, cfg.store_options);
    pipeline = std::make_shared<collector::Pipeline>(cfg, store, sim);
    server = std::make_unique<collector::Server>(pipeline);

    std::mutex fault_mu;
    std::size_t metric_posts = 0;
    const UnixNanos outage_at =
        spec.collector_outage ? spec.start_unix_nano + static_cast<UnixNanos>(seconds(spec.collector_outage->at_s).count()) : 0;
    std::set<std::size_t> drops(spec.drop_metric_requests.begin(), spec.drop_metric_requests.end());
    server->set_pre_handler([&](const std::string& method, const std::string& path) -> std::optional<int> {
      if (method != "POST") return std::nullopt;
      std::lock_guard lock(fault_mu);
      if (spec.collector_outage && sim.now() >= outage_at && outage_left > 0) {
        --outage_left;
        ++outage_served;
        return 503;
      }
      if (path == "/v1/metrics" && drops.contains(++metric_posts)) {
        ++forced_drops;
        return 400;
      }
      return std::nullopt;
    });
    const int port = server->start("127.0.0.1", 0);
    Endpoint endpoint;
    endpoint.port = port;
    auto http = std::make_unique<HttpTransport>(endpoint);
    RecordingTransport transport(*http, options.keep_payloads);

    agent::RetryPolicy retry;
    retry.max_retry = 5;
    retry.backoff_base = std::chrono::milliseconds(1);

    component = "trace";
    trace::SpanStateFile state(state_dir);
    TagSet root_attrs;
    root_attrs.set("pipeline_name", spec.name);
    auto root = trace::span_start(spec.name, SpanKind::pipeline, root_attrs, {}, sim, id_rng, state);
    ledger.trace_id = hex_id(root.span.context.trace_id);
    ledger.root_span_id = root.span.context.span_id.hex();

    auto export_spans = [&] {
      auto spans = state.drain_outbox();
      if (spans.empty()) return;
      auto r = agent::export_batch(agent::Batch(std::move(spans)), transport, retry, agent_clock, jitter_rng);
      total_attempts += static_cast<std::uint64_t>(r.attempts);
      if (r.status != agent::ExportStatus::accepted) {
        ++total_export_failures;
        ++total_batches_dropped;
      }
    };

    struct Active {
      std::size_t index;
      std::unique_ptr<agent::Agent> agent;
      std::string job_handle;
      std::string task_handle;
    };
    std::vector<Active> active;
    std::size_t next = 0;
    std::size_t max_concurrent = 0;
    UnixNanos t = spec.start_unix_nano;

    while (next < ledger.jobs.size() || !active.empty()) {
      sim.set(t);
      // Jobs whose end is now: cgroup disappears, agent notices and flushes.
      for (auto it = active.begin(); it != active.end();) {
        auto& job = ledger.jobs[it->index];
        if (*job.start + static_cast<UnixNanos>(job.planned_duration.count()) != t) {
          ++it;
          continue;
        }
        component = "agent";
        remove_job_fixture(spec, job, fixtures);
        it->agent->step();
        it->agent->finish();
        auto s = it->agent->summary();
        total_batches_dropped += s.batches_dropped;
        total_export_failures += s.export_failures;
        total_attempts += s.export_attempts;
        agent_samples += s.samples;
        component = "trace";
        trace::span_end(state, it->task_handle, SpanStatus::ok, sim);
        trace::span_end(state, it->job_handle, SpanStatus::ok, sim);
        job.end = t;
        export_spans();
        it = active.erase(it);
      }
      // Launch queued jobs up to the cap.
      while (next < ledger.jobs.size() && active.size() < spec.concurrency_cap) {
        auto& job = ledger.jobs[next];
        job.start = t;
        component = "trace";
        TagSet attrs;
        attrs.set("pipeline_name", spec.name);
        attrs.set("case_number", std::to_string(job.index));
        EnvironmentView env{{std::string(trace::kTraceparentEnv), root.envelope.value}};
        trace::SpanStartOptions opts;
        opts.job = job.job;
        auto js = trace::span_start("job " + std::to_string(job.job.job_id), SpanKind::job, attrs, env, sim, id_rng,
                                    state, opts);
        EnvironmentView task_env{{std::string(trace::kTraceparentEnv), js.envelope.value}};
        TagSet task_attrs;
        task_attrs.set("step_name", "simulation");
        auto ts = trace::span_start("simulation", SpanKind::task, task_attrs, task_env, sim, id_rng, state, opts);
        job.job_span_id = js.span.context.span_id.hex();
        job.task_span_id = ts.span.context.span_id.hex();

        component = "agent";
        agent::AgentConfig acfg;
        acfg.sample_interval = dt;
        acfg.export_endpoint = endpoint.url();
        acfg.job = job.job;
        acfg.cgroup_root = fixtures / "cgroup";
        acfg.proc_root = fixtures / "proc";
        acfg.retry = retry;
        acfg.async_export = false;
        acfg.trace_id = js.span.context.trace_id;
        acfg.tags.set("pipeline_name", spec.name);
        acfg.tags.set("pipeline_identifier", ledger.trace_id);
        acfg.tags.set("case_number", std::to_string(job.index));
        acfg.tags.set("step_name", "simulation");
        active.push_back(Active{job.index, std::make_unique<agent::Agent>(acfg, transport, agent_clock, jitter_rng),
                                js.handle, ts.handle});
        ++next;
      }
      max_concurrent = std::max(max_concurrent, active.size());
      // Write counters, then let every agent sample them.
      component = "fixtures";
      generate_fixture_tree(spec, ledger, t, fixtures);
      component = "agent";
      for (auto& a : active) a.agent->step();
      t += dtn;
    }

    component = "trace";
    sim.set(t);
    trace::span_end(state, root.handle, SpanStatus::ok, sim);
    export_spans();

    component = "collector";
    // Close the keep-alive connection so the server need not wait it out.
    http.reset();
    std::size_t unflushed = server->stop();
    report.stats["unflushed_at_shutdown"] = unflushed;
    report.stats["max_concurrent"] = max_concurrent;
    report.stats["end_unix_nano"] = t;
    run.payloads = transport.take();
  } catch (const std::exception& e) {
    report.failed_component = component;
    report.failure = e.what();
    if (server) server->stop();
    return run;
  }

  report.stats["batches_dropped"] = total_batches_dropped;
  report.stats["export_failures"] = total_export_failures;
  report.stats["export_attempts"] = total_attempts;
  report.stats["agent_samples"] = agent_samples;
  report.stats["outage_503_served"] = outage_served;
  report.stats["forced_400_served"] = forced_drops;
  auto pstats = pipeline->stats();
  report.stats["records_written"] = pstats.records_written;
  report.stats["store_failures"] = pstats.store_failures;

  try {
    component = "analysis";
    const UnixNanos q_start = spec.start_unix_nano;
    const UnixNanos q_end = report.stats["end_unix_nano"].get<UnixNanos>() + dtn;
    const std::size_t nb = static_cast<std::size_t>((q_end - q_start + dtn - 1) / dtn);
    const UnixNanos horizon = 2 * dtn;
    const std::string rss{metric_names::kMemoryRss};

    store::QueryRequest mq{store::Signal::metrics, q_start, q_end, std::nullopt, {}, std::nullopt};
    store::QueryRequest sq{store::Signal::spans, q_start, q_end, std::nullopt, {}, std::nullopt};
    auto mtable = store->query(mq);
    auto stable = store->query(sq);
    auto raw_metrics = store->records(store::Signal::metrics);
    auto raw_spans = store->records(store::Signal::spans);

    // Ledger-side truth.
    std::vector<double> ledger_maxima, ledger_durations;
    std::vector<Interval> ledger_iv;
    JobSamples ledger_rss;
    std::size_t ledger_max_conc = 0;
    for (const auto& j : ledger.jobs) {
      std::uint64_t m = 0;
      for (const auto& c : j.written) {
        m = std::max(m, c.rss);
        ledger_rss[j.job].push_back({c.time, static_cast<double>(c.rss)});
      }
      if (!j.written.empty()) ledger_maxima.push_back(static_cast<double>(m));
      ledger_durations.push_back(static_cast<double>(*j.end - *j.start) / 1e9);
      ledger_iv.push_back({*j.start, j.end});
    }
    for (const auto& a : ledger_iv) {
      std::size_t c = 0;
      for (const auto& b : ledger_iv) c += (b.start <= a.start && *b.end > a.start) ? 1 : 0;
      ledger_max_conc = std::max(ledger_max_conc, c);
    }

    // Raw-store truth.
    JobSamples store_rss;
    std::vector<double> util;
    std::set<std::string> stored_keys;
    for (const auto& r : raw_metrics) {
      const auto& m = std::get<MetricSample>(r.body);
      stored_keys.insert(std::to_string(m.job.job_id) + "/" + m.name + "/" + std::to_string(m.time_unix_nano));
      if (m.time_unix_nano < q_start || m.time_unix_nano >= q_end) continue;
      if (m.name == rss) store_rss[m.job].push_back({m.time_unix_nano, value_as_double(m.value)});
      if (m.name == metric_names::kCpuUtilization) util.push_back(value_as_double(m.value));
    }
    for (auto& [_, v] : store_rss) std::stable_sort(v.begin(), v.end(), [](auto& a, auto& b) { return a.first < b.first; });
    std::vector<double> store_maxima;
    for (const auto& [_, v] : store_rss) {
      double m = v.front().second;
      for (const auto& s : v) m = std::max(m, s.second);
      store_maxima.push_back(m);
    }
    std::map<std::string, const Span*> closed_spans;
    for (const auto& r : raw_spans) {
      const auto& s = std::get<Span>(r.body);
      if (s.closed()) closed_spans[s.context.span_id.hex()] = &s;
    }
    std::vector<double> store_durations;
    std::vector<Interval> store_iv;
    for (const auto& [_, s] : closed_spans) {
      if (s->kind != SpanKind::job || s->start_unix_nano >= q_end || s->start_unix_nano < q_start) continue;
      store_durations.push_back(static_cast<double>(*s->end_unix_nano - s->start_unix_nano) / 1e9);
      store_iv.push_back({s->start_unix_nano, s->end_unix_nano});
    }

    // max_per_job_distribution
    auto dist = analysis::max_per_job_distribution(mtable, rss, options.bins);
    json dist_actual = dist_json(dist.min, dist.max, dist.counts);
    for (auto [label, values] : {std::pair{"ledger", &ledger_maxima}, std::pair{"store", &store_maxima}}) {
      auto exp = summarize(*values, options.bins);
      json e = dist_json(exp.min, exp.max, exp.counts);
      add_check(report, std::string("max_per_job_distribution.") + label, e, dist_actual,
                dist.counts == exp.counts && dist.min == exp.min && dist.max == exp.max);
    }
    {
      std::vector<double> planned;
      for (const auto& j : ledger.jobs) planned.push_back(static_cast<double>(j.planned_max_memory));
      std::sort(planned.begin(), planned.end());
      auto sorted = store_maxima;
      std::sort(sorted.begin(), sorted.end());
      add_check(report, "max_per_job.planned_plateaus", planned, sorted, planned == sorted);
    }

    // active_jobs_timeline
    auto act = analysis::active_jobs_timeline(stable, q_start, q_end, dt);
    std::vector<double> act_exp_ledger = ledger.jobs.empty() ? std::vector<double>{} : stab_counts(ledger_iv, q_start, nb, dtn, q_end);
    std::vector<double> act_exp_store = store_iv.empty() ? std::vector<double>{} : stab_counts(store_iv, q_start, nb, dtn, q_end);
    add_check(report, "active_jobs_timeline.ledger", series_json(act_exp_ledger), series_json(act.value),
              series_equal(act_exp_ledger, act.value, true));
    add_check(report, "active_jobs_timeline.store", series_json(act_exp_store), series_json(act.value),
              series_equal(act_exp_store, act.value, true));
    {
      double peak = act.value.empty() ? 0.0 : *std::max_element(act.value.begin(), act.value.end());
      double expected_peak = static_cast<double>(std::min(spec.concurrency_cap, spec.job_count));
      add_check(report, "active_jobs_timeline.max", expected_peak, peak, peak == expected_peak);
      add_check(report, "schedule.concurrency_cap", spec.concurrency_cap, ledger_max_conc,
                ledger_max_conc <= spec.concurrency_cap);
    }

    // job_durations
    auto dur = analysis::job_durations(stable, options.bins);
    json dur_actual = dist_json(dur.min, dur.max, dur.counts);
    dur_actual["open_count"] = dur.open_count;
    for (auto [label, values] : {std::pair{"ledger", &ledger_durations}, std::pair{"store", &store_durations}}) {
      auto exp = summarize(*values, options.bins);
      json e = dist_json(exp.min, exp.max, exp.counts);
      e["open_count"] = 0;
      add_check(report, std::string("job_durations.") + label, e, dur_actual,
                dur.counts == exp.counts && dur.min == exp.min && dur.max == exp.max && dur.open_count == 0);
    }

    // total_usage_over_time on RSS
    auto tot = analysis::total_usage_over_time(mtable, rss, q_start, q_end, dt, Nanos(horizon));
    auto tot_ledger = ledger.jobs.empty() ? std::vector<double>{} : carry_forward_sum(ledger_rss, q_start, nb, dtn, horizon);
    auto tot_store = store_rss.empty() ? std::vector<double>{} : carry_forward_sum(store_rss, q_start, nb, dtn, horizon);
    add_check(report, "total_usage_over_time.ledger", series_json(tot_ledger), series_json(tot.value),
              series_equal(tot_ledger, tot.value, false));
    add_check(report, "total_usage_over_time.store", series_json(tot_store), series_json(tot.value),
              series_equal(tot_store, tot.value, false));

    // per_job_grid shortest-k
    if (!ledger.jobs.empty()) {
      analysis::JobSelector sel;
      sel.k = std::min(options.shortest_k, ledger.jobs.size());
      if (!spec.planted_outliers.empty()) sel.k = spec.planted_outliers.size();
      auto grid = analysis::per_job_grid(mtable, stable, rss, sel);
      std::vector<std::uint64_t> expected_ids, actual_ids;
      if (!spec.planted_outliers.empty()) {
        for (const auto& o : spec.planted_outliers) expected_ids.push_back(ledger.jobs[o.job_index].job.job_id);
      } else {
        std::vector<std::pair<Nanos, std::uint64_t>> order;
        for (const auto& j : ledger.jobs) order.emplace_back(j.planned_duration, j.job.job_id);
        std::sort(order.begin(), order.end());
        for (std::size_t i = 0; i < sel.k; ++i) expected_ids.push_back(order[i].second);
      }
      for (const auto& s : grid.series) actual_ids.push_back(s.job.job_id);
      std::sort(expected_ids.begin(), expected_ids.end());
      std::sort(actual_ids.begin(), actual_ids.end());
      add_check(report, "per_job_grid.shortest_k", expected_ids, actual_ids, expected_ids == actual_ids);
    }

    // Steady-state CPU utilization
    if (!util.empty()) {
      auto [lo, hi] = std::minmax_element(util.begin(), util.end());
      add_check(report, "cpu_utilization.steady_state", json{{"cores", spec.cpu_cores}, {"tolerance", 0.01}},
                json{{"min", *lo}, {"max", *hi}, {"samples", util.size()}},
                *lo >= spec.cpu_cores - 0.01 && *hi <= spec.cpu_cores + 0.01);
    }

    // Conservation: stored identities equal accepted identities.
    component = "store";
    {
      auto accepted = pipeline->accepted_ids();
      auto stored = store->record_ids();
      std::vector<std::string> missing, extra;
      for (const auto& id : accepted) {
        if (!stored.contains(id)) missing.push_back(id);
      }
      for (const auto& id : stored) {
        if (!accepted.contains(id)) extra.push_back(id);
      }
      std::sort(missing.begin(), missing.end());
      std::sort(extra.begin(), extra.end());
      add_check(report, "conservation.accepted_equals_stored", json{{"count", accepted.size()}},
                json{{"count", stored.size()}, {"missing", missing}, {"extra", extra}},
                missing.empty() && extra.empty());
    }

    // Every counter snapshot the ledger wrote must be in the store.
    {
      std::vector<std::string> missing;
      std::size_t expected = 0;
      for (const auto& j : ledger.jobs) {
        for (std::size_t i = 0; i < j.written.size(); ++i) {
          std::vector<std::string_view> names{metric_names::kMemoryRss,  metric_names::kMemoryCache,
                                              metric_names::kMemoryCurrent, metric_names::kCpuTime,
                                              metric_names::kOpenFiles, metric_names::kPids};
          if (i > 0) names.push_back(metric_names::kCpuUtilization);
          for (auto n : names) {
            ++expected;
            std::string key = std::to_string(j.job.job_id) + "/" + std::string(n) + "/" + std::to_string(j.written[i].time);
            if (!stored_keys.contains(key)) missing.push_back(key);
          }
        }
      }
      add_check(report, "ledger_records_stored", json{{"count", expected}},
                json{{"count", expected - missing.size()}, {"missing", missing}}, missing.empty());
    }

    // Trace integrity.
    component = "trace";
    {
      std::size_t roots = 0;
      std::set<std::string> trace_ids, job_ids;
      std::vector<std::string> problems;
      std::string root_id;
      for (const auto& [id, s] : closed_spans) {
        trace_ids.insert(s->context.trace_id.hex());
        if (s->kind == SpanKind::pipeline && !s->parent_span_id) {
          ++roots;
          root_id = id;
        }
        if (s->kind == SpanKind::job) job_ids.insert(id);
      }
      for (const auto& [id, s] : closed_spans) {
        if (s->kind == SpanKind::job && (!s->parent_span_id || s->parent_span_id->hex() != root_id)) {
          problems.push_back("job span " + id + " not parented to the pipeline root");
        }
        if (s->kind == SpanKind::task && (!s->parent_span_id || !job_ids.contains(s->parent_span_id->hex()))) {
          problems.push_back("task span " + id + " not parented to a job span");
        }
      }
      if (roots != 1) problems.push_back(std::to_string(roots) + " pipeline roots");
      if (trace_ids.size() != 1) problems.push_back(std::to_string(trace_ids.size()) + " distinct trace ids");
      if (job_ids.size() != ledger.jobs.size()) {
        problems.push_back(std::to_string(job_ids.size()) + " job spans for " + std::to_string(ledger.jobs.size()) + " jobs");
      }
      add_check(report, "trace_integrity",
                json{{"roots", 1}, {"trace_ids", 1}, {"job_spans", ledger.jobs.size()}, {"task_spans", ledger.jobs.size()}},
                json{{"roots", roots}, {"trace_ids", trace_ids.size()}, {"job_spans", job_ids.size()}, {"problems", problems}},
                problems.empty());
    }
    report.completed = true;
  } catch (const std::exception& e) {
    report.failed_component = component;
    report.failure = e.what();
  }
  return run;
}

OracleResult oracle_check(const ScenarioReport& report) {
  OracleResult r;
  if (!report.failed_component.empty()) {
    r.diffs.push_back("component '" + report.failed_component + "' failed: " + report.failure);
  } else if (!report.completed) {
    r.diffs.push_back("scenario did not complete");
  }
  for (const auto& c : report.checks) {
    if (!c.passed) r.diffs.push_back(c.name + ": expected " + c.expected.dump() + ", actual " + c.actual.dump());
  }
  r.passed = r.diffs.empty();
  return r;
}

}  // namespace scitrace::sim
