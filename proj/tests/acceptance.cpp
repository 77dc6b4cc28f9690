// End-to-end acceptance runner. One line per criterion:
//   PASS|FAIL  <name>  tol=<tolerance>  <elapsed>s/<limit>s  <detail>
// Exit status is non-zero when any criterion fails.

#include <sys/socket.h>
#include <sys/wait.h>
#include <netinet/in.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "oracles.hpp"
#include "scitrace/analysis.hpp"
#include "scitrace/cgroup.hpp"
#include "scitrace/collector.hpp"
#include "scitrace/error.hpp"
#include "scitrace/sim.hpp"
#include "scitrace/store.hpp"
#include "scitrace/trace.hpp"
#include "support.hpp"

using namespace scitrace;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

struct Criterion {
  std::string name;
  std::string tolerance;
  double limit_s;
  std::function<Outcome()> run;
};

Outcome fail(std::string why) { return {false, std::move(why)}; }

const sim::Check* find_check(const sim::ScenarioReport& r, const std::string& name) {
  for (const auto& c : r.checks) {
    if (c.name == name) return &c;
  }
  return nullptr;
}

std::string failing_checks(const sim::ScenarioReport& r) {
  std::string out;
  for (const auto& c : r.checks) {
    if (!c.passed) out += (out.empty() ? "" : ",") + c.name;
  }
  if (!r.completed) out += " incomplete(" + r.failed_component + ": " + r.failure + ")";
  return out;
}

store::Store open_read_only(const fs::path& dir) {
  store::StoreOptions o;
  o.read_only = true;
  return store::Store(dir, o);
}

store::ResultTable query_all(const store::Store& s, store::Signal signal) {
  store::QueryRequest req;
  req.signal = signal;
  req.start_time = 0;
  req.end_time = std::numeric_limits<std::int64_t>::max();
  return s.query(req);
}

// ---- traceparent ----

Outcome traceparent_round_trip() {
  std::mt19937_64 rng(20240611);
  std::size_t failures = 0;
  for (int i = 0; i < 10000; ++i) {
    TraceContext c;
    do {
      for (auto& b : c.trace_id.bytes) b = static_cast<std::uint8_t>(rng());
    } while (c.trace_id.is_zero());
    do {
      for (auto& b : c.span_id.bytes) b = static_cast<std::uint8_t>(rng());
    } while (c.span_id.is_zero());
    c.flags = static_cast<std::uint8_t>(rng());
    try {
      if (trace::parse_traceparent(trace::format_traceparent(c)) != c) ++failures;
    } catch (const Error&) {
      ++failures;
    }
  }
  if (failures) return fail(std::to_string(failures) + " of 10000 random contexts did not round-trip");

  const std::string trace = "0af7651916cd43dd8448eb211c80319c";
  const std::string span = "b7ad6b7169203331";
  const std::string good = "00-" + trace + "-" + span + "-01";
  std::string upper_trace = good;
  upper_trace[5] = 'F';
  std::string upper_span = good;
  upper_span[37] = 'B';
  std::string bad_char_trace = good;
  bad_char_trace[10] = 'g';
  std::string bad_char_span = good;
  bad_char_span[40] = 'z';
  std::string utf8 = good;
  utf8.replace(3, 2, "\xc3\xa9");
  std::string nul = good;
  nul[20] = '\0';
  const std::vector<std::string> corpus = {
      "",
      "00",
      "00-",
      "00-" + trace,
      "00-" + trace + "-" + span,
      "00_" + trace + "-" + span + "-01",
      "00-" + trace + "_" + span + "-01",
      "00-" + trace + "-" + span + "_01",
      upper_trace,
      upper_span,
      "00-" + trace + "-" + span + "-0A",
      "ff-" + trace + "-" + span + "-01",
      "01-" + trace + "-" + span + "-01",
      "0g-" + trace + "-" + span + "-01",
      "00-00000000000000000000000000000000-" + span + "-01",
      "00-" + trace + "-0000000000000000-01",
      "00-" + trace.substr(1) + "-" + span + "-01",
      "00-" + trace + "a-" + span + "-01",
      "00-" + trace + "-" + span.substr(1) + "-01",
      "00-" + trace + "-" + span + "a-01",
      "00-" + trace + "-" + span + "-1",
      "00-" + trace + "-" + span + "-011",
      good + "-00",
      " " + good,
      good + " ",
      good + "\n",
      bad_char_trace,
      bad_char_span,
      std::string(55, '-'),
      "00-" + trace + "--01",
      utf8,
      nul,
  };
  std::size_t rejected = 0;
  std::string escaped;
  for (const auto& s : corpus) {
    try {
      trace::parse_traceparent(s);
      escaped += "[" + s + "] ";
    } catch (const trace::TraceparentError&) {
      ++rejected;
    } catch (const std::exception& e) {
      escaped += "[" + s + "] untyped: " + e.what() + " ";
    }
  }
  if (rejected != corpus.size()) return fail("accepted or mistyped: " + escaped);
  return {true, "10000 round-trips, " + std::to_string(rejected) + "/" + std::to_string(corpus.size()) +
                    " malformed rejected"};
}

// ---- cgroup corpus ----

Outcome cgroup_corpus() {
  testing::TempDir tmp;
  std::mt19937_64 rng(7);
  ManualClock clock(42);
  std::size_t trees = 0, good = 0, malformed = 0;
  std::string problems;

  auto tree_for = [&](const std::string& version, std::size_t n, const sim::WrittenCounters& c) {
    sim::ScenarioSpec spec;
    spec.cgroup_version = version;
    sim::LedgerJob job;
    job.index = n;
    job.job = testing::job(500000 + n, "node0");
    fs::path root = tmp.path / ("tree" + std::to_string(n));
    sim::write_job_fixture(spec, job, c, root);
    ++trees;
    return std::make_pair(root, job);
  };

  const std::uint64_t kMax = std::numeric_limits<std::uint64_t>::max();
  std::vector<sim::WrittenCounters> values;
  values.push_back({});  // all zero
  values.push_back({0, kMax, kMax, kMax, kMax, 0, 0});
  values.push_back({0, kMax / 2, kMax / 2, kMax - 1, (kMax / 1000) * 1000, 0, 0});
  values.push_back({0, 1, 0, 1, 1000, 0, 0});
  for (int i = 0; i < 8; ++i) {
    sim::WrittenCounters c;
    c.rss = rng() >> (rng() % 64);
    c.cache = rng() >> (rng() % 64);
    c.current = rng() >> (rng() % 64);
    c.cpu_ns = (rng() >> (rng() % 64)) / 1000 * 1000;
    values.push_back(c);
  }

  std::size_t n = 0;
  for (const std::string version : {"v1", "v2"}) {
    for (auto c : values) {
      c.pids = 2;
      c.open_files = 6;
      auto [root, job] = tree_for(version, n++, c);
      try {
        auto layout = cgroup::resolve_layout(root / "cgroup", job.job.uid, job.job.job_id);
        auto snap = cgroup::snapshot(layout, root / "proc", clock);
        std::uint64_t want_cpu = version == "v2" ? c.cpu_ns / 1000 * 1000 : c.cpu_ns;
        CgroupSnapshot want{42, c.rss, c.cache, c.current, want_cpu, c.pids, c.open_files};
        if (snap == want) ++good;
        else problems += version + " tree " + std::to_string(n - 1) + " mismatch; ";
      } catch (const std::exception& e) {
        problems += version + " tree " + std::to_string(n - 1) + " threw " + e.what() + "; ";
      }
    }
  }

  struct Corruption {
    std::string version;
    std::string file;
    std::string content;
  };
  const std::vector<Corruption> corruptions = {
      {"v1", "memory.usage_in_bytes", "abc\n"},
      {"v1", "memory.usage_in_bytes", "-5\n"},
      {"v1", "memory.usage_in_bytes", "18446744073709551616\n"},
      {"v1", "memory.usage_in_bytes", ""},
      {"v1", "memory.usage_in_bytes", "12 34\n"},
      {"v1", "cpuacct.usage", "0x10\n"},
      {"v1", "cpuacct.usage", "1.5\n"},
      {"v1", "cpuacct.usage", std::string("\xff\xfe\x00\x01", 4)},
      {"v1", "memory.stat", "rss\n"},
      {"v1", "memory.stat", "rss 12 13\ncache 1\n"},
      {"v1", "memory.stat", "rss -1\ncache 1\n"},
      {"v1", "memory.stat", "mapped_file 3\ncache 1\n"},
      {"v1", "memory.stat", "rss 99999999999999999999\ncache 1\n"},
      {"v1", "cgroup.procs", "abc\n"},
      {"v1", "cgroup.procs", "0\n"},
      {"v2", "memory.current", "nan\n"},
      {"v2", "memory.current", "1e9\n"},
      {"v2", "cpu.stat", "usage_usec 18446744073709551615\n"},
      {"v2", "cpu.stat", "user_usec 5\n"},
      {"v2", "cpu.stat", "usage_usec\n"},
      {"v2", "memory.stat", "anon\nfile 1\n"},
      {"v2", "memory.stat", "anon 1\n"},
      {"v2", "memory.stat", "anon 5 kB\nfile 1\n"},
      {"v2", "cgroup.procs", "-1\n"},
      {"v2", "cgroup.procs", "99999999999\n"},
  };
  for (const auto& k : corruptions) {
    sim::WrittenCounters c{0, 10, 2, 12, 5000, 2, 6};
    auto [root, job] = tree_for(k.version, n++, c);
    auto layout = cgroup::resolve_layout(root / "cgroup", job.job.uid, job.job.job_id);
    fs::path target = (k.file == "cpuacct.usage" ? layout.cpu_path : layout.memory_path) / k.file;
    if (k.file == "cgroup.procs") target = layout.procs_file;
    if (!fs::exists(target)) {
      problems += "corruption target missing " + target.string() + "; ";
      continue;
    }
    write_file(target, k.content);
    try {
      cgroup::snapshot(layout, root / "proc", clock);
      problems += k.version + "/" + k.file + " accepted malformed content; ";
    } catch (const Error& e) {
      if (e.code() == Errc::parse_error) ++malformed;
      else problems += k.version + "/" + k.file + " wrong error code: " + e.what() + "; ";
    } catch (const std::exception& e) {
      problems += k.version + "/" + k.file + " untyped error: " + e.what() + "; ";
    }
  }
  if (trees < 40) problems += "only " + std::to_string(trees) + " trees; ";
  if (!problems.empty()) return fail(problems);
  return {true, std::to_string(trees) + " trees: " + std::to_string(good) + " exact, " + std::to_string(malformed) +
                    " malformed rejected with parse_error"};
}

// ---- fleet scenarios ----

Outcome bone_strength() {
  sim::ScenarioSpec spec;
  spec.name = "bone-strength";
  spec.job_count = 30;
  spec.concurrency_cap = 25;
  spec.duration_dist = {16, 20};
  spec.memory_plateau_dist = {7.1e9, 8.4e9};
  spec.cpu_cores = 4.0;
  spec.sample_interval = std::chrono::milliseconds(500);
  spec.seed = 1101;
  testing::TempDir tmp;
  auto run = sim::run_scenario(spec, sim::RunOptions{tmp.path, false, 5, 20});
  std::string bad;
  for (const char* name : {"max_per_job_distribution.ledger", "max_per_job_distribution.store",
                           "active_jobs_timeline.max", "cpu_utilization.steady_state"}) {
    auto* c = find_check(run.report, name);
    if (!c || !c->passed) bad += std::string(name) + " ";
  }
  if (!run.report.completed) bad += "incomplete ";

  auto st = open_read_only(run.store_dir);
  auto metrics = query_all(st, store::Signal::metrics);
  auto spans = query_all(st, store::Signal::spans);

  // (a) maxima equal the planned plateaus exactly.
  auto dist = analysis::max_per_job_distribution(metrics, "job.memory.rss");
  std::vector<double> planned;
  for (const auto& j : run.ledger.jobs) planned.push_back(static_cast<double>(j.planned_max_memory));
  std::sort(planned.begin(), planned.end());
  auto maxima = oracle::per_job_maxima(oracle::committed_records(run.store_dir, "metrics"), "job.memory.rss");
  if (maxima != planned) bad += "maxima!=plateaus ";
  if (dist.min != planned.front() || dist.max != planned.back()) bad += "distribution bounds ";
  if (dist.min < 7.1e9 || dist.max > 8.4e9) bad += "bounds outside band ";

  // (b) peak concurrency.
  auto active = analysis::active_jobs_timeline(spans, spec.start_unix_nano,
                                               run.report.stats["end_unix_nano"].get<UnixNanos>(),
                                               spec.sample_interval);
  double peak = active.empty() ? 0 : *std::max_element(active.value.begin(), active.value.end());
  if (peak != 25.0) bad += "active max " + std::to_string(peak) + " ";

  // (c) utilization samples.
  auto name_col = *metrics.column_index("name");
  auto value_col = *metrics.column_index("value");
  std::size_t util = 0;
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& row : metrics.rows) {
    if (std::get<std::string>(row[name_col]) != "job.cpu.utilization") continue;
    double v = std::get<double>(row[value_col]);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
    ++util;
  }
  if (util == 0 || lo < 3.99 || hi > 4.01) bad += "utilization outside 4.0+-0.01 ";

  std::ostringstream d;
  d.precision(4);
  d << "maxima [" << dist.min / 1e9 << ", " << dist.max / 1e9 << "] GB, active max " << peak << ", utilization ["
    << lo << ", " << hi << "] over " << util << " samples";
  if (!bad.empty()) return fail(bad + "| " + d.str() + " | " + failing_checks(run.report));
  return {true, d.str()};
}

Outcome angio_support() {
  sim::ScenarioSpec spec;
  spec.name = "angio-support";
  spec.job_count = 40;
  spec.concurrency_cap = 20;
  spec.duration_dist = {16, 20};
  spec.memory_plateau_dist = {5.5e9, 5.9e9};
  spec.seed = 2202;
  testing::TempDir tmp;
  auto run = sim::run_scenario(spec, sim::RunOptions{tmp.path, false, 5, 20});
  auto st = open_read_only(run.store_dir);
  auto metrics = query_all(st, store::Signal::metrics);
  auto spans = query_all(st, store::Signal::spans);
  auto mem = analysis::max_per_job_distribution(metrics, "job.memory.rss");
  auto dur = analysis::job_durations(spans);

  auto [durations, open] = oracle::durations(oracle::committed_records(run.store_dir, "spans"));
  std::size_t inside = 0;
  for (double v : durations) inside += (v >= 16.0 && v <= 20.0) ? 1 : 0;
  double mass = durations.empty() ? 0 : static_cast<double>(inside) / static_cast<double>(durations.size());

  std::string bad;
  if (mem.empty() || mem.min < 5.5e9 || mem.max > 5.9e9) bad += "memory bounds outside band ";
  if (dur.total() != spec.job_count || durations.size() != spec.job_count || open != 0) bad += "job count ";
  if (mass < 0.95) bad += "duration mass ";
  if (!sim::oracle_check(run.report).passed) bad += "checks:" + failing_checks(run.report) + " ";

  std::ostringstream d;
  d.precision(4);
  d << "maxima [" << mem.min / 1e9 << ", " << mem.max / 1e9 << "] GB, durations [" << dur.min << ", " << dur.max
    << "] s, in-band mass " << mass;
  if (!bad.empty()) return fail(bad + "| " + d.str());
  return {true, d.str()};
}

Outcome outlier_detection() {
  sim::ScenarioSpec spec;
  spec.name = "outliers";
  spec.job_count = 100;
  spec.concurrency_cap = 25;
  spec.duration_dist = {16, 20};
  spec.memory_plateau_dist = {5.5e9, 5.9e9};
  spec.sample_interval = std::chrono::milliseconds(250);
  spec.seed = 3303;
  std::set<std::uint64_t> planted;
  std::mt19937_64 rng(spec.seed);
  while (planted.size() < 5) planted.insert(rng() % spec.job_count);
  for (auto i : planted) spec.planted_outliers.push_back({i, 2.0});

  testing::TempDir tmp;
  auto run = sim::run_scenario(spec, sim::RunOptions{tmp.path, false, 5, 20});
  std::set<std::uint64_t> want;
  for (auto i : planted) want.insert(run.ledger.jobs[i].job.job_id);

  auto st = open_read_only(run.store_dir);
  auto grid = analysis::per_job_grid(query_all(st, store::Signal::metrics), query_all(st, store::Signal::spans),
                                     "job.memory.rss", analysis::JobSelector{});
  std::set<std::uint64_t> got;
  for (const auto& s : grid.series) got.insert(s.job.job_id);

  auto ids = [](const std::set<std::uint64_t>& s) {
    std::string out;
    for (auto v : s) out += (out.empty() ? "" : ",") + std::to_string(v);
    return out;
  };
  std::string d = "planted {" + ids(want) + "}, shortest-5 {" + ids(got) + "}";
  if (got != want || grid.series.size() != 5) return fail(d);
  return {true, d};
}

// ---- pipeline properties ----

sim::ScenarioSpec random_spec(std::mt19937_64& rng, std::size_t i) {
  std::uniform_real_distribution<double> u(0, 1);
  for (;;) {
    sim::ScenarioSpec s;
    s.name = "random-" + std::to_string(i);
    s.seed = rng();
    s.job_count = 1 + rng() % 14;
    s.concurrency_cap = 1 + rng() % 6;
    s.sample_interval = (rng() % 2) ? std::chrono::milliseconds(250) : std::chrono::milliseconds(500);
    double low = 3 + 4 * u(rng);
    s.duration_dist = {low, low + 3 * u(rng)};
    double mem = 1e8 + 9e9 * u(rng);
    s.memory_plateau_dist = {mem, mem * (1 + u(rng))};
    s.cpu_cores = 1 + static_cast<double>(rng() % 8);
    s.cgroup_version = (rng() % 2) ? "v2" : "v1";
    try {
      sim::validate(s);
      return s;
    } catch (const Error&) {
    }
  }
}

std::set<std::string> stored_ids(const fs::path& dir) {
  std::set<std::string> out;
  for (const char* sig : {"metrics", "spans"}) {
    for (const auto& r : oracle::committed_records(dir, sig)) out.insert(r["id"].get<std::string>());
  }
  return out;
}

std::size_t stored_lines(const fs::path& dir) {
  return oracle::committed_records(dir, "metrics").size() + oracle::committed_records(dir, "spans").size();
}

Outcome conservation() {
  std::mt19937_64 rng(4404);
  std::size_t payloads = 0, replay_dupes = 0, records = 0;
  std::string bad;
  for (std::size_t i = 0; i < 10; ++i) {
    auto spec = random_spec(rng, i);
    testing::TempDir tmp;
    auto run = sim::run_scenario(spec, sim::RunOptions{tmp.path, true, 5, 20});
    auto* c = find_check(run.report, "conservation.accepted_equals_stored");
    if (!c || !c->passed || !run.report.completed) {
      bad += spec.name + ": conservation " + failing_checks(run.report) + "; ";
      continue;
    }
    auto before = stored_ids(run.store_dir);
    auto lines_before = stored_lines(run.store_dir);
    if (before.size() != lines_before || before.size() != c->expected["count"].get<std::size_t>()) {
      bad += spec.name + ": stored ids not distinct or count differs; ";
    }

    {
      collector::PipelineConfig cfg;
      cfg.store_dir = run.store_dir;
      cfg.batch.max_records = 64;
      SystemClock clock;
      auto st = std::make_shared<store::Store>(run.store_dir);
      collector::Pipeline pipeline(cfg, st, clock);
      for (const auto& p : run.payloads) {
        auto signal = p.path == "/v1/traces" ? store::Signal::spans : store::Signal::metrics;
        auto res = pipeline.ingest(p.body, signal);
        replay_dupes += res.duplicates;
        if (res.accepted != 0) bad += spec.name + ": replay accepted " + std::to_string(res.accepted) + "; ";
      }
      pipeline.shutdown();
    }
    auto after = stored_ids(run.store_dir);
    if (after != before || stored_lines(run.store_dir) != lines_before) {
      bad += spec.name + ": replay changed the store (" + std::to_string(before.size()) + " -> " +
             std::to_string(after.size()) + "); ";
    }
    payloads += run.payloads.size();
    records += before.size();
  }
  std::string d = "10 scenarios, " + std::to_string(records) + " records, " + std::to_string(payloads) +
                  " payloads replayed, " + std::to_string(replay_dupes) + " duplicates absorbed";
  if (!bad.empty()) return fail(bad + "| " + d);
  return {true, d};
}

Outcome query_oracle() {
  sim::ScenarioSpec spec;
  spec.name = "query-oracle";
  spec.job_count = 12;
  spec.concurrency_cap = 4;
  spec.duration_dist = {4, 7};
  spec.memory_plateau_dist = {1e9, 3e9};
  spec.seed = 5505;
  testing::TempDir tmp;
  auto run = sim::run_scenario(spec, sim::RunOptions{tmp.path, false, 5, 20});
  if (!run.report.completed) return fail("scenario incomplete: " + run.report.failure);

  auto st = open_read_only(run.store_dir);
  std::map<std::string, std::vector<json>> raw{{"metrics", oracle::committed_records(run.store_dir, "metrics")},
                                               {"spans", oracle::committed_records(run.store_dir, "spans")}};
  std::map<std::string, std::vector<std::string>> names;
  std::uint64_t tmin = std::numeric_limits<std::uint64_t>::max(), tmax = 0;
  for (auto& [sig, recs] : raw) {
    std::set<std::string> distinct;
    for (const auto& r : recs) {
      distinct.insert(r["name"].get<std::string>());
      tmin = std::min(tmin, r["t"].get<std::uint64_t>());
      tmax = std::max(tmax, r["t"].get<std::uint64_t>());
    }
    names[sig].assign(distinct.begin(), distinct.end());
    names[sig].push_back("no.such.name");
  }
  const std::vector<std::string> keys = {"job.id", "host.name", "case_number", "step_name", "pipeline_name",
                                         "job.uid"};

  std::mt19937_64 rng(5506);
  std::size_t diffs = 0, nonempty = 0, rows = 0;
  std::string first;
  for (int q = 0; q < 500; ++q) {
    store::QueryRequest req;
    std::string sig = (rng() % 3 == 0) ? "spans" : "metrics";
    req.signal = sig == "spans" ? store::Signal::spans : store::Signal::metrics;
    const auto& recs = raw[sig];
    auto pick_time = [&]() -> std::uint64_t {
      if (!recs.empty() && rng() % 2) return recs[rng() % recs.size()]["t"].get<std::uint64_t>();
      return tmin - kNanosPerSecond + rng() % (tmax - tmin + 2 * kNanosPerSecond);
    };
    std::uint64_t a = pick_time(), b = pick_time();
    if (a == b) b = a + 1 + rng() % kNanosPerSecond;
    req.start_time = std::min(a, b);
    req.end_time = std::max(a, b);
    if (rng() % 5 == 0) {
      req.start_time = 0;
      req.end_time = tmax + 1;
    }
    if (rng() % 2) {
      std::vector<std::string> chosen;
      std::size_t k = 1 + rng() % 3;
      for (std::size_t i = 0; i < k; ++i) chosen.push_back(names[sig][rng() % names[sig].size()]);
      req.metric_names = chosen;
    }
    std::size_t nattrs = rng() % 3;
    for (std::size_t i = 0; i < nattrs && !recs.empty(); ++i) {
      const auto& key = keys[rng() % keys.size()];
      const auto& src = recs[rng() % recs.size()];
      std::string value = "absent";
      if (src.contains("attributes") && src["attributes"].contains(key)) value = oracle::attr_string(src["attributes"][key]);
      else if (src["resource"].contains(key)) value = oracle::attr_string(src["resource"][key]);
      req.attribute_filters[key] = value;
    }
    if (rng() % 6 == 0) req.trace_id = (rng() % 2) ? run.ledger.trace_id : std::string(32, 'a');

    auto got = st.query(req);
    auto want = oracle::query(recs, req);
    auto diff = oracle::compare(got, want, sig == "metrics");
    rows += got.rows.size();
    nonempty += got.rows.empty() ? 0 : 1;
    if (!diff.empty()) {
      ++diffs;
      if (first.empty()) first = "query " + std::to_string(q) + ": " + diff;
    }
  }
  std::string d = "500 queries, " + std::to_string(nonempty) + " non-empty, " + std::to_string(rows) + " rows, " +
                  std::to_string(diffs) + " diffs";
  if (diffs) return fail(d + "; " + first);
  return {true, d};
}

Outcome aggregation_oracle() {
  std::mt19937_64 rng(6606);
  std::string bad;
  std::size_t buckets = 0, jobs = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    auto spec = random_spec(rng, i);
    testing::TempDir tmp;
    auto run = sim::run_scenario(spec, sim::RunOptions{tmp.path, false, 5, 20});
    if (!run.report.completed) {
      bad += spec.name + " incomplete; ";
      continue;
    }
    auto st = open_read_only(run.store_dir);
    auto metrics = query_all(st, store::Signal::metrics);
    auto spans = query_all(st, store::Signal::spans);
    auto raw_m = oracle::committed_records(run.store_dir, "metrics");
    auto raw_s = oracle::committed_records(run.store_dir, "spans");
    const UnixNanos start = spec.start_unix_nano;
    const UnixNanos end = run.report.stats["end_unix_nano"].get<UnixNanos>();
    const std::vector<Nanos> widths = {spec.sample_interval, 3 * spec.sample_interval, Nanos(1'700'000'000)};
    const Nanos width = widths[rng() % widths.size()];
    const Nanos horizon = 2 * spec.sample_interval;
    const std::string tag = spec.name + ": ";

    auto usage = analysis::total_usage_over_time(metrics, "job.memory.rss", start, end, width, horizon);
    auto usage_want = oracle::total_usage(raw_m, "job.memory.rss", start, end, width.count(), horizon.count());
    if (usage.value.size() != usage_want.size()) {
      bad += tag + "usage bucket count; ";
    } else {
      for (std::size_t b = 0; b < usage_want.size(); ++b) {
        if (!oracle::ulp_equal(usage.value[b], usage_want[b]) ||
            usage.bucket_start[b] != start + b * static_cast<UnixNanos>(width.count())) {
          bad += tag + "usage bucket " + std::to_string(b) + "; ";
          break;
        }
      }
    }
    buckets += usage_want.size();

    auto active = analysis::active_jobs_timeline(spans, start, end, width);
    if (active.value != oracle::active_jobs(raw_s, start, end, width.count())) bad += tag + "active jobs; ";

    auto check_hist = [&](const analysis::Distribution& got, const std::vector<double>& values, const std::string& what) {
      if (values.empty()) {
        if (!got.empty()) bad += tag + what + " should be empty; ";
        return;
      }
      double lo = values.front(), hi = values.back();
      double sum = 0;
      for (double v : values) sum += v;
      if (got.min != lo || got.max != hi) bad += tag + what + " bounds; ";
      if (got.total() != values.size()) bad += tag + what + " total; ";
      if (!oracle::ulp_equal(got.mean, sum / static_cast<double>(values.size()))) bad += tag + what + " mean; ";
      if (got.bin_edges.size() != got.counts.size() + 1) {
        bad += tag + what + " edges; ";
        return;
      }
      if (lo == hi) {
        if (got.bin_edges.front() != lo - 0.5 || got.bin_edges.back() != hi + 0.5) bad += tag + what + " degenerate edges; ";
      } else if (got.bin_edges.front() != lo || got.bin_edges.back() != hi) {
        bad += tag + what + " outer edges; ";
      }
      if (oracle::bin_counts(values, got.bin_edges) != got.counts) bad += tag + what + " counts; ";
    };
    std::size_t bins = 1 + rng() % 25;
    auto [durations, open] = oracle::durations(raw_s);
    auto dur = analysis::job_durations(spans, bins);
    check_hist(dur, durations, "durations");
    if (dur.open_count != open) bad += tag + "open count; ";
    auto maxima = oracle::per_job_maxima(raw_m, "job.memory.rss");
    check_hist(analysis::max_per_job_distribution(metrics, "job.memory.rss", bins), maxima, "maxima");
    jobs += maxima.size();
  }
  std::string d = "20 scenarios, " + std::to_string(jobs) + " jobs, " + std::to_string(buckets) + " usage buckets";
  if (!bad.empty()) return fail(bad + "| " + d);
  return {true, d};
}

int closed_port() {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = 0;
  ::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr));
  socklen_t len = sizeof(addr);
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  int port = ntohs(addr.sin_port);
  ::close(fd);
  return port;
}

Outcome agent_non_interference() {
  std::string bad;
  std::ostringstream d;

  // Collector absent for the whole run.
  {
    testing::TempDir tmp;
    sim::ScenarioSpec spec;
    spec.job_count = 1;
    spec.duration_dist = {4, 4};
    auto ledger = sim::plan(spec);
    auto& job = ledger.jobs[0];
    sim::write_job_fixture(spec, job, sim::counters_at(job, std::chrono::seconds(1), 0), tmp.path);
    std::string cmd = std::string("env -u TRACEPARENT '") + SCITRACE_CLI_PATH + "' agent run --job-id " +
                      std::to_string(job.job.job_id) + " --uid " + std::to_string(job.job.uid) +
                      " --hostname " + job.job.hostname + " --cgroup-root '" + (tmp.path / "cgroup").string() +
                      "' --proc-root '" + (tmp.path / "proc").string() + "' --interval 100ms --endpoint http://127.0.0.1:" +
                      std::to_string(closed_port()) + " --max-retry 2 --backoff 10ms --batch-max 8 2>/dev/null";
    auto t0 = std::chrono::steady_clock::now();
    FILE* p = ::popen(cmd.c_str(), "r");
    if (!p) return fail("popen failed");
    std::this_thread::sleep_for(std::chrono::milliseconds(1000));
    sim::remove_job_fixture(spec, job, tmp.path);
    std::string out;
    char buf[4096];
    while (std::fgets(buf, sizeof buf, p)) out += buf;
    int status = ::pclose(p);
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    bool exited0 = WIFEXITED(status) && WEXITSTATUS(status) == 0;
    auto summary = json::parse(out, nullptr, false);
    if (!exited0) bad += "agent exit status " + std::to_string(status) + "; ";
    if (summary.is_discarded()) {
      bad += "no summary: " + out + "; ";
    } else {
      auto samples = summary["samples"].get<std::size_t>();
      if (summary["batches_sent"] != 0) bad += "batches were sent; ";
      if (samples == 0 || summary["records_dropped"].get<std::size_t>() != samples) bad += "not all dropped; ";
      if (summary["rounds"].get<std::size_t>() < 5) bad += "sampling stalled; ";
      d << "down: exit 0 after " << secs << " s, " << summary["rounds"] << " rounds, " << samples << " samples, "
        << summary["batches_dropped"] << " batches dropped; ";
    }
  }

  // Two 503s mid-run.
  {
    testing::TempDir tmp;
    sim::ScenarioSpec spec;
    spec.name = "transient";
    spec.job_count = 8;
    spec.concurrency_cap = 4;
    spec.duration_dist = {4, 6};
    spec.memory_plateau_dist = {1e9, 2e9};
    spec.seed = 7707;
    spec.collector_outage = sim::CollectorOutage{1.0, 2};
    auto run = sim::run_scenario(spec, sim::RunOptions{tmp.path, false, 5, 20});
    auto* stored = find_check(run.report, "ledger_records_stored");
    if (!stored || !stored->passed) bad += "records lost in transient; ";
    if (run.report.stats["outage_503_served"] != 2) bad += "outage not served; ";
    if (run.report.stats["batches_dropped"] != 0) bad += "batches dropped in transient; ";
    if (!sim::oracle_check(run.report).passed) bad += "checks:" + failing_checks(run.report) + "; ";
    d << "transient: 503s " << run.report.stats["outage_503_served"] << ", dropped "
      << run.report.stats["batches_dropped"] << ", ledger records "
      << (stored ? stored->actual["count"].dump() : "?") << " stored";
  }
  if (!bad.empty()) return fail(bad + "| " + d.str());
  return {true, d.str()};
}

Outcome trace_integrity() {
  std::mt19937_64 rng(8808);
  std::string bad;
  std::size_t spans_seen = 0;
  for (std::size_t i = 0; i < 6; ++i) {
    auto spec = random_spec(rng, i);
    testing::TempDir tmp;
    auto run = sim::run_scenario(spec, sim::RunOptions{tmp.path, false, 5, 20});
    const std::string tag = spec.name + ": ";
    auto* c = find_check(run.report, "trace_integrity");
    if (!c || !c->passed) bad += tag + "report check; ";

    struct Node {
      std::string kind, parent, name;
      bool closed = false;
    };
    std::map<std::string, Node> nodes;
    std::set<std::string> traces;
    for (const auto& r : oracle::committed_records(run.store_dir, "spans")) {
      traces.insert(r["trace_id"].get<std::string>());
      auto& n = nodes[r["span_id"].get<std::string>()];
      n.kind = r["kind"].get<std::string>();
      n.name = r["name"].get<std::string>();
      n.parent = r["parent_span_id"].is_null() ? "" : r["parent_span_id"].get<std::string>();
      n.closed = n.closed || !r["end"].is_null();
    }
    spans_seen += nodes.size();
    if (traces.size() != 1 || *traces.begin() != run.ledger.trace_id) bad += tag + "trace ids; ";
    std::vector<std::string> roots;
    for (const auto& [id, n] : nodes) {
      if (n.parent.empty()) roots.push_back(id);
    }
    if (roots.size() != 1 || nodes[roots[0]].kind != "pipeline" || roots[0] != run.ledger.root_span_id) {
      bad += tag + "roots; ";
      continue;
    }
    std::size_t job_spans = 0, task_spans = 0;
    for (const auto& [id, n] : nodes) {
      if (n.kind == "job") {
        ++job_spans;
        if (n.parent != roots[0]) bad += tag + "job span " + id + " not under the root; ";
      } else if (n.kind == "task") {
        ++task_spans;
        auto it = nodes.find(n.parent);
        if (it == nodes.end() || it->second.kind != "job") bad += tag + "task span " + id + " not under a job; ";
      } else if (id != roots[0]) {
        bad += tag + "unexpected span kind " + n.kind + "; ";
      }
      if (!n.closed) bad += tag + "span " + id + " never closed; ";
    }
    if (job_spans != spec.job_count || task_spans != spec.job_count) bad += tag + "span counts; ";
    for (const auto& j : run.ledger.jobs) {
      auto jt = nodes.find(j.job_span_id);
      auto tt = nodes.find(j.task_span_id);
      if (jt == nodes.end() || tt == nodes.end() || tt->second.parent != j.job_span_id) {
        bad += tag + "ledger job " + std::to_string(j.job.job_id) + " spans; ";
      }
    }
  }
  std::string d = "6 scenarios, " + std::to_string(spans_seen) + " spans, one root and one trace each";
  if (!bad.empty()) return fail(bad + "| " + d);
  return {true, d};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {"traceparent_round_trip", "exact", 5, traceparent_round_trip},
      {"cgroup_parsing_corpus", "exact", 5, cgroup_corpus},
      {"bone_strength_analog", "maxima exact; utilization 4.0+-0.01", 60, bone_strength},
      {"angio_support_analog", "bounds in band; >=95% durations in [16,20] s", 60, angio_support},
      {"outlier_detection", "exact set", 30, outlier_detection},
      {"pipeline_conservation", "exact", 60, conservation},
      {"query_oracle", "exact rows and order", 30, query_oracle},
      {"aggregation_oracle", "counts/maxima exact; sums 1 ulp", 60, aggregation_oracle},
      {"agent_non_interference", "exact", 20, agent_non_interference},
      {"trace_integrity", "exact", 10, trace_integrity},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = fail(std::string("threw: ") + e.what());
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs > c.limit_s) {
      o.passed = false;
      o.detail += " (over time limit)";
    }
    failed += o.passed ? 0 : 1;
    char timing[64];
    std::snprintf(timing, sizeof timing, "%.2fs/%gs", secs, c.limit_s);
    std::cout << (o.passed ? "PASS " : "FAIL ") << c.name << "  tol=" << c.tolerance << "  " << timing << "  "
              << o.detail << std::endl;
  }
  std::cout << (failed ? "FAILED " : "ALL PASSED ") << criteria.size() - failed << "/" << criteria.size()
            << std::endl;
  return failed ? 1 : 0;
}
