#include <set>

#include "doctest.h"
#include "scitrace/cgroup.hpp"
#include "scitrace/error.hpp"
#include "scitrace/sim.hpp"
#include "support.hpp"

using namespace scitrace;
using namespace scitrace::sim;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

ScenarioSpec small(std::uint64_t seed = 3) {
  ScenarioSpec s;
  s.name = "small";
  s.job_count = 6;
  s.concurrency_cap = 3;
  s.duration_dist = {4, 6};
  s.memory_plateau_dist = {1e9, 2e9};
  s.sample_interval = std::chrono::milliseconds(500);
  s.seed = seed;
  return s;
}

const Check* find_check(const ScenarioReport& r, const std::string& name) {
  for (const auto& c : r.checks) {
    if (c.name == name) return &c;
  }
  return nullptr;
}

std::string failing(const ScenarioReport& r) {
  std::string out;
  for (const auto& c : r.checks) {
    if (!c.passed) out += c.name + " ";
  }
  return out + r.failure;
}

}  // namespace

TEST_CASE("spec round-trips through JSON and rejects unknown fields") {
  auto s = small();
  s.planted_outliers = {{1, 2.0}};
  s.collector_outage = CollectorOutage{1.5, 2};
  auto back = ScenarioSpec::from_json(json::parse(s.to_json().dump()));
  CHECK(back.to_json() == s.to_json());
  auto j = s.to_json();
  j["jobs"] = 4;
  CHECK_THROWS_AS(ScenarioSpec::from_json(j), Error);
}

TEST_CASE("validate rejects impossible scenarios") {
  auto bad = [](auto mutate) {
    auto s = small();
    mutate(s);
    try {
      validate(s);
    } catch (const Error& e) {
      return e.code() == Errc::invalid_argument;
    }
    return false;
  };
  CHECK(bad([](ScenarioSpec& s) { s.concurrency_cap = 0; }));
  CHECK(bad([](ScenarioSpec& s) { s.duration_dist = {5, 4}; }));
  CHECK(bad([](ScenarioSpec& s) { s.duration_dist = {2, 4}; }));  // plateau under 3 intervals
  CHECK(bad([](ScenarioSpec& s) { s.planted_outliers = {{10, 5}}; }));
  CHECK(bad([](ScenarioSpec& s) { s.planted_outliers = {{0, 1}}; }));
  CHECK(bad([](ScenarioSpec& s) { s.cgroup_version = "v3"; }));
  CHECK(bad([](ScenarioSpec& s) { s.sample_interval = Nanos(0); }));
  CHECK_NOTHROW(validate(small()));
}

TEST_CASE("plan is deterministic and respects the distributions") {
  auto a = plan(small(9));
  auto b = plan(small(9));
  CHECK(a.to_json() == b.to_json());
  CHECK(plan(small(10)).to_json() != a.to_json());
  std::set<std::uint64_t> ids;
  for (const auto& j : a.jobs) {
    ids.insert(j.job.job_id);
    CHECK(j.planned_duration >= std::chrono::seconds(4) - std::chrono::milliseconds(250));
    CHECK(j.planned_duration <= std::chrono::seconds(6) + std::chrono::milliseconds(250));
    CHECK(j.planned_duration.count() % std::chrono::nanoseconds(std::chrono::milliseconds(500)).count() == 0);
    CHECK(j.planned_max_memory >= 1'000'000'000u);
    CHECK(j.planned_max_memory <= 2'000'000'000u);
  }
  CHECK(ids.size() == 6);
}

TEST_CASE("counters reach the plateau for at least three intervals") {
  auto spec = small();
  auto ledger = plan(spec);
  for (const auto& j : ledger.jobs) {
    std::size_t at_plateau = 0;
    std::uint64_t max_rss = 0, last_cpu = 0;
    for (Nanos e{0}; e <= j.planned_duration; e += spec.sample_interval) {
      auto c = counters_at(j, e, 0);
      max_rss = std::max(max_rss, c.rss);
      if (c.rss == j.planned_max_memory) ++at_plateau;
      CHECK(c.cpu_ns >= last_cpu);
      last_cpu = c.cpu_ns;
      CHECK(c.current == c.rss + c.cache);
    }
    CHECK(max_rss == j.planned_max_memory);
    CHECK(at_plateau >= 3);
  }
}

TEST_CASE("fixture tree matches the ledger and is empty before any job starts") {
  for (const char* version : {"v1", "v2"}) {
    testing::TempDir t;
    auto spec = small();
    spec.cgroup_version = version;
    auto ledger = plan(spec);
    generate_fixture_tree(spec, ledger, spec.start_unix_nano, t.path / "before");
    CHECK_FALSE(fs::exists(t.path / "before/cgroup/memory/slurm/uid_1000"));
    CHECK_FALSE(fs::exists(t.path / "before/cgroup/system.slice/slurmstepd.scope/job_100000"));

    auto& job = ledger.jobs[0];
    job.start = spec.start_unix_nano;
    auto c = counters_at(job, std::chrono::seconds(2), spec.start_unix_nano + 2 * kNanosPerSecond);
    write_job_fixture(spec, job, c, t.path / "root");
    auto layout = cgroup::resolve_layout(t.path / "root/cgroup", job.job.uid, job.job.job_id);
    CHECK(layout.version == (spec.cgroup_version == "v1" ? cgroup::Version::v1 : cgroup::Version::v2));
    auto mem = cgroup::read_memory(layout);
    CHECK(mem.rss_bytes == c.rss);
    CHECK(mem.cache_bytes == c.cache);
    CHECK(mem.memory_current_bytes == c.current);
    auto cpu = cgroup::read_cpu(layout);
    if (spec.cgroup_version == "v1") CHECK(cpu == c.cpu_ns);
    else CHECK(cpu == c.cpu_ns / 1000 * 1000);

    testing::TempDir again;
    write_job_fixture(spec, job, c, again.path / "root");
    CHECK(read_file(layout.memory_path / "memory.stat") ==
          read_file(cgroup::resolve_layout(again.path / "root/cgroup", job.job.uid, job.job.job_id).memory_path /
                    "memory.stat"));
    remove_job_fixture(spec, job, t.path / "root");
    CHECK_THROWS_AS(cgroup::resolve_layout(t.path / "root/cgroup", job.job.uid, job.job.job_id), Error);
  }
}

TEST_CASE("a small scenario passes every check") {
  testing::TempDir t;
  auto run = run_scenario(small(), RunOptions{t.path, false, 2, 10});
  INFO(failing(run.report));
  CHECK(run.report.completed);
  CHECK(!run.report.checks.empty());
  for (const auto& c : run.report.checks) CHECK_MESSAGE(c.passed, c.name);
  CHECK(oracle_check(run.report).passed);
  auto active = find_check(run.report, "active_jobs_timeline.max");
  REQUIRE(active);
  CHECK(active->actual == 3);
}

TEST_CASE("v2 scenario passes") {
  testing::TempDir t;
  auto spec = small(5);
  spec.cgroup_version = "v2";
  auto run = run_scenario(spec, RunOptions{t.path, false, 2, 10});
  INFO(failing(run.report));
  CHECK(oracle_check(run.report).passed);
}

TEST_CASE("job_count 0 completes with empty results") {
  testing::TempDir t;
  auto spec = small();
  spec.job_count = 0;
  auto run = run_scenario(spec, RunOptions{t.path, false, 5, 20});
  INFO(failing(run.report));
  CHECK(run.report.completed);
  CHECK(oracle_check(run.report).passed);
  CHECK(run.ledger.jobs.empty());
}

TEST_CASE("same seed, same ledger and same stored records") {
  testing::TempDir a, b;
  auto ra = run_scenario(small(4), RunOptions{a.path, true, 2, 10});
  auto rb = run_scenario(small(4), RunOptions{b.path, true, 2, 10});
  CHECK(ra.ledger.to_json()["jobs"] == rb.ledger.to_json()["jobs"]);
  REQUIRE(ra.payloads.size() == rb.payloads.size());
  std::size_t metric_posts = 0;
  for (std::size_t i = 0; i < ra.payloads.size(); ++i) {
    if (ra.payloads[i].path != "/v1/metrics") continue;
    ++metric_posts;
    CHECK(ra.payloads[i].body == rb.payloads[i].body);
  }
  CHECK(metric_posts > 0);
}

TEST_CASE("an outage shorter than the retry budget loses nothing") {
  testing::TempDir t;
  auto spec = small(6);
  spec.collector_outage = CollectorOutage{1.0, 2};
  auto run = run_scenario(spec, RunOptions{t.path, false, 2, 10});
  INFO(failing(run.report));
  CHECK(oracle_check(run.report).passed);
  CHECK(run.report.stats["outage_503_served"] == 2);
  CHECK(run.report.stats["export_failures"] == 0);
  CHECK(run.report.stats["batches_dropped"] == 0);
}

TEST_CASE("a dropped metric request is reported with the missing identities") {
  testing::TempDir t;
  auto spec = small(7);
  spec.drop_metric_requests = {1};
  auto run = run_scenario(spec, RunOptions{t.path, false, 2, 10});
  auto res = oracle_check(run.report);
  CHECK_FALSE(res.passed);
  auto c = find_check(run.report, "ledger_records_stored");
  REQUIRE(c);
  CHECK_FALSE(c->passed);
  REQUIRE(!c->actual["missing"].empty());
  auto first = c->actual["missing"][0].get<std::string>();
  bool known = false;
  for (const auto& j : run.ledger.jobs) known = known || first.rfind(std::to_string(j.job.job_id) + "/", 0) == 0;
  CHECK_MESSAGE(known, first);
}
