#pragma once

// Synthetic job fleets on a simulated clock: fixture cgroup/proc trees, a
// ground-truth ledger, and end-to-end scenario runs through agent, collector,
// store and analysis.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "scitrace/clock.hpp"
#include "scitrace/model.hpp"

namespace scitrace::sim {

namespace fs = std::filesystem;

struct Range {
  double low = 0;
  double high = 0;
};

struct PlantedOutlier {
  std::size_t job_index = 0;
  double duration_s = 0;
};

struct CollectorOutage {
  double at_s = 0;             // simulated seconds after scenario start
  std::size_t requests = 0;    // POSTs answered 503 from then on
};

struct ScenarioSpec {
  std::string name = "scenario";
  std::size_t job_count = 0;
  std::size_t concurrency_cap = 1;
  Range duration_dist{16, 20};                  // seconds
  Range memory_plateau_dist{7.1e9, 8.4e9};      // bytes
  double cpu_cores = 4.0;
  Nanos sample_interval = std::chrono::milliseconds(500);
  std::vector<PlantedOutlier> planted_outliers;
  std::uint64_t seed = 1;

  std::string cgroup_version = "v1";  // or "v2"
  UnixNanos start_unix_nano = 1'700'000'000ULL * kNanosPerSecond;
  std::optional<CollectorOutage> collector_outage;
  std::vector<std::size_t> drop_metric_requests;  // 1-based metric POSTs answered 400

  nlohmann::json to_json() const;
  static ScenarioSpec from_json(const nlohmann::json& j);
};

// Errc::invalid_argument naming the violated constraint.
void validate(const ScenarioSpec& spec);

struct WrittenCounters {
  UnixNanos time = 0;
  std::uint64_t rss = 0;
  std::uint64_t cache = 0;
  std::uint64_t current = 0;
  std::uint64_t cpu_ns = 0;
  std::uint64_t pids = 0;
  std::uint64_t open_files = 0;
};

struct LedgerJob {
  std::size_t index = 0;
  JobIdentity job;
  Nanos planned_duration{0};
  std::uint64_t planned_max_memory = 0;
  double planned_cores = 0;
  std::optional<UnixNanos> start;
  std::optional<UnixNanos> end;
  std::vector<WrittenCounters> written;
  std::string job_span_id;
  std::string task_span_id;
};

struct GroundTruthLedger {
  std::string trace_id;
  std::string root_span_id;
  std::vector<LedgerJob> jobs;

  nlohmann::json to_json() const;
};

// Planned jobs for a spec: identities, durations (multiples of the sample
// interval), plateaus and cores. Deterministic given the seed.
GroundTruthLedger plan(const ScenarioSpec& spec);

// Counter values of a planned job `elapsed` after its start.
WrittenCounters counters_at(const LedgerJob& job, Nanos elapsed, UnixNanos time);

// Writes the cgroup and proc files for every job active at `t` (start <= t < end)
// under `root` ("cgroup/", "proc/") and records the values in the ledger.
void generate_fixture_tree(const ScenarioSpec& spec, GroundTruthLedger& ledger, UnixNanos t, const fs::path& root);

// Writes one job's files (no ledger update).
void write_job_fixture(const ScenarioSpec& spec, const LedgerJob& job, const WrittenCounters& c,
                       const fs::path& root);
void remove_job_fixture(const ScenarioSpec& spec, const LedgerJob& job, const fs::path& root);

struct Check {
  std::string name;
  nlohmann::json expected;
  nlohmann::json actual;
  bool passed = false;
};

struct ScenarioReport {
  ScenarioSpec spec;
  bool completed = false;
  std::string failed_component;  // set when a component threw
  std::string failure;
  std::vector<Check> checks;
  nlohmann::json stats = nlohmann::json::object();

  nlohmann::json to_json() const;
};

struct Payload {
  std::string path;
  std::string body;
};

struct RunOptions {
  fs::path work_dir;  // fixtures, span state and store live here
  bool keep_payloads = false;
  std::size_t shortest_k = 5;
  std::size_t bins = 20;
};

struct ScenarioRun {
  ScenarioReport report;
  GroundTruthLedger ledger;
  std::vector<Payload> payloads;
  fs::path store_dir;
};

// Drives the scenario through a live collector on a local port. Component
// failures are reported, not thrown; only an invalid spec throws.
ScenarioRun run_scenario(const ScenarioSpec& spec, const RunOptions& options);

struct OracleResult {
  bool passed = false;
  std::vector<std::string> diffs;
};

// Every check must pass and the scenario must have completed.
OracleResult oracle_check(const ScenarioReport& report);

}  // namespace scitrace::sim
