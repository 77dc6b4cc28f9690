#pragma once

// Per-job monitoring agent: samples the job's cgroup periodically, derives
// metrics, batches them and pushes them to the collector.

#include <atomic>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "json.hpp"
#include "scitrace/cgroup.hpp"
#include "scitrace/clock.hpp"
#include "scitrace/model.hpp"
#include "scitrace/transport.hpp"
#include "scitrace/util.hpp"

namespace scitrace::agent {

inline constexpr std::string_view kEndpointEnv = "SCITRACE_ENDPOINT";
inline constexpr std::string_view kDefaultEndpoint = "http://127.0.0.1:4318";
inline constexpr std::size_t kExportQueueCapacity = 4;

struct RetryPolicy {
  int max_retry = 5;
  Nanos backoff_base = std::chrono::seconds(1);
  double jitter = 0.2;

  // Delay before retry number `retry` (0-based): base * 2^retry, jittered.
  Nanos delay(int retry, const RandomSource& rng) const;
};

struct AgentConfig {
  Nanos sample_interval = std::chrono::seconds(5);
  std::size_t batch_max_samples = 60;
  std::string export_endpoint{kDefaultEndpoint};
  TagSet tags;
  JobIdentity job;
  std::filesystem::path cgroup_root{cgroup::kDefaultRoot};
  std::filesystem::path proc_root{cgroup::kDefaultProcRoot};
  std::string v2_pattern{cgroup::kDefaultV2Pattern};
  RetryPolicy retry;
  std::optional<TraceId> trace_id;  // from TRACEPARENT, stamped on every sample
  // Export on a background thread through a bounded queue; false exports inline.
  bool async_export = true;
};

void validate(const AgentConfig& cfg);

// `--key value` / `--key=value` pairs. Arguments containing whitespace are
// split first so `run_monitoring "--case-number 7 --step-name fem"` works.
// Known option flags configure the agent; every other flag becomes a tag.
AgentConfig parse_monitoring_args(const std::vector<std::string>& argv, const EnvironmentView& env);

enum class ExportStatus { accepted, terminal_rejection, retries_exhausted };

std::string_view to_string(ExportStatus s);

struct ExportResult {
  ExportStatus status = ExportStatus::accepted;
  int attempts = 0;
  int last_http_status = 0;
  std::string message;
};

using Batch = std::variant<std::vector<MetricSample>, std::vector<Span>>;

// POSTs the batch (one request per resource group), retrying transport errors
// and 5xx responses with exponential backoff; 4xx is terminal.
ExportResult export_batch(const Batch& batch, Transport& transport, const RetryPolicy& policy,
                          const Clock& clock, const RandomSource& rng);

// CPU counter re-basing state: keeps the exported cumulative stream monotone
// across counter regressions.
struct CpuRebase {
  std::uint64_t offset = 0;
  std::uint64_t last_exported = 0;
};

// Derives the metric samples for one snapshot. Utilization is emitted only
// when `prev` exists and the counter did not regress.
std::vector<MetricSample> derive_samples(const AgentConfig& cfg, const std::optional<CgroupSnapshot>& prev,
                                         const CgroupSnapshot& now, CpuRebase& rebase,
                                         std::vector<std::string>& warnings);

struct SampleOutcome {
  std::optional<CgroupSnapshot> snapshot;
  std::vector<MetricSample> samples;
  std::vector<std::string> warnings;
  bool job_gone = false;  // cgroup directory no longer exists
};

class Sampler {
 public:
  explicit Sampler(AgentConfig cfg) : cfg_(std::move(cfg)) {}

  SampleOutcome sample_once(const Clock& clock);
  const std::optional<CgroupSnapshot>& previous() const { return prev_; }

 private:
  AgentConfig cfg_;
  std::optional<CgroupSnapshot> prev_;
  CpuRebase rebase_;
};

struct AgentSummary {
  std::uint64_t rounds = 0;
  std::uint64_t skipped = 0;
  std::uint64_t samples = 0;
  std::uint64_t batches_sent = 0;
  std::uint64_t batches_dropped = 0;
  std::uint64_t records_dropped = 0;
  std::uint64_t export_failures = 0;
  std::uint64_t export_attempts = 0;
  std::string exit_reason;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
};

class StopSignal {
 public:
  void request();
  bool requested() const { return flag_.load(); }
  // Waits up to `d` of real time; returns true if stop was requested.
  bool wait_for(Nanos d);

 private:
  std::atomic<bool> flag_{false};
  std::mutex mu_;
  std::condition_variable cv_;
};

// Sampling loop state plus the exporter. Drive it with step() (one sampling
// round) and finish(); run_monitoring() wraps both in a timed loop.
class Agent {
 public:
  Agent(AgentConfig cfg, Transport& transport, const Clock& clock, RandomSource rng);
  ~Agent();
  Agent(const Agent&) = delete;
  Agent& operator=(const Agent&) = delete;

  // One sampling round. Returns false once the job's cgroup has disappeared.
  bool step();
  // Flushes the partial batch and waits for the exporter to drain.
  void finish();

  AgentSummary summary() const;
  const AgentConfig& config() const { return cfg_; }

 private:
  void enqueue(std::vector<MetricSample> batch);
  void export_one(const std::vector<MetricSample>& batch);
  void exporter_loop();

  AgentConfig cfg_;
  Transport& transport_;
  const Clock& clock_;
  RandomSource rng_;
  Sampler sampler_;
  std::vector<MetricSample> pending_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::vector<MetricSample>> queue_;
  bool stopping_ = false;
  bool busy_ = false;
  AgentSummary summary_;
  std::thread exporter_;
  bool finished_ = false;
};

// Never throws for collector failures; the summary records them.
AgentSummary run_monitoring(const AgentConfig& cfg, Transport& transport, const Clock& clock,
                            StopSignal& stop, RandomSource rng = system_random());

}  // namespace scitrace::agent
