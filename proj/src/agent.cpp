#include "scitrace/agent.hpp"

#include <unistd.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "scitrace/error.hpp"
#include "scitrace/trace.hpp"
#include "scitrace/wire.hpp"

namespace scitrace::agent {

namespace {

std::uint64_t require_uint_arg(const std::string& flag, const std::string& value) {
  auto v = parse_u64(value);
  if (!v) throw Error(Errc::usage, flag + " expects a non-negative integer, got '" + value + "'");
  return *v;
}

std::vector<std::string> tokenize(const std::vector<std::string>& argv) {
  std::vector<std::string> out;
  for (const auto& arg : argv) {
    std::istringstream in(arg);
    bool any = false;
    for (std::string tok; in >> tok;) {
      out.push_back(tok);
      any = true;
    }
    // An explicitly empty argument is a value (e.g. an unset $VAR).
    if (!any) out.emplace_back();
  }
  return out;
}

std::int64_t clamp_to_i64(std::uint64_t v) {
  constexpr auto kMax = static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max());
  return static_cast<std::int64_t>(std::min(v, kMax));
}

MetricSample make_sample(const AgentConfig& cfg, std::string_view name, UnixNanos t, MetricValue value) {
  auto reg = MetricRegistry::builtin().find(name);
  MetricSample s;
  s.name = reg->name;
  s.unit = reg->unit;
  s.kind = reg->kind;
  s.time_unix_nano = t;
  s.value = value;
  s.job = cfg.job;
  s.tags = cfg.tags;
  s.trace_id = cfg.trace_id;
  return s;
}

}  // namespace

Nanos RetryPolicy::delay(int retry, const RandomSource& rng) const {
  double base = static_cast<double>(backoff_base.count()) * std::ldexp(1.0, retry);
  double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;  // [0, 1)
  double factor = 1.0 + jitter * (2.0 * u - 1.0);
  return Nanos(static_cast<std::int64_t>(base * factor));
}

void validate(const AgentConfig& cfg) {
  if (cfg.sample_interval <= Nanos::zero()) throw Error(Errc::configuration, "sample interval must be positive");
  if (cfg.batch_max_samples < 1) throw Error(Errc::configuration, "batch_max_samples must be at least 1");
  if (cfg.export_endpoint.empty()) throw Error(Errc::configuration, "export endpoint is empty");
  if (cfg.retry.max_retry < 0) throw Error(Errc::configuration, "max_retry must be non-negative");
  validate(cfg.job);
}

AgentConfig parse_monitoring_args(const std::vector<std::string>& argv, const EnvironmentView& env) {
  AgentConfig cfg;
  std::optional<std::uint64_t> job_id;
  std::optional<std::uint64_t> uid;
  std::optional<std::uint64_t> task_id;
  std::optional<std::string> hostname;
  std::optional<std::string> endpoint;

  auto tokens = tokenize(argv);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::string& tok = tokens[i];
    if (!tok.starts_with("--") || tok.size() == 2) {
      throw Error(Errc::usage, "expected a --flag, got '" + tok + "'");
    }
    std::string flag = tok;
    std::string value;
    if (auto eq = tok.find('='); eq != std::string::npos) {
      flag = tok.substr(0, eq);
      value = tok.substr(eq + 1);
    } else {
      if (i + 1 >= tokens.size()) throw Error(Errc::usage, "flag " + tok + " is missing a value");
      value = tokens[++i];
    }

    if (flag == "--interval") cfg.sample_interval = parse_duration(value);
    else if (flag == "--endpoint") endpoint = value;
    else if (flag == "--cgroup-root") cfg.cgroup_root = value;
    else if (flag == "--proc-root") cfg.proc_root = value;
    else if (flag == "--v2-pattern") cfg.v2_pattern = value;
    else if (flag == "--job-id") job_id = require_uint_arg(flag, value);
    else if (flag == "--uid") uid = require_uint_arg(flag, value);
    else if (flag == "--array-task-id") task_id = require_uint_arg(flag, value);
    else if (flag == "--hostname") hostname = value;
    else if (flag == "--batch-max") cfg.batch_max_samples = require_uint_arg(flag, value);
    else if (flag == "--max-retry") cfg.retry.max_retry = static_cast<int>(require_uint_arg(flag, value));
    else if (flag == "--backoff") cfg.retry.backoff_base = parse_duration(value);
    else cfg.tags.set(flag, value);
  }

  if (!job_id) {
    if (auto v = lookup(env, "SLURM_JOB_ID")) job_id = require_uint_arg("SLURM_JOB_ID", *v);
  }
  if (!job_id) throw Error(Errc::configuration, "no job identity: SLURM_JOB_ID unset and no --job-id given");
  if (!task_id) {
    if (auto v = lookup(env, "SLURM_ARRAY_TASK_ID"); v && !v->empty()) {
      task_id = require_uint_arg("SLURM_ARRAY_TASK_ID", *v);
    }
  }
  if (!uid) {
    if (auto v = lookup(env, "UID"); v && !v->empty()) uid = require_uint_arg("UID", *v);
    else uid = static_cast<std::uint64_t>(::getuid());
  }
  if (!hostname) {
    if (auto v = lookup(env, "HOSTNAME"); v && !v->empty()) {
      hostname = *v;
    } else {
      char buf[256] = {};
      ::gethostname(buf, sizeof buf - 1);
      hostname = buf[0] ? std::string(buf) : std::string("localhost");
    }
  }
  if (!endpoint) endpoint = lookup(env, kEndpointEnv);
  if (endpoint && !endpoint->empty()) cfg.export_endpoint = *endpoint;

  cfg.job = JobIdentity{*uid, *job_id, task_id, *hostname};
  if (auto tp = lookup(env, trace::kTraceparentEnv); tp && !tp->empty()) {
    try {
      cfg.trace_id = trace::parse_traceparent(*tp).trace_id;
    } catch (const Error&) {
      // A corrupt context must not stop monitoring; samples go out uncorrelated.
    }
  }
  validate(cfg);
  return cfg;
}

std::string_view to_string(ExportStatus s) {
  switch (s) {
    case ExportStatus::accepted: return "accepted";
    case ExportStatus::terminal_rejection: return "terminal-rejection";
    case ExportStatus::retries_exhausted: return "retries-exhausted";
  }
  return "unknown";
}

namespace {

ExportResult post_with_retry(std::string_view path, const std::string& body, Transport& transport,
                             const RetryPolicy& policy, const Clock& clock, const RandomSource& rng) {
  ExportResult result;
  for (int retry = 0;; ++retry) {
    ++result.attempts;
    HttpResult res = transport.post(path, body);
    result.last_http_status = res.status;
    if (res.status >= 200 && res.status < 300) {
      result.status = ExportStatus::accepted;
      return result;
    }
    if (res.status >= 400 && res.status < 500) {
      result.status = ExportStatus::terminal_rejection;
      result.message = "HTTP " + std::to_string(res.status) + ": " + res.body;
      return result;
    }
    result.message = res.transport_failed() ? res.transport_error : "HTTP " + std::to_string(res.status);
    if (retry >= policy.max_retry) {
      result.status = ExportStatus::retries_exhausted;
      return result;
    }
    clock.sleep_for(policy.delay(retry, rng));
  }
}

}  // namespace

ExportResult export_batch(const Batch& batch, Transport& transport, const RetryPolicy& policy,
                          const Clock& clock, const RandomSource& rng) {
  std::vector<std::pair<std::string_view, std::string>> payloads;
  if (const auto* samples = std::get_if<std::vector<MetricSample>>(&batch)) {
    if (samples->empty()) throw Error(Errc::invalid_argument, "export_batch requires a non-empty batch");
    for (const auto& group : wire::group_by_resource(std::span<const MetricSample>(*samples))) {
      payloads.emplace_back(wire::kMetricsPath, wire::encode_metrics(group).dump());
    }
  } else {
    const auto& spans = std::get<std::vector<Span>>(batch);
    if (spans.empty()) throw Error(Errc::invalid_argument, "export_batch requires a non-empty batch");
    for (const auto& group : wire::group_by_resource(std::span<const Span>(spans))) {
      payloads.emplace_back(wire::kTracesPath, wire::encode_spans(group).dump());
    }
  }

  ExportResult total;
  for (const auto& [path, body] : payloads) {
    ExportResult r = post_with_retry(path, body, transport, policy, clock, rng);
    total.attempts += r.attempts;
    total.last_http_status = r.last_http_status;
    if (r.status != ExportStatus::accepted) {
      total.status = r.status;
      total.message = r.message;
      return total;
    }
  }
  return total;
}

std::vector<MetricSample> derive_samples(const AgentConfig& cfg, const std::optional<CgroupSnapshot>& prev,
                                         const CgroupSnapshot& now, CpuRebase& rebase,
                                         std::vector<std::string>& warnings) {
  using namespace metric_names;
  const UnixNanos t = now.taken_unix_nano;
  std::vector<MetricSample> out;
  out.push_back(make_sample(cfg, kMemoryRss, t, clamp_to_i64(now.rss_bytes)));
  out.push_back(make_sample(cfg, kMemoryCache, t, clamp_to_i64(now.cache_bytes)));
  out.push_back(make_sample(cfg, kMemoryCurrent, t, clamp_to_i64(now.memory_current_bytes)));

  bool regressed = prev && prev->cpu_usage_ns_cumulative > now.cpu_usage_ns_cumulative;
  if (regressed) {
    rebase.offset = rebase.last_exported;
    warnings.push_back("cpu counter regressed from " + std::to_string(prev->cpu_usage_ns_cumulative) + " to " +
                       std::to_string(now.cpu_usage_ns_cumulative) + "; re-based");
  }
  std::uint64_t exported = now.cpu_usage_ns_cumulative + rebase.offset;
  exported = std::max(exported, rebase.last_exported);
  rebase.last_exported = exported;
  out.push_back(make_sample(cfg, kCpuTime, t, clamp_to_i64(exported)));

  if (prev && !regressed && now.taken_unix_nano > prev->taken_unix_nano) {
    double cpu_delta = static_cast<double>(now.cpu_usage_ns_cumulative - prev->cpu_usage_ns_cumulative);
    double wall_delta = static_cast<double>(now.taken_unix_nano - prev->taken_unix_nano);
    out.push_back(make_sample(cfg, kCpuUtilization, t, cpu_delta / wall_delta));
  }
  out.push_back(make_sample(cfg, kOpenFiles, t, clamp_to_i64(now.open_files)));
  out.push_back(make_sample(cfg, kPids, t, clamp_to_i64(now.pid_count)));
  return out;
}

SampleOutcome Sampler::sample_once(const Clock& clock) {
  SampleOutcome outcome;
  cgroup::Layout layout;
  try {
    layout = cgroup::resolve_layout(cfg_.cgroup_root, cfg_.job.uid, cfg_.job.job_id, cfg_.v2_pattern);
  } catch (const Error& e) {
    if (e.code() == Errc::not_found) {
      outcome.job_gone = true;
    }
    outcome.warnings.push_back(std::string("sample skipped: ") + e.what());
    return outcome;
  }
  CgroupSnapshot snap;
  try {
    snap = cgroup::snapshot(layout, cfg_.proc_root, clock);
  } catch (const Error& e) {
    std::error_code ec;
    outcome.job_gone = !std::filesystem::exists(layout.memory_path, ec);
    outcome.warnings.push_back(std::string("sample skipped: ") + e.what());
    return outcome;
  }
  outcome.samples = derive_samples(cfg_, prev_, snap, rebase_, outcome.warnings);
  outcome.snapshot = snap;
  prev_ = snap;
  return outcome;
}

nlohmann::json AgentSummary::to_json() const {
  return nlohmann::json{{"rounds", rounds},
                        {"skipped", skipped},
                        {"samples", samples},
                        {"batches_sent", batches_sent},
                        {"batches_dropped", batches_dropped},
                        {"records_dropped", records_dropped},
                        {"export_failures", export_failures},
                        {"export_attempts", export_attempts},
                        {"exit_reason", exit_reason},
                        {"warnings", warnings}};
}

void StopSignal::request() {
  {
    std::lock_guard lock(mu_);
    flag_ = true;
  }
  cv_.notify_all();
}

bool StopSignal::wait_for(Nanos d) {
  std::unique_lock lock(mu_);
  return cv_.wait_for(lock, d, [&] { return flag_.load(); });
}

Agent::Agent(AgentConfig cfg, Transport& transport, const Clock& clock, RandomSource rng)
    : cfg_(std::move(cfg)), transport_(transport), clock_(clock), rng_(std::move(rng)), sampler_(cfg_) {
  validate(cfg_);
  if (cfg_.async_export) exporter_ = std::thread([this] { exporter_loop(); });
}

Agent::~Agent() {
  if (!finished_) {
    try {
      finish();
    } catch (...) {
    }
  }
}

bool Agent::step() {
  SampleOutcome outcome = sampler_.sample_once(clock_);
  {
    std::lock_guard lock(mu_);
    if (outcome.snapshot) {
      ++summary_.rounds;
      summary_.samples += outcome.samples.size();
    } else if (!outcome.job_gone) {
      ++summary_.skipped;
    }
    for (auto& w : outcome.warnings) summary_.warnings.push_back(std::move(w));
  }
  if (outcome.job_gone) return false;
  for (auto& s : outcome.samples) {
    pending_.push_back(std::move(s));
    if (pending_.size() >= cfg_.batch_max_samples) {
      enqueue(std::move(pending_));
      pending_.clear();
    }
  }
  return true;
}

void Agent::enqueue(std::vector<MetricSample> batch) {
  if (batch.empty()) return;
  if (!cfg_.async_export) {
    export_one(batch);
    return;
  }
  {
    std::lock_guard lock(mu_);
    if (queue_.size() >= kExportQueueCapacity) {
      summary_.batches_dropped += 1;
      summary_.records_dropped += queue_.front().size();
      summary_.warnings.push_back("export queue full; dropped oldest batch");
      queue_.pop_front();
    }
    queue_.push_back(std::move(batch));
  }
  cv_.notify_all();
}

void Agent::export_one(const std::vector<MetricSample>& batch) {
  ExportResult r;
  try {
    r = export_batch(Batch(batch), transport_, cfg_.retry, clock_, rng_);
  } catch (const std::exception& e) {
    r.status = ExportStatus::retries_exhausted;
    r.message = e.what();
  }
  std::lock_guard lock(mu_);
  summary_.export_attempts += static_cast<std::uint64_t>(r.attempts);
  if (r.status == ExportStatus::accepted) {
    ++summary_.batches_sent;
  } else {
    ++summary_.batches_dropped;
    ++summary_.export_failures;
    summary_.records_dropped += batch.size();
    summary_.warnings.push_back("batch dropped (" + std::string(to_string(r.status)) + "): " + r.message);
  }
}

void Agent::exporter_loop() {
  while (true) {
    std::vector<MetricSample> batch;
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
      if (queue_.empty()) return;
      batch = std::move(queue_.front());
      queue_.pop_front();
      busy_ = true;
    }
    export_one(batch);
    {
      std::lock_guard lock(mu_);
      busy_ = false;
    }
    cv_.notify_all();
  }
}

void Agent::finish() {
  if (finished_) return;
  finished_ = true;
  if (!pending_.empty()) {
    enqueue(std::move(pending_));
    pending_.clear();
  }
  if (exporter_.joinable()) {
    {
      std::lock_guard lock(mu_);
      stopping_ = true;
    }
    cv_.notify_all();
    exporter_.join();
  }
}

AgentSummary Agent::summary() const {
  std::lock_guard lock(mu_);
  return summary_;
}

AgentSummary run_monitoring(const AgentConfig& cfg, Transport& transport, const Clock& clock,
                            StopSignal& stop, RandomSource rng) {
  Agent agent(cfg, transport, clock, std::move(rng));
  const bool real_time = dynamic_cast<const SystemClock*>(&clock) != nullptr;
  std::string reason = "stop-signal";
  UnixNanos next = clock.now();
  while (!stop.requested()) {
    if (!agent.step()) {
      reason = "job-ended";
      break;
    }
    next += static_cast<UnixNanos>(cfg.sample_interval.count());
    UnixNanos now = clock.now();
    Nanos wait(next > now ? static_cast<std::int64_t>(next - now) : 0);
    if (real_time) {
      if (stop.wait_for(wait)) break;
    } else {
      clock.sleep_for(wait);
    }
  }
  agent.finish();
  AgentSummary summary = agent.summary();
  summary.exit_reason = reason;
  return summary;
}

}  // namespace scitrace::agent
