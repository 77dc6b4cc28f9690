// scitrace command line: span, agent, collector, query, traces, analyze, sim.

#include <unistd.h>

#include <csignal>
#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "scitrace/agent.hpp"
#include "scitrace/analysis.hpp"
#include "scitrace/collector.hpp"
#include "scitrace/error.hpp"
#include "scitrace/sim.hpp"
#include "scitrace/store.hpp"
#include "scitrace/trace.hpp"
#include "scitrace/transport.hpp"
#include "scitrace/util.hpp"

using namespace scitrace;
using nlohmann::json;

namespace {

agent::StopSignal* g_stop = nullptr;
extern "C" void on_stop(int) {
  if (g_stop) g_stop->request();
}

std::pair<std::string, std::string> split_kv(const std::string& s) {
  auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0) throw Error(Errc::usage, "expected key=value, got '" + s + "'");
  return {s.substr(0, eq), s.substr(eq + 1)};
}

std::optional<JobIdentity> job_from_env(const EnvironmentView& env) {
  auto id = lookup(env, "SLURM_JOB_ID");
  if (!id) return std::nullopt;
  auto parsed = parse_u64(*id);
  if (!parsed) return std::nullopt;
  JobIdentity job;
  job.job_id = *parsed;
  if (auto t = lookup(env, "SLURM_ARRAY_TASK_ID")) job.array_task_id = parse_u64(*t);
  job.uid = ::getuid();
  if (auto h = lookup(env, "HOSTNAME")) {
    job.hostname = *h;
  } else {
    char buf[256] = {};
    ::gethostname(buf, sizeof buf - 1);
    job.hostname = buf;
  }
  return job;
}

std::string endpoint_or_default(const std::string& flag, const EnvironmentView& env) {
  if (!flag.empty()) return flag;
  if (auto e = lookup(env, agent::kEndpointEnv)) return *e;
  return std::string(agent::kDefaultEndpoint);
}

// Exports the span outbox; spans that could not be delivered go back to it.
int flush_outbox(trace::SpanStateFile& state, const std::string& endpoint) {
  auto spans = state.drain_outbox();
  if (spans.empty()) return 0;
  HttpTransport transport(Endpoint::parse(endpoint));
  SystemClock clock;
  auto r = agent::export_batch(agent::Batch(spans), transport, agent::RetryPolicy{2, std::chrono::milliseconds(200), 0.2},
                               clock, system_random());
  if (r.status == agent::ExportStatus::accepted) return 0;
  if (r.status == agent::ExportStatus::retries_exhausted) {
    for (const auto& s : spans) state.enqueue_export(s);
  }
  std::fprintf(stderr, "scitrace: span export failed (%s): %s\n", std::string(agent::to_string(r.status)).c_str(),
               r.message.c_str());
  return 0;
}

struct Source {
  std::string store_dir;
  std::string endpoint;

  store::ResultTable query(const store::QueryRequest& req) const {
    if (!store_dir.empty()) {
      store::StoreOptions opts;
      opts.read_only = true;
      store::Store st(store_dir, opts);
      return st.query(req);
    }
    std::vector<std::pair<std::string, std::string>> params{{"signal", std::string(store::to_string(req.signal))},
                                                            {"start", std::to_string(req.start_time)},
                                                            {"end", std::to_string(req.end_time)}};
    if (req.metric_names) {
      for (const auto& n : *req.metric_names) params.emplace_back("name", n);
    }
    if (req.trace_id) params.emplace_back("trace_id", *req.trace_id);
    for (const auto& [k, v] : req.attribute_filters) params.emplace_back("attr." + k, v);
    auto res = http_get(Endpoint::parse(endpoint), "/v1/query?" + encode_query(params));
    if (res.transport_failed()) throw Error(Errc::unavailable, "query " + endpoint + ": " + res.transport_error);
    if (res.status != 200) throw Error(Errc::invalid_argument, "query " + endpoint + " answered " + std::to_string(res.status) + ": " + res.body);
    return store::ResultTable::from_json(json::parse(res.body));
  }
};

struct QueryFlags {
  std::string signal = "metrics";
  UnixNanos start = 0;
  UnixNanos end = 0;
  std::vector<std::string> names;
  std::vector<std::string> attrs;
  std::string trace_id;
  std::string store_dir;
  std::string endpoint;

  void add(CLI::App* app, bool with_signal) {
    if (with_signal) app->add_option("--signal", signal, "metrics or spans")->check(CLI::IsMember({"metrics", "spans", "traces"}));
    app->add_option("--start", start, "range start, unix nanoseconds")->required();
    app->add_option("--end", end, "range end, unix nanoseconds (exclusive)")->required();
    app->add_option("--attr", attrs, "attribute filter key=value (repeatable)");
    app->add_option("--store", store_dir, "read a local store directory");
    app->add_option("--endpoint", endpoint, "collector URL (default $SCITRACE_ENDPOINT)");
  }

  store::QueryRequest request(store::Signal s) const {
    store::QueryRequest req;
    req.signal = s;
    req.start_time = start;
    req.end_time = end;
    if (!names.empty()) req.metric_names = names;
    if (!trace_id.empty()) req.trace_id = trace_id;
    for (const auto& a : attrs) {
      auto [k, v] = split_kv(a);
      req.attribute_filters[normalize_tag_key(k)] = v;
    }
    store::validate(req);
    return req;
  }

  Source source(const EnvironmentView& env) const {
    return Source{store_dir, store_dir.empty() ? endpoint_or_default(endpoint, env) : ""};
  }
};

int exit_code(Errc c) { return c == Errc::usage || c == Errc::configuration || c == Errc::invalid_argument ? 2 : 1; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"scitrace: job telemetry collection, tracing and analysis"};
  app.require_subcommand(1);
  const EnvironmentView env = process_environment();
  int rc = 0;

  // span
  auto* span = app.add_subcommand("span", "start and end trace spans from job scripts");
  span->require_subcommand(1);
  std::string span_name, span_kind = "custom", span_handle, span_status = "ok", span_endpoint;
  std::vector<std::string> span_attrs;
  bool new_trace = false, no_export = false;
  auto* span_start = span->add_subcommand("start", "open a span; prints TRACEPARENT=... and SCITRACE_SPAN=...");
  span_start->add_option("--name", span_name)->required();
  span_start->add_option("--kind", span_kind)->check(CLI::IsMember({"pipeline", "job", "task", "custom"}));
  span_start->add_option("--attr", span_attrs, "attribute key=value (repeatable)");
  span_start->add_flag("--force-new-trace", new_trace, "ignore a malformed inherited TRACEPARENT");
  span_start->callback([&] {
    TagSet attrs;
    for (const auto& a : span_attrs) {
      auto [k, v] = split_kv(a);
      attrs.set(k, v);
    }
    auto state = trace::SpanStateFile::from_environment(env);
    SystemClock clock;
    trace::SpanStartOptions opts;
    opts.force_new_trace = new_trace;
    auto kind = span_kind_from_string(span_kind);
    if (kind != SpanKind::pipeline) opts.job = job_from_env(env);
    auto started = trace::span_start(span_name, kind, attrs, env, clock, system_random(), state, opts);
    std::cout << started.envelope.export_line() << "\n" << "SCITRACE_SPAN=" << started.handle << "\n";
  });
  auto* span_end = span->add_subcommand("end", "close a span and export it");
  span_end->add_option("--handle", span_handle, "span handle (default $SCITRACE_SPAN)");
  span_end->add_option("--status", span_status)->check(CLI::IsMember({"ok", "error", "unset"}));
  span_end->add_option("--endpoint", span_endpoint);
  span_end->add_flag("--no-export", no_export, "leave the span in the outbox");
  span_end->callback([&] {
    if (span_handle.empty()) {
      auto h = lookup(env, "SCITRACE_SPAN");
      if (!h) throw Error(Errc::usage, "no --handle and SCITRACE_SPAN is unset");
      span_handle = *h;
    }
    auto state = trace::SpanStateFile::from_environment(env);
    SystemClock clock;
    trace::span_end(state, span_handle, span_status_from_string(span_status), clock);
    if (!no_export) rc = flush_outbox(state, endpoint_or_default(span_endpoint, env));
  });
  auto* span_flush = span->add_subcommand("flush", "export spans waiting in the outbox");
  span_flush->add_option("--endpoint", span_endpoint);
  span_flush->callback([&] {
    auto state = trace::SpanStateFile::from_environment(env);
    rc = flush_outbox(state, endpoint_or_default(span_endpoint, env));
  });

  // agent
  auto* agent_cmd = app.add_subcommand("agent", "per-job monitoring agent");
  agent_cmd->require_subcommand(1);
  auto* agent_run = agent_cmd->add_subcommand("run", "sample the job's cgroup until it ends; --key value pairs become tags");
  agent_run->allow_extras();
  agent_run->prefix_command();
  agent_run->callback([&] {
    auto cfg = agent::parse_monitoring_args(agent_run->remaining(), env);
    HttpTransport transport(Endpoint::parse(cfg.export_endpoint));
    SystemClock clock;
    agent::StopSignal stop;
    g_stop = &stop;
    std::signal(SIGINT, on_stop);
    std::signal(SIGTERM, on_stop);
    auto summary = agent::run_monitoring(cfg, transport, clock, stop);
    g_stop = nullptr;
    std::cout << summary.to_json().dump() << "\n";
  });

  // collector
  auto* coll = app.add_subcommand("collector", "run the ingest collector");
  std::string config_path, listen, store_dir;
  coll->add_option("--config", config_path, "pipeline config (JSON)");
  coll->add_option("--listen", listen, "host:port, overrides the config");
  coll->add_option("--store", store_dir, "store directory, overrides the config");
  coll->callback([&] {
    collector::PipelineConfig cfg;
    if (!config_path.empty()) cfg = collector::load_config(config_path);
    if (!listen.empty()) cfg.listen_address = listen;
    if (!store_dir.empty()) cfg.store_dir = store_dir;
    rc = collector::run_collector(cfg);
  });

  // query
  auto* query = app.add_subcommand("query", "query stored telemetry");
  QueryFlags qf;
  bool csv = false;
  qf.add(query, true);
  query->add_option("--name", qf.names, "metric or span name (repeatable)");
  query->add_option("--trace-id", qf.trace_id);
  query->add_flag("--csv", csv, "CSV instead of JSON");
  query->callback([&] {
    auto table = qf.source(env).query(qf.request(store::signal_from_string(qf.signal)));
    std::cout << (csv ? table.to_csv() : table.to_json().dump() + "\n");
  });

  // traces
  auto* traces = app.add_subcommand("traces", "trace listings");
  traces->require_subcommand(1);
  auto* traces_list = traces->add_subcommand("list", "one line per trace with an in-range root");
  QueryFlags tf;
  tf.add(traces_list, false);
  traces_list->callback([&] {
    if (tf.start >= tf.end) throw Error(Errc::invalid_range, "start must be before end");
    json out = json::array();
    if (!tf.store_dir.empty()) {
      store::StoreOptions opts;
      opts.read_only = true;
      store::Store st(tf.store_dir, opts);
      for (const auto& t : st.list_traces(tf.start, tf.end)) out.push_back(t.to_json());
    } else {
      auto ep = endpoint_or_default(tf.endpoint, env);
      auto res = http_get(Endpoint::parse(ep), "/v1/traces?" + encode_query({{"start", std::to_string(tf.start)},
                                                                              {"end", std::to_string(tf.end)}}));
      if (res.status != 200) throw Error(Errc::unavailable, "traces " + ep + ": " + res.body + res.transport_error);
      out = json::parse(res.body);
    }
    std::cout << out.dump(2) << "\n";
  });

  // analyze
  auto* analyze = app.add_subcommand("analyze", "aggregations over stored telemetry");
  analyze->require_subcommand(1);
  QueryFlags af;
  std::string metric = std::string(metric_names::kMemoryRss), bucket = "60s", horizon = "10s", csv_out, svg_out;
  std::size_t bins = analysis::kDefaultBins, k = 5;
  std::vector<std::uint64_t> ids;
  auto common = [&](CLI::App* sub, bool needs_metric) {
    af.add(sub, false);
    if (needs_metric) sub->add_option("--metric", metric);
    sub->add_option("--csv", csv_out, "write the result table as CSV");
    sub->add_option("--svg", svg_out, "write an SVG chart");
  };
  auto emit = [&](const store::ResultTable& table, const analysis::ChartData& data, analysis::ChartKind kind) {
    if (!csv_out.empty()) write_file(csv_out, table.to_csv());
    else std::cout << table.to_csv();
    if (!svg_out.empty()) analysis::render_chart(data, kind, svg_out);
  };
  auto metrics_of = [&](bool filter_name) {
    auto req = af.request(store::Signal::metrics);
    if (filter_name) req.metric_names = std::vector<std::string>{metric};
    return af.source(env).query(req);
  };
  auto spans_of = [&] { return af.source(env).query(af.request(store::Signal::spans)); };

  auto* a_total = analyze->add_subcommand("total-usage", "sum of per-job values per time bucket");
  common(a_total, true);
  a_total->add_option("--bucket", bucket);
  a_total->add_option("--horizon", horizon, "carry-forward staleness horizon (2x sample interval)");
  a_total->callback([&] {
    auto ts = analysis::total_usage_over_time(metrics_of(true), metric, af.start, af.end, parse_duration(bucket),
                                              parse_duration(horizon));
    emit(ts.to_table(), ts, analysis::ChartKind::line);
  });
  auto* a_max = analyze->add_subcommand("max-dist", "histogram of per-job maxima");
  common(a_max, true);
  a_max->add_option("--bins", bins);
  a_max->callback([&] {
    auto d = analysis::max_per_job_distribution(metrics_of(true), metric, bins);
    std::fprintf(stderr, "jobs=%zu min=%.17g max=%.17g mean=%.17g\n", d.total(), d.min, d.max, d.mean);
    emit(d.to_table(), d, analysis::ChartKind::histogram);
  });
  auto* a_dur = analyze->add_subcommand("durations", "histogram of job durations (s)");
  common(a_dur, false);
  a_dur->add_option("--bins", bins);
  a_dur->callback([&] {
    auto d = analysis::job_durations(spans_of(), bins);
    std::fprintf(stderr, "jobs=%zu open=%zu min=%.17g max=%.17g mean=%.17g\n", d.total(), d.open_count, d.min, d.max,
                 d.mean);
    emit(d.to_table(), d, analysis::ChartKind::histogram);
  });
  auto* a_active = analyze->add_subcommand("active-jobs", "running job count per time bucket");
  common(a_active, false);
  a_active->add_option("--bucket", bucket);
  a_active->callback([&] {
    auto ts = analysis::active_jobs_timeline(spans_of(), af.start, af.end, parse_duration(bucket));
    emit(ts.to_table(), ts, analysis::ChartKind::line);
  });
  auto* a_grid = analyze->add_subcommand("grid", "raw series of the k shortest jobs, or of chosen ids");
  common(a_grid, true);
  a_grid->add_option("--k", k);
  a_grid->add_option("--ids", ids, "job ids instead of shortest-k")->delimiter(',');
  a_grid->callback([&] {
    analysis::JobSelector sel;
    sel.k = k;
    if (!ids.empty()) {
      sel.mode = analysis::JobSelector::Mode::ids;
      sel.ids = ids;
    }
    auto g = analysis::per_job_grid(metrics_of(true), spans_of(), metric, sel);
    emit(g.rows, g, analysis::ChartKind::grid);
  });

  // sim
  auto* sim_cmd = app.add_subcommand("sim", "synthetic scenarios");
  sim_cmd->require_subcommand(1);
  auto* sim_run = sim_cmd->add_subcommand("run", "run a scenario end to end and check it against its ledger");
  std::string spec_path, report_path, work_dir;
  sim_run->add_option("--spec", spec_path)->required();
  sim_run->add_option("--out", report_path)->required();
  sim_run->add_option("--work", work_dir, "scratch directory (default: next to the report)");
  sim_run->callback([&] {
    auto spec = sim::ScenarioSpec::from_json(json::parse(read_file(spec_path)));
    sim::RunOptions opts;
    opts.work_dir = work_dir.empty() ? std::filesystem::path(report_path).replace_extension(".work") : std::filesystem::path(work_dir);
    auto run = sim::run_scenario(spec, opts);
    write_file(report_path, run.report.to_json().dump(2) + "\n");
    auto result = sim::oracle_check(run.report);
    for (const auto& d : result.diffs) std::fprintf(stderr, "mismatch: %s\n", d.c_str());
    std::fprintf(stderr, "scenario %s: %s\n", spec.name.c_str(), result.passed ? "pass" : "fail");
    rc = result.passed ? 0 : 1;
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const Error& e) {
    std::fprintf(stderr, "scitrace: %s: %s\n", std::string(to_string(e.code())).c_str(), e.what());
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "scitrace: %s\n", e.what());
    return 1;
  }
  return rc;
}
