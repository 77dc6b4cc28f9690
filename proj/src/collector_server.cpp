#include <atomic>
#include <csignal>
#include <cstdio>

#include "httplib.h"
#include "scitrace/collector.hpp"
#include "scitrace/error.hpp"
#include "scitrace/util.hpp"

namespace scitrace::collector {

struct Server::Impl {
  httplib::Server http;
  std::thread serve_thread;
  std::thread timer_thread;
  std::mutex timer_mu;
  std::condition_variable timer_cv;
  bool stopping = false;
  bool running = false;
  Nanos timer_period;
  std::mutex pre_mu;
  PreHandler pre;
};

namespace {

void reply_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void handle_ingest(Pipeline& p, store::Signal signal, const httplib::Request& req, httplib::Response& res) {
  IngestResult r = p.ingest(req.body, signal);
  reply_json(res, r.http_status, r.to_json());
}

void handle_query(Pipeline& p, const httplib::Request& req, httplib::Response& res) {
  std::multimap<std::string, std::string> params(req.params.begin(), req.params.end());
  try {
    auto q = parse_query_params(params);
    auto table = p.store().query(q);
    if (req.get_header_value("Accept").find("text/csv") != std::string::npos) {
      res.status = 200;
      res.set_content(table.to_csv(), "text/csv");
    } else {
      reply_json(res, 200, table.to_json());
    }
  } catch (const Error& e) {
    reply_json(res, 400, {{"error", std::string(to_string(e.code()))}, {"message", e.what()}});
  }
}

void handle_traces(Pipeline& p, const httplib::Request& req, httplib::Response& res) {
  auto start = parse_u64(req.get_param_value("start"));
  auto end = parse_u64(req.get_param_value("end"));
  if (!start || !end || *start >= *end) {
    reply_json(res, 400, {{"error", "invalid_range"}, {"message", "start and end must satisfy start < end"}});
    return;
  }
  nlohmann::json out = nlohmann::json::array();
  for (const auto& t : p.store().list_traces(*start, *end)) out.push_back(t.to_json());
  reply_json(res, 200, out);
}

}  // namespace

Server::Server(std::shared_ptr<Pipeline> pipeline, Nanos timer_period)
    : impl_(std::make_unique<Impl>()), pipeline_(std::move(pipeline)) {
  impl_->timer_period = timer_period;
}

Server::~Server() { stop(); }

void Server::set_pre_handler(PreHandler handler) {
  std::lock_guard lock(impl_->pre_mu);
  impl_->pre = std::move(handler);
}

int Server::start(const std::string& host, int port) {
  auto& http = impl_->http;
  Pipeline& p = *pipeline_;
  http.set_tcp_nodelay(true);
  // Fault hook, checked once the request body has been read.
  auto guarded = [this](auto handler) {
    return [this, handler](const httplib::Request& req, httplib::Response& res) {
      PreHandler pre;
      {
        std::lock_guard lock(impl_->pre_mu);
        pre = impl_->pre;
      }
      if (pre) {
        if (auto status = pre(req.method, req.path)) {
          reply_json(res, *status, {{"error", "injected"}});
          return;
        }
      }
      handler(req, res);
    };
  };
  http.Post(std::string(wire::kMetricsPath), guarded([&p](const httplib::Request& req, httplib::Response& res) {
    handle_ingest(p, store::Signal::metrics, req, res);
  }));
  http.Post(std::string(wire::kTracesPath), guarded([&p](const httplib::Request& req, httplib::Response& res) {
    handle_ingest(p, store::Signal::spans, req, res);
  }));
  http.Get("/healthz", guarded([](const httplib::Request&, httplib::Response& res) {
    res.set_content("ok", "text/plain");
  }));
  http.Get("/v1/query",
           guarded([&p](const httplib::Request& req, httplib::Response& res) { handle_query(p, req, res); }));
  http.Get("/v1/traces",
           guarded([&p](const httplib::Request& req, httplib::Response& res) { handle_traces(p, req, res); }));

  if (port == 0) {
    port_ = http.bind_to_any_port(host);
  } else {
    port_ = http.bind_to_port(host, port) ? port : -1;
  }
  if (port_ <= 0) throw Error(Errc::unavailable, "cannot bind " + host + ":" + std::to_string(port));
  impl_->running = true;
  impl_->serve_thread = std::thread([this] { impl_->http.listen_after_bind(); });
  impl_->timer_thread = std::thread([this] {
    std::unique_lock lock(impl_->timer_mu);
    while (!impl_->stopping) {
      impl_->timer_cv.wait_for(lock, impl_->timer_period);
      if (impl_->stopping) break;
      lock.unlock();
      pipeline_->on_timer();
      lock.lock();
    }
  });
  http.wait_until_ready();
  return port_;
}

std::size_t Server::stop() {
  if (!impl_ || !impl_->running) return 0;
  impl_->running = false;
  impl_->http.stop();
  if (impl_->serve_thread.joinable()) impl_->serve_thread.join();
  {
    std::lock_guard lock(impl_->timer_mu);
    impl_->stopping = true;
  }
  impl_->timer_cv.notify_all();
  if (impl_->timer_thread.joinable()) impl_->timer_thread.join();
  return pipeline_->shutdown();
}

namespace {
std::atomic<bool> g_stop{false};
extern "C" void on_signal(int) { g_stop.store(true); }
}  // namespace

int run_collector(const PipelineConfig& cfg) {
  auto colon = cfg.listen_address.rfind(':');
  if (colon == std::string::npos) throw Error(Errc::configuration, "listen_address must be host:port");
  std::string host = cfg.listen_address.substr(0, colon);
  auto port = parse_u64(cfg.listen_address.substr(colon + 1));
  if (!port || *port > 65535) throw Error(Errc::configuration, "invalid port in listen_address");

  static SystemClock clock;
  auto store = std::make_shared<store::Store>(cfg.store_dir, cfg.store_options);
  auto pipeline = std::make_shared<Pipeline>(cfg, store, clock);
  Server server(pipeline);
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  int bound = server.start(host, static_cast<int>(*port));
  std::fprintf(stderr, "scitrace collector listening on %s:%d, store %s\n", host.c_str(), bound,
               cfg.store_dir.string().c_str());
  while (!g_stop.load()) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  std::size_t left = server.stop();
  auto stats = pipeline->stats();
  std::fprintf(stderr, "collector stopped: %zu records written, %zu unflushed\n", stats.records_written, left);
  return left == 0 ? 0 : 1;
}

}  // namespace scitrace::collector
