#include "scitrace/transport.hpp"

#include "httplib.h"
#include "scitrace/error.hpp"
#include "scitrace/util.hpp"

namespace scitrace {

Endpoint Endpoint::parse(std::string_view url) {
  Endpoint ep;
  std::string_view rest = trim(url);
  if (auto pos = rest.find("://"); pos != std::string_view::npos) {
    ep.scheme = std::string(rest.substr(0, pos));
    rest.remove_prefix(pos + 3);
    if (ep.scheme != "http") {
      throw Error(Errc::configuration, "unsupported endpoint scheme '" + ep.scheme + "'");
    }
    ep.port = 80;
  }
  if (auto slash = rest.find('/'); slash != std::string_view::npos) rest = rest.substr(0, slash);
  if (rest.empty()) throw Error(Errc::configuration, "endpoint '" + std::string(url) + "' has no host");
  if (auto colon = rest.rfind(':'); colon != std::string_view::npos) {
    auto port = parse_u64(rest.substr(colon + 1));
    if (!port || *port == 0 || *port > 65535) {
      throw Error(Errc::configuration, "endpoint '" + std::string(url) + "' has an invalid port");
    }
    ep.port = static_cast<int>(*port);
    rest = rest.substr(0, colon);
  }
  ep.host = std::string(rest);
  if (ep.host.empty()) throw Error(Errc::configuration, "endpoint '" + std::string(url) + "' has no host");
  return ep;
}

std::string Endpoint::url() const { return scheme + "://" + host + ":" + std::to_string(port); }

struct HttpTransport::Impl {
  std::mutex mu;
  httplib::Client client;

  Impl(const Endpoint& ep, double timeout) : client(ep.host, ep.port) {
    auto secs = static_cast<time_t>(timeout);
    auto usecs = static_cast<time_t>((timeout - static_cast<double>(secs)) * 1e6);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    client.set_keep_alive(true);
    client.set_tcp_nodelay(true);
  }
};

HttpTransport::HttpTransport(Endpoint endpoint, double timeout_seconds)
    : impl_(std::make_unique<Impl>(endpoint, timeout_seconds)) {}

HttpTransport::~HttpTransport() = default;

HttpResult HttpTransport::post(std::string_view path, const std::string& body,
                               std::string_view content_type) {
  std::lock_guard lock(impl_->mu);
  auto res = impl_->client.Post(std::string(path), body, std::string(content_type));
  if (!res) return HttpResult{0, "", httplib::to_string(res.error())};
  return HttpResult{res->status, res->body, ""};
}

HttpResult http_get(const Endpoint& endpoint, const std::string& path_and_query, const std::string& accept) {
  httplib::Client client(endpoint.host, endpoint.port);
  client.set_read_timeout(30, 0);
  auto res = client.Get(path_and_query, httplib::Headers{{"Accept", accept}});
  if (!res) return HttpResult{0, "", httplib::to_string(res.error())};
  return HttpResult{res->status, res->body, ""};
}

std::string encode_query(const std::vector<std::pair<std::string, std::string>>& params) {
  std::string out;
  for (const auto& [k, v] : params) {
    if (!out.empty()) out += '&';
    out += httplib::detail::encode_query_param(k) + "=" + httplib::detail::encode_query_param(v);
  }
  return out;
}

}  // namespace scitrace
