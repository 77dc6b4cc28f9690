#pragma once

#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>
#include <string_view>

namespace scitrace {

struct HttpResult {
  int status = 0;             // 0 when the request never got a response
  std::string body;
  std::string transport_error;  // non-empty on connection/IO failure

  bool transport_failed() const { return status == 0; }
};

class Transport {
 public:
  virtual ~Transport() = default;
  virtual HttpResult post(std::string_view path, const std::string& body,
                          std::string_view content_type = "application/json") = 0;
};

struct Endpoint {
  std::string scheme = "http";
  std::string host = "127.0.0.1";
  int port = 4318;

  // Accepts "http://host:port", "host:port" or "http://host" (port 80).
  static Endpoint parse(std::string_view url);
  std::string url() const;
};

class HttpTransport final : public Transport {
 public:
  explicit HttpTransport(Endpoint endpoint, double timeout_seconds = 5.0);
  ~HttpTransport() override;

  HttpResult post(std::string_view path, const std::string& body,
                  std::string_view content_type = "application/json") override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Adapts a callable; used for fault injection and in-process wiring.
class FunctionTransport final : public Transport {
 public:
  using Fn = std::function<HttpResult(std::string_view, const std::string&)>;
  explicit FunctionTransport(Fn fn) : fn_(std::move(fn)) {}

  HttpResult post(std::string_view path, const std::string& body, std::string_view) override {
    return fn_(path, body);
  }

 private:
  Fn fn_;
};

// Simple blocking GET for the query endpoint.
HttpResult http_get(const Endpoint& endpoint, const std::string& path_and_query,
                    const std::string& accept = "application/json");

// "k1=v1&k2=v2" with percent-encoded keys and values.
std::string encode_query(const std::vector<std::pair<std::string, std::string>>& params);

}  // namespace scitrace
