#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>

#include "scitrace/model.hpp"
#include "scitrace/util.hpp"

namespace testing {

namespace fs = std::filesystem;

// Scratch directory removed on destruction.
struct TempDir {
  fs::path path;

  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "scitrace-test-XXXXXX").string();
    if (!::mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  fs::path operator/(const std::string& rel) const { return path / rel; }
};

inline void put(const fs::path& p, const std::string& content) {
  fs::create_directories(p.parent_path());
  scitrace::write_file(p, content);
}

inline scitrace::JobIdentity job(std::uint64_t id, std::string host = "node1", std::uint64_t uid = 1000) {
  scitrace::JobIdentity j;
  j.uid = uid;
  j.job_id = id;
  j.hostname = std::move(host);
  return j;
}

inline scitrace::MetricSample gauge(std::string name, std::uint64_t t, double v, scitrace::JobIdentity j,
                                    std::string unit = "By") {
  scitrace::MetricSample s;
  s.name = std::move(name);
  s.unit = std::move(unit);
  s.time_unix_nano = t;
  s.value = v;
  s.kind = scitrace::MetricKind::gauge;
  s.job = std::move(j);
  return s;
}

}  // namespace testing
