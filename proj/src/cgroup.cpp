#include "scitrace/cgroup.hpp"

#include <unistd.h>

#include <algorithm>
#include <limits>
#include <system_error>

#include "scitrace/error.hpp"
#include "scitrace/util.hpp"

namespace scitrace::cgroup {

namespace {

constexpr std::size_t kMaxQuotedLine = 80;

std::string quote_line(std::string_view line) {
  std::string out;
  for (char c : line.substr(0, kMaxQuotedLine)) {
    out.push_back(static_cast<unsigned char>(c) >= 0x20 && static_cast<unsigned char>(c) < 0x7f ? c : '?');
  }
  if (line.size() > kMaxQuotedLine) out += "...";
  return out;
}

[[noreturn]] void parse_fail(std::string_view source, std::size_t line_no, std::string_view line,
                             std::string_view why) {
  throw Error(Errc::parse_error, std::string(source) + ":" + std::to_string(line_no) + ": " +
                                     std::string(why) + ": '" + quote_line(line) + "'");
}

std::string job_dir_name(std::uint64_t job_id) { return "job_" + std::to_string(job_id); }

bool is_dir(const fs::path& p) {
  std::error_code ec;
  return fs::is_directory(p, ec);
}

void require_readable_dir(const fs::path& p) {
  if (::access(p.c_str(), R_OK | X_OK) != 0 && errno == EACCES) {
    throw Error(Errc::permission_denied, "permission denied: " + p.string());
  }
}

std::string read_counter_file(const fs::path& p) {
  std::error_code ec;
  if (!fs::exists(p, ec)) throw Error(Errc::missing_file, "missing file: " + p.string());
  return read_file(p);
}

const std::uint64_t* find_key(const std::vector<std::pair<std::string, std::uint64_t>>& kv,
                              std::string_view key) {
  for (const auto& [k, v] : kv) {
    if (k == key) return &v;
  }
  return nullptr;
}

std::uint64_t require_key(const std::vector<std::pair<std::string, std::uint64_t>>& kv,
                          std::initializer_list<std::string_view> keys, const fs::path& file) {
  for (auto key : keys) {
    if (const auto* v = find_key(kv, key)) return *v;
  }
  std::string names;
  for (auto key : keys) names += (names.empty() ? "" : "/") + std::string(key);
  throw Error(Errc::parse_error, file.string() + ": missing key " + names);
}

}  // namespace

std::string_view to_string(Version v) { return v == Version::v1 ? "v1" : "v2"; }

fs::path v1_memory_dir(const fs::path& root, std::uint64_t uid, std::uint64_t job_id) {
  return root / "memory" / "slurm" / ("uid_" + std::to_string(uid)) / job_dir_name(job_id);
}

fs::path v1_cpu_dir(const fs::path& root, std::uint64_t uid, std::uint64_t job_id) {
  return root / "cpu,cpuacct" / "slurm" / ("uid_" + std::to_string(uid)) / job_dir_name(job_id);
}

fs::path v2_job_dir(const fs::path& root, std::uint64_t uid, std::uint64_t job_id,
                    std::string_view pattern) {
  std::string rel(pattern);
  auto replace = [&](std::string_view token, const std::string& value) {
    for (auto pos = rel.find(token); pos != std::string::npos; pos = rel.find(token, pos + value.size())) {
      rel.replace(pos, token.size(), value);
    }
  };
  replace("{job}", std::to_string(job_id));
  replace("{uid}", std::to_string(uid));
  return root / rel;
}

Layout resolve_layout(const fs::path& root, std::uint64_t uid, std::uint64_t job_id,
                      std::string_view v2_pattern) {
  if (!is_dir(root)) throw Error(Errc::not_found, "cgroup root not found: " + root.string());
  require_readable_dir(root);

  auto try_v2 = [&]() -> std::optional<Layout> {
    fs::path dir = v2_job_dir(root, uid, job_id, v2_pattern);
    if (!is_dir(dir)) return std::nullopt;
    require_readable_dir(dir);
    return Layout{Version::v2, root, dir, dir, dir / "cgroup.procs"};
  };
  auto try_v1 = [&]() -> std::optional<Layout> {
    fs::path mem = v1_memory_dir(root, uid, job_id);
    fs::path cpu = v1_cpu_dir(root, uid, job_id);
    if (!is_dir(mem) || !is_dir(cpu)) return std::nullopt;
    require_readable_dir(mem);
    require_readable_dir(cpu);
    return Layout{Version::v1, root, mem, cpu, mem / "cgroup.procs"};
  };

  std::error_code ec;
  bool unified = fs::exists(root / "cgroup.controllers", ec);
  auto layout = unified ? try_v2() : try_v1();
  if (!layout) layout = unified ? try_v1() : try_v2();
  if (!layout) {
    throw Error(Errc::not_found, "no cgroup directory for uid " + std::to_string(uid) + " job " +
                                     std::to_string(job_id) + " under " + root.string());
  }
  return *layout;
}

std::vector<std::pair<std::string, std::uint64_t>> parse_flat_keyed(std::string_view content,
                                                                   std::string_view source) {
  std::vector<std::pair<std::string, std::uint64_t>> out;
  std::size_t line_no = 0;
  for (auto line : split(content, '\n')) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto body = trim(line);
    auto space = body.find_first_of(" \t");
    if (space == std::string_view::npos) parse_fail(source, line_no, line, "expected '<key> <value>'");
    auto key = body.substr(0, space);
    auto value_text = trim(body.substr(space + 1));
    if (value_text.find_first_of(" \t") != std::string_view::npos) {
      parse_fail(source, line_no, line, "expected '<key> <value>'");
    }
    auto value = parse_u64(value_text);
    if (!value) parse_fail(source, line_no, line, "value is not a non-negative integer");
    out.emplace_back(std::string(key), *value);
  }
  return out;
}

std::uint64_t parse_single_value(std::string_view content, std::string_view source) {
  auto body = trim(content);
  auto value = parse_u64(body);
  if (!value) parse_fail(source, 1, content, "expected a single non-negative integer");
  return *value;
}

std::vector<std::int64_t> parse_procs(std::string_view content, std::string_view source) {
  std::vector<std::int64_t> pids;
  std::size_t line_no = 0;
  for (auto line : split(content, '\n')) {
    ++line_no;
    auto body = trim(line);
    if (body.empty()) continue;
    auto value = parse_u64(body);
    if (!value || *value == 0 || *value > static_cast<std::uint64_t>(std::numeric_limits<std::int32_t>::max())) {
      parse_fail(source, line_no, line, "expected a positive pid");
    }
    pids.push_back(static_cast<std::int64_t>(*value));
  }
  std::sort(pids.begin(), pids.end());
  pids.erase(std::unique(pids.begin(), pids.end()), pids.end());
  return pids;
}

MemoryCounters read_memory(const Layout& layout) {
  MemoryCounters out;
  fs::path stat = layout.memory_path / "memory.stat";
  auto kv = parse_flat_keyed(read_counter_file(stat), stat.string());
  if (layout.version == Version::v1) {
    out.rss_bytes = require_key(kv, {"total_rss", "rss"}, stat);
    out.cache_bytes = require_key(kv, {"total_cache", "cache"}, stat);
    fs::path usage = layout.memory_path / "memory.usage_in_bytes";
    out.memory_current_bytes = parse_single_value(read_counter_file(usage), usage.string());
  } else {
    out.rss_bytes = require_key(kv, {"anon"}, stat);
    out.cache_bytes = require_key(kv, {"file"}, stat);
    fs::path current = layout.memory_path / "memory.current";
    out.memory_current_bytes = parse_single_value(read_counter_file(current), current.string());
  }
  return out;
}

std::uint64_t read_cpu(const Layout& layout) {
  if (layout.version == Version::v1) {
    fs::path usage = layout.cpu_path / "cpuacct.usage";
    return parse_single_value(read_counter_file(usage), usage.string());
  }
  fs::path stat = layout.cpu_path / "cpu.stat";
  auto kv = parse_flat_keyed(read_counter_file(stat), stat.string());
  std::uint64_t usec = require_key(kv, {"usage_usec"}, stat);
  if (usec > std::numeric_limits<std::uint64_t>::max() / 1000) {
    throw Error(Errc::parse_error, stat.string() + ": usage_usec overflows nanoseconds");
  }
  return usec * 1000;
}

std::vector<std::int64_t> list_procs(const Layout& layout) {
  return parse_procs(read_counter_file(layout.procs_file), layout.procs_file.string());
}

std::uint64_t count_open_files(const fs::path& proc_root, const std::vector<std::int64_t>& pids) {
  std::uint64_t total = 0;
  for (auto pid : pids) {
    std::error_code ec;
    fs::directory_iterator it(proc_root / std::to_string(pid) / "fd", ec);
    if (ec) continue;
    std::uint64_t n = 0;
    for (auto end = fs::directory_iterator(); it != end; it.increment(ec)) {
      if (ec) break;
      ++n;
    }
    if (!ec) total += n;
  }
  return total;
}

CgroupSnapshot snapshot(const Layout& layout, const fs::path& proc_root, const Clock& clock) {
  CgroupSnapshot snap;
  snap.taken_unix_nano = clock.now();
  try {
    auto mem = read_memory(layout);
    snap.rss_bytes = mem.rss_bytes;
    snap.cache_bytes = mem.cache_bytes;
    snap.memory_current_bytes = mem.memory_current_bytes;
    snap.cpu_usage_ns_cumulative = read_cpu(layout);
    auto pids = list_procs(layout);
    snap.pid_count = pids.size();
    snap.open_files = count_open_files(proc_root, pids);
  } catch (const Error& e) {
    throw Error(e.code(), "snapshot of " + layout.memory_path.string() + ": " + e.what());
  }
  return snap;
}

}  // namespace scitrace::cgroup
