#pragma once

// Per-job cgroup counter reader for SLURM-managed cgroup v1 and v2 trees.
//
// v1: <root>/memory/slurm/uid_<uid>/job_<job>/{memory.stat,memory.usage_in_bytes,cgroup.procs}
//     <root>/cpu,cpuacct/slurm/uid_<uid>/job_<job>/cpuacct.usage
// v2: <root>/system.slice/slurmstepd.scope/job_<job>/{memory.current,memory.stat,cpu.stat,cgroup.procs}
//
// The root and the procfs root are configurable so fixture trees can stand in
// for the kernel.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "scitrace/clock.hpp"
#include "scitrace/model.hpp"

namespace scitrace::cgroup {

namespace fs = std::filesystem;

inline constexpr std::string_view kDefaultRoot = "/sys/fs/cgroup";
inline constexpr std::string_view kDefaultProcRoot = "/proc";
// {job} is replaced by the job id; {uid} by the numeric user id.
inline constexpr std::string_view kDefaultV2Pattern = "system.slice/slurmstepd.scope/job_{job}";

enum class Version { v1, v2 };

std::string_view to_string(Version v);

struct Layout {
  Version version = Version::v1;
  fs::path root;
  fs::path memory_path;
  fs::path cpu_path;
  fs::path procs_file;
};

fs::path v1_memory_dir(const fs::path& root, std::uint64_t uid, std::uint64_t job_id);
fs::path v1_cpu_dir(const fs::path& root, std::uint64_t uid, std::uint64_t job_id);
fs::path v2_job_dir(const fs::path& root, std::uint64_t uid, std::uint64_t job_id,
                    std::string_view pattern = kDefaultV2Pattern);

// v2 when <root>/cgroup.controllers exists, v1 otherwise. Errc::not_found when
// the job directory is absent, Errc::permission_denied when it is unreadable.
Layout resolve_layout(const fs::path& root, std::uint64_t uid, std::uint64_t job_id,
                      std::string_view v2_pattern = kDefaultV2Pattern);

struct MemoryCounters {
  std::uint64_t rss_bytes = 0;
  std::uint64_t cache_bytes = 0;
  std::uint64_t memory_current_bytes = 0;
  bool operator==(const MemoryCounters&) const = default;
};

MemoryCounters read_memory(const Layout& layout);
std::uint64_t read_cpu(const Layout& layout);
std::vector<std::int64_t> list_procs(const Layout& layout);

// Sum of fd-directory entries; pids whose fd directory is missing or
// unreadable contribute zero.
std::uint64_t count_open_files(const fs::path& proc_root, const std::vector<std::int64_t>& pids);

CgroupSnapshot snapshot(const Layout& layout, const fs::path& proc_root, const Clock& clock);

// Parsers over file contents, exposed for fuzzing. `source` names the file in
// error messages. All throw Error(Errc::parse_error) and never anything else.
std::vector<std::pair<std::string, std::uint64_t>> parse_flat_keyed(std::string_view content,
                                                                   std::string_view source);
std::uint64_t parse_single_value(std::string_view content, std::string_view source);
std::vector<std::int64_t> parse_procs(std::string_view content, std::string_view source);

}  // namespace scitrace::cgroup
