#pragma once

#include <cstdint>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "scitrace/clock.hpp"
#include "scitrace/error.hpp"
#include "scitrace/model.hpp"
#include "scitrace/util.hpp"

namespace scitrace::trace {

inline constexpr std::string_view kTraceparentEnv = "TRACEPARENT";
inline constexpr std::string_view kStateDirEnv = "SCITRACE_STATE_DIR";
inline constexpr std::size_t kTraceparentLength = 55;
inline constexpr std::uint8_t kSampledFlags = 0x01;

enum class ParseFailure { segment_count, length, bad_hex, zero_trace_id, zero_span_id, unknown_version };

std::string_view to_string(ParseFailure f);

class TraceparentError : public Error {
 public:
  TraceparentError(ParseFailure failure, std::size_t position, const std::string& detail);

  ParseFailure failure() const noexcept { return failure_; }
  // Byte offset into the input where the problem was found.
  std::size_t position() const noexcept { return position_; }

 private:
  ParseFailure failure_;
  std::size_t position_;
};

TraceContext new_trace(const RandomSource& rng);
TraceContext child_context(const TraceContext& parent, const RandomSource& rng);

// "00-<32 hex>-<16 hex>-<2 hex>", lowercase.
std::string format_traceparent(const TraceContext& ctx);
TraceContext parse_traceparent(std::string_view s);

struct PropagationEnvelope {
  std::string env_var_name{kTraceparentEnv};
  std::string value;

  // `TRACEPARENT=<value>` for `export $(...)` in job scripts.
  std::string export_line() const { return env_var_name + "=" + value; }
};

// Open spans persisted across CLI invocations: newline-delimited JSON records
// {"handle":..,"span":..} appended under an advisory lock. The newest record
// for a handle is authoritative. Closed spans also go to an outbox file that
// exporters drain.
class SpanStateFile {
 public:
  explicit SpanStateFile(std::filesystem::path dir);

  // Directory from $SCITRACE_STATE_DIR, else the system temp directory.
  static SpanStateFile from_environment(const EnvironmentView& env);

  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path spans_path() const { return dir_ / "scitrace-spans.ndjson"; }
  std::filesystem::path outbox_path() const { return dir_ / "scitrace-outbox.ndjson"; }

  void record(const std::string& handle, const Span& span);
  std::optional<Span> find(const std::string& handle) const;

  void enqueue_export(const Span& span);
  std::vector<Span> drain_outbox();

 private:
  std::filesystem::path dir_;
};

struct SpanStartOptions {
  bool force_new_trace = false;
  std::optional<JobIdentity> job;
};

struct StartedSpan {
  Span span;
  PropagationEnvelope envelope;
  std::string handle;
};

// Inherits the trace from TRACEPARENT when present (parent = its span id),
// otherwise starts a new trace. A malformed inherited TRACEPARENT is an error
// unless force_new_trace is set.
StartedSpan span_start(std::string_view name, SpanKind kind, const TagSet& attrs,
                       const EnvironmentView& env, const Clock& clock, const RandomSource& rng,
                       SpanStateFile& state, const SpanStartOptions& options = {});

// Errc::unknown_span for an unknown handle, Errc::double_end if already closed.
Span span_end(SpanStateFile& state, const std::string& handle, SpanStatus status, const Clock& clock);

}  // namespace scitrace::trace
