#include "scitrace/trace.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cstring>
#include <fstream>
#include <sstream>

#include "scitrace/wire.hpp"

namespace scitrace::trace {

namespace fs = std::filesystem;

namespace {

template <std::size_t N>
void fill_random(std::array<std::uint8_t, N>& bytes, const RandomSource& rng) {
  for (std::size_t i = 0; i < N; i += 8) {
    std::uint64_t word = rng();
    for (std::size_t j = 0; j < 8 && i + j < N; ++j) {
      bytes[i + j] = static_cast<std::uint8_t>(word >> (8 * j));
    }
  }
}

SpanId random_span_id(const RandomSource& rng) {
  SpanId id;
  do {
    fill_random(id.bytes, rng);
  } while (id.is_zero());
  return id;
}

// RAII advisory lock on a file, created on demand.
class LockedFile {
 public:
  LockedFile(const fs::path& path, int lock_op) {
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd_ < 0) throw Error(Errc::io, "cannot open " + path.string() + ": " + std::strerror(errno));
    while (::flock(fd_, lock_op) != 0) {
      if (errno != EINTR) {
        ::close(fd_);
        throw Error(Errc::io, "cannot lock " + path.string());
      }
    }
  }
  ~LockedFile() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  LockedFile(const LockedFile&) = delete;
  LockedFile& operator=(const LockedFile&) = delete;

  void append(const std::string& data) {
    const char* p = data.data();
    std::size_t left = data.size();
    while (left > 0) {
      ssize_t n = ::write(fd_, p, left);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw Error(Errc::io, std::string("write failed: ") + std::strerror(errno));
      }
      p += n;
      left -= static_cast<std::size_t>(n);
    }
  }

  std::string read_all() {
    std::string out;
    char buf[8192];
    ::lseek(fd_, 0, SEEK_SET);
    while (true) {
      ssize_t n = ::read(fd_, buf, sizeof buf);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw Error(Errc::io, std::string("read failed: ") + std::strerror(errno));
      }
      if (n == 0) break;
      out.append(buf, static_cast<std::size_t>(n));
    }
    return out;
  }

  void truncate() {
    if (::ftruncate(fd_, 0) != 0) throw Error(Errc::io, "truncate failed");
  }

 private:
  int fd_ = -1;
};

nlohmann::json span_to_json(const Span& span) {
  return wire::encode_spans(std::span<const Span>(&span, 1));
}

std::optional<Span> span_from_json(const nlohmann::json& j) {
  try {
    auto decoded = wire::decode_spans(j);
    if (decoded.records.size() != 1) return std::nullopt;
    return decoded.records.front();
  } catch (const Error&) {
    return std::nullopt;
  }
}

}  // namespace

std::string_view to_string(ParseFailure f) {
  switch (f) {
    case ParseFailure::segment_count: return "wrong segment count";
    case ParseFailure::length: return "wrong segment length";
    case ParseFailure::bad_hex: return "invalid hex";
    case ParseFailure::zero_trace_id: return "all-zero trace id";
    case ParseFailure::zero_span_id: return "all-zero span id";
    case ParseFailure::unknown_version: return "unknown version";
  }
  return "malformed";
}

TraceparentError::TraceparentError(ParseFailure failure, std::size_t position, const std::string& detail)
    : Error(Errc::malformed_traceparent, "malformed traceparent at offset " + std::to_string(position) +
                                             ": " + std::string(to_string(failure)) +
                                             (detail.empty() ? "" : " (" + detail + ")")),
      failure_(failure),
      position_(position) {}

TraceContext new_trace(const RandomSource& rng) {
  TraceContext ctx;
  do {
    fill_random(ctx.trace_id.bytes, rng);
  } while (ctx.trace_id.is_zero());
  ctx.span_id = random_span_id(rng);
  ctx.flags = kSampledFlags;
  return ctx;
}

TraceContext child_context(const TraceContext& parent, const RandomSource& rng) {
  TraceContext child = parent;
  do {
    child.span_id = random_span_id(rng);
  } while (child.span_id == parent.span_id);
  return child;
}

std::string format_traceparent(const TraceContext& ctx) {
  std::string out = "00-";
  out += ctx.trace_id.hex();
  out += '-';
  out += ctx.span_id.hex();
  out += '-';
  std::uint8_t flags[1] = {ctx.flags};
  out += to_hex(flags);
  return out;
}

TraceContext parse_traceparent(std::string_view s) {
  auto segments = split(s, '-');
  if (segments.size() != 4) {
    throw TraceparentError(ParseFailure::segment_count, 0,
                           "expected 4 segments, found " + std::to_string(segments.size()));
  }
  const std::size_t lengths[4] = {2, 32, 16, 2};
  std::size_t offset = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    if (segments[i].size() != lengths[i]) {
      throw TraceparentError(ParseFailure::length, offset,
                             "segment " + std::to_string(i) + " has " + std::to_string(segments[i].size()) +
                                 " chars, expected " + std::to_string(lengths[i]));
    }
    for (std::size_t k = 0; k < segments[i].size(); ++k) {
      char c = segments[i][k];
      bool hex = (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f');
      if (!hex) throw TraceparentError(ParseFailure::bad_hex, offset + k, "");
    }
    offset += segments[i].size() + 1;
  }
  if (segments[0] != "00") {
    throw TraceparentError(ParseFailure::unknown_version, 0, "version " + std::string(segments[0]));
  }
  TraceContext ctx;
  ctx.trace_id = *TraceId::from_hex(segments[1]);
  ctx.span_id = *SpanId::from_hex(segments[2]);
  ctx.flags = (*from_hex(segments[3]))[0];
  if (ctx.trace_id.is_zero()) throw TraceparentError(ParseFailure::zero_trace_id, 3, "");
  if (ctx.span_id.is_zero()) throw TraceparentError(ParseFailure::zero_span_id, 36, "");
  return ctx;
}

SpanStateFile::SpanStateFile(fs::path dir) : dir_(std::move(dir)) {
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (ec) throw Error(Errc::io, "cannot create state dir " + dir_.string() + ": " + ec.message());
}

SpanStateFile SpanStateFile::from_environment(const EnvironmentView& env) {
  if (auto dir = lookup(env, kStateDirEnv); dir && !dir->empty()) return SpanStateFile(*dir);
  return SpanStateFile(fs::temp_directory_path());
}

void SpanStateFile::record(const std::string& handle, const Span& span) {
  nlohmann::json rec{{"handle", handle}, {"span", span_to_json(span)}};
  LockedFile file(spans_path(), LOCK_EX);
  file.append(rec.dump() + "\n");
}

std::optional<Span> SpanStateFile::find(const std::string& handle) const {
  LockedFile file(spans_path(), LOCK_SH);
  std::string content = file.read_all();
  std::optional<Span> found;
  std::istringstream in(content);
  for (std::string line; std::getline(in, line);) {
    auto rec = nlohmann::json::parse(line, nullptr, /*allow_exceptions=*/false);
    if (!rec.is_object() || !rec.contains("handle") || rec["handle"] != handle) continue;
    if (auto span = span_from_json(rec["span"])) found = std::move(span);
  }
  return found;
}

void SpanStateFile::enqueue_export(const Span& span) {
  LockedFile file(outbox_path(), LOCK_EX);
  file.append(span_to_json(span).dump() + "\n");
}

std::vector<Span> SpanStateFile::drain_outbox() {
  LockedFile file(outbox_path(), LOCK_EX);
  std::string content = file.read_all();
  file.truncate();
  std::vector<Span> spans;
  std::istringstream in(content);
  for (std::string line; std::getline(in, line);) {
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (auto span = span_from_json(j)) spans.push_back(std::move(*span));
  }
  return spans;
}

StartedSpan span_start(std::string_view name, SpanKind kind, const TagSet& attrs,
                       const EnvironmentView& env, const Clock& clock, const RandomSource& rng,
                       SpanStateFile& state, const SpanStartOptions& options) {
  if (name.empty()) throw Error(Errc::invalid_argument, "span name is empty");
  Span span;
  span.name = std::string(name);
  span.kind = kind;
  span.attributes = attrs;
  span.job = options.job;
  span.start_unix_nano = clock.now();

  std::optional<TraceContext> inherited;
  if (auto value = lookup(env, kTraceparentEnv); value && !value->empty()) {
    try {
      inherited = parse_traceparent(*value);
    } catch (const TraceparentError&) {
      if (!options.force_new_trace) throw;
    }
  }
  if (inherited) {
    span.context = child_context(*inherited, rng);
    span.parent_span_id = inherited->span_id;
  } else {
    span.context = new_trace(rng);
  }

  StartedSpan out;
  out.handle = span.context.span_id.hex();
  out.envelope.value = format_traceparent(span.context);
  out.span = span;
  state.record(out.handle, span);
  return out;
}

Span span_end(SpanStateFile& state, const std::string& handle, SpanStatus status, const Clock& clock) {
  auto span = state.find(handle);
  if (!span) throw Error(Errc::unknown_span, "unknown span handle '" + handle + "'");
  if (span->closed()) throw Error(Errc::double_end, "span '" + handle + "' already ended");
  span->end_unix_nano = std::max(clock.now(), span->start_unix_nano);
  span->status = status;
  state.record(handle, *span);
  state.enqueue_export(*span);
  return *span;
}

}  // namespace scitrace::trace
