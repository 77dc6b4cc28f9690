#include "scitrace/util.hpp"

#include <cctype>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include "scitrace/error.hpp"

namespace scitrace {

std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::invalid_argument: return "invalid-argument";
    case Errc::invalid_key: return "invalid-key";
    case Errc::conflict: return "conflict";
    case Errc::not_found: return "not-found";
    case Errc::permission_denied: return "permission-denied";
    case Errc::missing_file: return "missing-file";
    case Errc::parse_error: return "parse-error";
    case Errc::malformed_traceparent: return "malformed-traceparent";
    case Errc::unknown_span: return "unknown-span";
    case Errc::double_end: return "double-end";
    case Errc::configuration: return "configuration";
    case Errc::usage: return "usage";
    case Errc::io: return "io";
    case Errc::invalid_range: return "invalid-range";
    case Errc::schema: return "schema";
    case Errc::unavailable: return "unavailable";
  }
  return "unknown";
}

UnixNanos SystemClock::now() const {
  auto since = std::chrono::system_clock::now().time_since_epoch();
  return static_cast<UnixNanos>(std::chrono::duration_cast<Nanos>(since).count());
}

void SystemClock::sleep_for(Nanos d) const { std::this_thread::sleep_for(d); }

void ManualClock::sleep_for(Nanos d) const {
  now_.fetch_add(static_cast<UnixNanos>(d.count()));
}

RandomSource seeded_random(std::uint64_t seed) {
  return [engine = std::mt19937_64(seed)]() mutable { return engine(); };
}

RandomSource system_random() {
  std::random_device rd;
  std::uint64_t seed = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
  seed ^= static_cast<std::uint64_t>(
      std::chrono::steady_clock::now().time_since_epoch().count());
  return seeded_random(seed);
}

std::string to_hex(std::span<const std::uint8_t> bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (auto b : bytes) {
    out.push_back(kDigits[b >> 4]);
    out.push_back(kDigits[b & 0x0f]);
  }
  return out;
}

namespace {

int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  return -1;
}

}  // namespace

std::optional<std::vector<std::uint8_t>> from_hex(std::string_view hex) {
  if (hex.size() % 2 != 0) return std::nullopt;
  std::vector<std::uint8_t> out(hex.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    int hi = hex_value(hex[2 * i]);
    int lo = hex_value(hex[2 * i + 1]);
    if (hi < 0 || lo < 0) return std::nullopt;
    out[i] = static_cast<std::uint8_t>(hi << 4 | lo);
  }
  return out;
}

Nanos parse_duration(std::string_view text) {
  text = trim(text);
  std::size_t split_at = 0;
  while (split_at < text.size() &&
         (std::isdigit(static_cast<unsigned char>(text[split_at])) || text[split_at] == '.')) {
    ++split_at;
  }
  std::string number(text.substr(0, split_at));
  std::string_view unit = text.substr(split_at);
  if (number.empty()) {
    throw Error(Errc::invalid_argument, "invalid duration '" + std::string(text) + "'");
  }
  char* end = nullptr;
  double value = std::strtod(number.c_str(), &end);
  if (end != number.c_str() + number.size() || !std::isfinite(value)) {
    throw Error(Errc::invalid_argument, "invalid duration '" + std::string(text) + "'");
  }
  double scale = 1e9;
  if (unit.empty() || unit == "s") scale = 1e9;
  else if (unit == "ms") scale = 1e6;
  else if (unit == "us") scale = 1e3;
  else if (unit == "ns") scale = 1.0;
  else if (unit == "m") scale = 60e9;
  else if (unit == "h") scale = 3600e9;
  else throw Error(Errc::invalid_argument, "invalid duration unit in '" + std::string(text) + "'");
  return Nanos(static_cast<std::int64_t>(std::llround(value * scale)));
}

std::string format_duration(Nanos d) {
  auto n = d.count();
  if (n % 1'000'000'000 == 0) return std::to_string(n / 1'000'000'000) + "s";
  if (n % 1'000'000 == 0) return std::to_string(n / 1'000'000) + "ms";
  if (n % 1'000 == 0) return std::to_string(n / 1'000) + "us";
  return std::to_string(n) + "ns";
}

std::optional<std::uint64_t> parse_u64(std::string_view text) {
  if (text.empty()) return std::nullopt;
  std::uint64_t value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value, 10);
  if (ec != std::errc() || ptr != text.data() + text.size()) return std::nullopt;
  return value;
}

std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    int err = errno;
    if (err == EACCES || err == EPERM) {
      throw Error(Errc::permission_denied, "permission denied: " + path.string());
    }
    throw Error(Errc::missing_file, "cannot open " + path.string() + ": " + std::strerror(err));
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io, "cannot write " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw Error(Errc::io, "short write to " + path.string());
}

}  // namespace scitrace

extern "C" char** environ;

namespace scitrace {

EnvironmentView process_environment() {
  EnvironmentView env;
  for (char** e = environ; e != nullptr && *e != nullptr; ++e) {
    std::string_view entry(*e);
    auto eq = entry.find('=');
    if (eq == std::string_view::npos) continue;
    env.emplace(std::string(entry.substr(0, eq)), std::string(entry.substr(eq + 1)));
  }
  return env;
}

std::optional<std::string> lookup(const EnvironmentView& env, std::string_view key) {
  auto it = env.find(key);
  if (it == env.end()) return std::nullopt;
  return it->second;
}

}  // namespace scitrace
