#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "scitrace/clock.hpp"

namespace scitrace {

std::string to_hex(std::span<const std::uint8_t> bytes);

// Lowercase hex only. Returns nullopt on odd length or non-hex characters.
std::optional<std::vector<std::uint8_t>> from_hex(std::string_view hex);

// Parses "250ms", "5s", "1m", "1h", "100us", "10ns"; a bare number is seconds.
Nanos parse_duration(std::string_view text);
std::string format_duration(Nanos d);

// Strict base-10 unsigned parse of the whole string (no sign, no spaces).
std::optional<std::uint64_t> parse_u64(std::string_view text);

std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed = 0xcbf29ce484222325ULL);

std::string_view trim(std::string_view s);
std::vector<std::string_view> split(std::string_view s, char sep);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view content);

using EnvironmentView = std::map<std::string, std::string, std::less<>>;

// Snapshot of the current process environment.
EnvironmentView process_environment();

std::optional<std::string> lookup(const EnvironmentView& env, std::string_view key);

}  // namespace scitrace
