#include <random>

#include "doctest.h"
#include "scitrace/error.hpp"
#include "scitrace/model.hpp"
#include "scitrace/trace.hpp"
#include "scitrace/util.hpp"
#include "scitrace/wire.hpp"
#include "support.hpp"

using namespace scitrace;
using nlohmann::json;

TEST_CASE("register_metric is idempotent and rejects conflicting registrations") {
  MetricRegistry reg;
  reg.register_metric("job.memory.rss", "By", MetricKind::gauge);
  CHECK_NOTHROW(reg.register_metric("job.memory.rss", "By", MetricKind::gauge));
  CHECK(reg.all().size() == 1);
  try {
    reg.register_metric("job.memory.rss", "KiBy", MetricKind::gauge);
    FAIL("expected conflict");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::conflict);
  }
  CHECK_THROWS_AS(reg.register_metric("job.memory.rss", "By", MetricKind::cumulative_counter), Error);
}

TEST_CASE("builtin registry holds every agent metric with its unit and kind") {
  struct Want {
    std::string_view name, unit;
    MetricKind kind;
  };
  const Want want[] = {
      {"job.memory.rss", "By", MetricKind::gauge},       {"job.memory.cache", "By", MetricKind::gauge},
      {"job.memory.current", "By", MetricKind::gauge},   {"job.cpu.time", "ns", MetricKind::cumulative_counter},
      {"job.cpu.utilization", "1", MetricKind::gauge},   {"job.open_files", "1", MetricKind::gauge},
      {"job.pids", "1", MetricKind::gauge},
  };
  auto& reg = MetricRegistry::builtin();
  CHECK(reg.all().size() == std::size(want));
  for (const auto& w : want) {
    auto r = reg.find(w.name);
    REQUIRE_MESSAGE(r, w.name);
    CHECK(r->unit == w.unit);
    CHECK(r->kind == w.kind);
  }
}

TEST_CASE("normalize_tag_key") {
  CHECK(normalize_tag_key("--case-number") == "case_number");
  CHECK(normalize_tag_key("STEP-NAME") == "step_name");
  CHECK(normalize_tag_key("host.name") == "host.name");
  for (const char* bad : {"--", "", "a b", "x/y", "--é"}) {
    CHECK_THROWS_AS(normalize_tag_key(bad), Error);
  }
}

TEST_CASE("normalize_tag_key is idempotent over random keys") {
  std::mt19937_64 rng(11);
  const std::string alphabet = "abcXYZ019_.-";
  for (int i = 0; i < 2000; ++i) {
    std::string k = (rng() % 2) ? "--" : "";
    auto len = 1 + rng() % 12;
    for (std::size_t j = 0; j < len; ++j) k += alphabet[rng() % alphabet.size()];
    std::string once;
    try {
      once = normalize_tag_key(k);
    } catch (const Error&) {
      continue;
    }
    CHECK(normalize_tag_key(once) == once);
  }
}

TEST_CASE("reserved tags must carry a value") {
  TagSet t;
  CHECK_THROWS_AS(t.set("case-number", ""), Error);
  t.set("case-number", "7");
  CHECK(t.get("case_number") == "7");
  t.set("free_form", "");
  CHECK(t.get("free_form") == "");
}

TEST_CASE("durations") {
  CHECK(parse_duration("250ms") == std::chrono::milliseconds(250));
  CHECK(parse_duration("5s") == std::chrono::seconds(5));
  CHECK(parse_duration("1.5") == std::chrono::milliseconds(1500));
  CHECK(parse_duration("2h") == std::chrono::hours(2));
  CHECK_THROWS(parse_duration("5 parsecs"));
  CHECK_THROWS(parse_duration(""));
  CHECK(parse_duration(format_duration(std::chrono::milliseconds(500))) == std::chrono::milliseconds(500));
}

TEST_CASE("parse_u64 is strict") {
  CHECK(parse_u64("42") == 42u);
  CHECK(parse_u64("18446744073709551615") == UINT64_MAX);
  CHECK_FALSE(parse_u64("18446744073709551616"));
  CHECK_FALSE(parse_u64("-1"));
  CHECK_FALSE(parse_u64(" 1"));
  CHECK_FALSE(parse_u64(""));
}

namespace {

MetricSample random_sample(std::mt19937_64& rng, const JobIdentity& job, const TagSet& tags) {
  static const char* names[] = {"job.memory.rss", "job.cpu.time", "job.cpu.utilization", "job.pids"};
  MetricSample s;
  s.name = names[rng() % 4];
  auto reg = MetricRegistry::builtin().find(s.name);
  s.unit = reg->unit;
  s.kind = reg->kind;
  s.time_unix_nano = 1 + rng() % (UINT64_MAX - 1);
  if (s.name == "job.cpu.utilization") {
    s.value = std::uniform_real_distribution<double>(0, 64)(rng);
  } else {
    s.value = static_cast<std::int64_t>(rng() >> 1);
  }
  s.job = job;
  s.tags = tags;
  if (rng() % 2) {
    TraceId id;
    for (auto& b : id.bytes) b = static_cast<std::uint8_t>(rng());
    id.bytes[0] |= 1;
    s.trace_id = id;
  }
  return s;
}

}  // namespace

TEST_CASE("metric payload round-trips field by field") {
  std::mt19937_64 rng(3);
  for (int round = 0; round < 200; ++round) {
    JobIdentity job = testing::job(rng() % 1000000, "host-" + std::to_string(rng() % 5), rng() % 70000);
    if (rng() % 2) job.array_task_id = rng() % 1000;
    TagSet tags;
    tags.set("case_number", std::to_string(rng() % 100));
    if (rng() % 2) tags.set("pipeline_name", "bonestrength");
    std::vector<MetricSample> in;
    auto n = 1 + rng() % 20;
    for (std::size_t i = 0; i < n; ++i) in.push_back(random_sample(rng, job, tags));
    json payload = json::parse(wire::encode_metrics(in).dump());
    auto out = wire::decode_metrics(payload);
    CHECK(out.errors.empty());
    REQUIRE(out.records.size() == in.size());
    // Points are grouped by metric on the wire; compare as multisets.
    auto key = [](const MetricSample& s) { return s.name + "/" + std::to_string(s.time_unix_nano); };
    std::multimap<std::string, MetricSample> by_key;
    for (auto& s : in) by_key.emplace(key(s), s);
    for (const auto& s : out.records) {
      auto range = by_key.equal_range(key(s));
      bool found = false;
      for (auto it = range.first; it != range.second; ++it) found = found || it->second == s;
      CHECK_MESSAGE(found, key(s));
    }
  }
}

TEST_CASE("span payload round-trips") {
  auto rng = seeded_random(5);
  for (int round = 0; round < 200; ++round) {
    auto root = trace::new_trace(rng);
    std::vector<Span> in;
    std::optional<JobIdentity> job;
    if (round % 2) job = testing::job(round);
    for (int i = 0; i < 5; ++i) {
      Span s;
      s.name = "span" + std::to_string(i);
      s.context = i == 0 ? root : trace::child_context(root, rng);
      if (i) s.parent_span_id = root.span_id;
      s.start_unix_nano = 1000 + i;
      if (i % 2 == 0) s.end_unix_nano = 5000 + i;
      s.kind = static_cast<SpanKind>(i % 4);
      s.status = static_cast<SpanStatus>(i % 3);
      s.attributes.set("step_name", "fem");
      s.job = job;
      in.push_back(s);
    }
    auto out = wire::decode_spans(json::parse(wire::encode_spans(in).dump()));
    CHECK(out.errors.empty());
    CHECK(out.records == in);
  }
}

TEST_CASE("metric payload with one bad point is partially accepted") {
  auto j = testing::job(42);
  std::vector<MetricSample> in;
  for (int i = 0; i < 6; ++i) in.push_back(testing::gauge("job.memory.rss", 100 + i, 7.8e9, j));
  for (auto& s : in) s.value = std::int64_t{7'800'000'000};
  json payload = wire::encode_metrics(in);
  payload["metrics"][0]["points"][3].erase("timeUnixNano");
  auto out = wire::decode_metrics(payload);
  CHECK(out.records.size() == 5);
  REQUIRE(out.errors.size() == 1);
  CHECK(out.errors[0].field == "metrics[0].points[3].timeUnixNano");
}

TEST_CASE("payload-level schema errors name the field") {
  auto expect_schema = [](const json& payload, const std::string& field) {
    try {
      wire::decode_metrics(payload);
      FAIL("expected schema error");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::schema);
      CHECK_MESSAGE(std::string(e.what()).find(field) != std::string::npos, e.what());
    }
  };
  expect_schema(json::object(), "resource");
  expect_schema(json{{"resource", {{"attributes", {{"job.uid", 1}, {"job.id", 2}}}}}, {"metrics", json::array()}},
                "host.name");
  expect_schema(json{{"resource", {{"attributes", {{"host.name", "n"}, {"job.uid", -1}, {"job.id", 2}}}}},
                     {"metrics", json::array()}},
                "job.uid");
}

TEST_CASE("unregistered metric names and unit mismatches are rejected per record") {
  auto j = testing::job(1);
  std::vector<MetricSample> in{testing::gauge("job.memory.rss", 10, 1, j)};
  in[0].value = std::int64_t{1};
  json payload = wire::encode_metrics(in);
  payload["metrics"].push_back(payload["metrics"][0]);
  payload["metrics"][1]["name"] = "job.memory.swap";
  payload["metrics"].push_back(payload["metrics"][0]);
  payload["metrics"][2]["unit"] = "KiBy";
  auto out = wire::decode_metrics(payload);
  CHECK(out.records.size() == 1);
  REQUIRE(out.errors.size() == 2);
  CHECK(out.errors[0].field == "metrics[1].name");
  CHECK(out.errors[1].field == "metrics[2].unit");
}

TEST_CASE("encoding refuses mixed resources") {
  std::vector<MetricSample> in{testing::gauge("job.memory.rss", 1, 1, testing::job(1)),
                               testing::gauge("job.memory.rss", 1, 1, testing::job(2))};
  CHECK_THROWS_AS(wire::encode_metrics(in), Error);
  auto groups = wire::group_by_resource(std::span<const MetricSample>(in));
  CHECK(groups.size() == 2);
}

TEST_CASE("span validation") {
  auto rng = seeded_random(1);
  Span s;
  s.name = "x";
  s.context = trace::new_trace(rng);
  s.start_unix_nano = 10;
  s.end_unix_nano = 5;
  CHECK_THROWS_AS(validate(s), Error);
  s.end_unix_nano = 10;
  CHECK_NOTHROW(validate(s));
  s.parent_span_id = s.context.span_id;
  CHECK_THROWS_AS(validate(s), Error);
}
