#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>

namespace scitrace {

using UnixNanos = std::uint64_t;
using Nanos = std::chrono::nanoseconds;

constexpr UnixNanos kNanosPerSecond = 1'000'000'000ULL;

class Clock {
 public:
  virtual ~Clock() = default;
  virtual UnixNanos now() const = 0;
  virtual void sleep_for(Nanos d) const = 0;
};

class SystemClock final : public Clock {
 public:
  UnixNanos now() const override;
  void sleep_for(Nanos d) const override;
};

// Time only moves when advance()/set() is called. sleep_for() advances the
// clock by the requested amount so code written against Clock runs instantly.
class ManualClock final : public Clock {
 public:
  explicit ManualClock(UnixNanos start = 1) : now_(start) {}

  UnixNanos now() const override { return now_.load(); }
  void sleep_for(Nanos d) const override;

  void set(UnixNanos t) { now_.store(t); }
  void advance(Nanos d) { now_.fetch_add(static_cast<UnixNanos>(d.count())); }

 private:
  mutable std::atomic<UnixNanos> now_;
};

// Randomness source for ids and jitter. Any callable returning 64 random bits.
using RandomSource = std::function<std::uint64_t()>;

RandomSource seeded_random(std::uint64_t seed);
RandomSource system_random();

}  // namespace scitrace
