#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace studyrig {

// All persisted timestamps are UTC with millisecond precision.
using Millis = std::chrono::milliseconds;
using TimePoint = std::chrono::sys_time<Millis>;

class Clock {
 public:
  virtual ~Clock() = default;
  virtual TimePoint now() const = 0;
};

class SystemClock final : public Clock {
 public:
  TimePoint now() const override;
};

// Manually driven clock for tests and the simulator's virtual-clock mode.
class VirtualClock final : public Clock {
 public:
  explicit VirtualClock(TimePoint start);
  TimePoint now() const override;
  void advance(Millis delta);
  void set(TimePoint t);

 private:
  std::atomic<std::int64_t> ms_;
};

// 2026-03-22T10:00:00.000Z
std::string to_iso8601(TimePoint t);
std::optional<TimePoint> parse_iso8601(std::string_view text);

// YYYY-MM-DD, used by the {{date}} prompt variable.
std::string to_date_string(TimePoint t);

// Default epoch for virtual clocks: 2026-01-01T00:00:00Z.
TimePoint virtual_epoch();

}  // namespace studyrig
