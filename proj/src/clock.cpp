#include "studyrig/clock.hpp"

#include <cstdio>

namespace studyrig {

namespace chr = std::chrono;

TimePoint SystemClock::now() const {
  return chr::time_point_cast<Millis>(chr::system_clock::now());
}

VirtualClock::VirtualClock(TimePoint start) : ms_(start.time_since_epoch().count()) {}

TimePoint VirtualClock::now() const { return TimePoint{Millis{ms_.load()}}; }

void VirtualClock::advance(Millis delta) { ms_.fetch_add(delta.count()); }

void VirtualClock::set(TimePoint t) { ms_.store(t.time_since_epoch().count()); }

std::string to_iso8601(TimePoint t) {
  const auto day = chr::floor<chr::days>(t);
  const chr::year_month_day ymd{day};
  const auto in_day = t - day;
  const auto h = chr::duration_cast<chr::hours>(in_day);
  const auto m = chr::duration_cast<chr::minutes>(in_day - h);
  const auto s = chr::duration_cast<chr::seconds>(in_day - h - m);
  const auto ms = in_day - h - m - s;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d:%02d.%03dZ",
                static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                static_cast<unsigned>(ymd.day()), static_cast<int>(h.count()),
                static_cast<int>(m.count()), static_cast<int>(s.count()),
                static_cast<int>(ms.count()));
  return buf;
}

std::optional<TimePoint> parse_iso8601(std::string_view text) {
  int y = 0;
  unsigned mo = 0, d = 0;
  int h = 0, mi = 0, s = 0, ms = 0;
  const std::string owned(text);
  int consumed = 0;
  if (std::sscanf(owned.c_str(), "%4d-%2u-%2uT%2d:%2d:%2d%n", &y, &mo, &d, &h, &mi, &s,
                  &consumed) != 6) {
    return std::nullopt;
  }
  std::string_view rest = text.substr(static_cast<std::size_t>(consumed));
  if (!rest.empty() && rest.front() == '.') {
    rest.remove_prefix(1);
    int digits = 0;
    while (!rest.empty() && rest.front() >= '0' && rest.front() <= '9') {
      if (digits < 3) ms = ms * 10 + (rest.front() - '0');
      ++digits;
      rest.remove_prefix(1);
    }
    if (digits == 0) return std::nullopt;
    for (int i = digits; i < 3; ++i) ms *= 10;
  }
  if (rest != "Z") return std::nullopt;
  const chr::year_month_day ymd{chr::year{y}, chr::month{mo}, chr::day{d}};
  if (!ymd.ok() || h > 23 || mi > 59 || s > 60) return std::nullopt;
  return TimePoint{chr::sys_days{ymd}} + chr::hours{h} + chr::minutes{mi} +
         chr::seconds{s} + Millis{ms};
}

std::string to_date_string(TimePoint t) { return to_iso8601(t).substr(0, 10); }

TimePoint virtual_epoch() {
  return TimePoint{chr::sys_days{chr::year{2026} / chr::January / 1}};
}

}  // namespace studyrig
