#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <string>

#include "cmust/tensor.hpp"

namespace cmust {

// Howard Hinnant's civil date algorithms (public domain).
inline std::int64_t days_from_civil(int y, int m, int d) {
    y -= m <= 2;
    std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    unsigned yoe = static_cast<unsigned>(y - era * 400);
    unsigned doy = static_cast<unsigned>((153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1);
    unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

struct CivilDate {
    int year, month, day;
};

inline CivilDate civil_from_days(std::int64_t z) {
    z += 719468;
    std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    unsigned doe = static_cast<unsigned>(z - era * 146097);
    unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    std::int64_t y = static_cast<std::int64_t>(yoe) + era * 400;
    unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    unsigned mp = (5 * doy + 2) / 153;
    unsigned d = doy - (153 * mp + 2) / 5 + 1;
    unsigned m = mp + (mp < 10 ? 3 : -9);
    return {static_cast<int>(y + (m <= 2)), static_cast<int>(m), static_cast<int>(d)};
}

// "YYYY-MM-DDTHH:MM:SSZ" (UTC) -> minutes since the Unix epoch
inline std::int64_t parse_iso8601_minutes(const std::string& ts) {
    int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
    char suffix = '\0';
    int n = std::sscanf(ts.c_str(), "%d-%d-%dT%d:%d:%d%c", &y, &mo, &d, &h, &mi, &s, &suffix);
    if (n < 6 || (n == 7 && suffix != 'Z') || mo < 1 || mo > 12 || d < 1 || d > 31 || h < 0 ||
        h > 23 || mi < 0 || mi > 59 || s < 0 || s > 59)
        throw io_error("invalid ISO-8601 UTC timestamp: " + ts);
    if (s != 0) throw io_error("timestamps must be whole minutes: " + ts);
    return days_from_civil(y, mo, d) * 1440 + h * 60 + mi;
}

inline std::string format_iso8601_minutes(std::int64_t minutes) {
    std::int64_t days = minutes >= 0 ? minutes / 1440 : (minutes - 1439) / 1440;
    int rem = static_cast<int>(minutes - days * 1440);
    CivilDate c = civil_from_days(days);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:00Z", c.year, c.month, c.day,
                  rem / 60, rem % 60);
    return buf;
}

// Monday = 0 (1970-01-01 was a Thursday)
inline int weekday_monday0(std::int64_t days) {
    return static_cast<int>(((days + 3) % 7 + 7) % 7);
}

struct TemporalIndicator {
    int tod;                       // [0, slots_per_day)
    int dow;                       // [0, 7), Monday = 0
    std::array<double, 6> ts;      // month/12, day/31, weekday/7, hour/24, minute/60, second/60
};

inline TemporalIndicator temporal_indicator_at(std::int64_t start_epoch_minutes,
                                               int interval_minutes, std::int64_t step) {
    std::int64_t total = start_epoch_minutes + step * interval_minutes;
    std::int64_t days = total >= 0 ? total / 1440 : (total - 1439) / 1440;
    int min_of_day = static_cast<int>(total - days * 1440);
    CivilDate c = civil_from_days(days);
    int dow = weekday_monday0(days);
    TemporalIndicator ind;
    ind.tod = min_of_day / interval_minutes;
    ind.dow = dow;
    ind.ts = {c.month / 12.0, c.day / 31.0,          dow / 7.0,
              (min_of_day / 60) / 24.0, (min_of_day % 60) / 60.0, 0.0};
    return ind;
}

}  // namespace cmust
