#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "cmust/calendar.hpp"
#include "cmust/fsio.hpp"
#include "cmust/tensor.hpp"

namespace cmust {

struct DatasetManifest {
    std::string name;
    std::size_t t_all = 0;
    std::size_t nodes = 0;
    std::size_t channels = 0;
    int interval_minutes = 0;
    std::string start_timestamp;  // ISO-8601 UTC
    std::vector<std::array<double, 2>> coords;  // (longitude, latitude) degrees
    std::vector<std::string> channel_names;

    std::size_t slots_per_day() const { return 1440 / static_cast<std::size_t>(interval_minutes); }

    void validate() const {
        if (interval_minutes <= 0 || 1440 % interval_minutes != 0)
            throw config_error("manifest: interval_minutes must divide 1440, got " +
                               std::to_string(interval_minutes));
        if (nodes == 0 || channels == 0 || t_all == 0)
            throw config_error("manifest: T_all, N and C must be positive");
        if (coords.size() != nodes)
            throw config_error("manifest: coords count " + std::to_string(coords.size()) +
                               " != N " + std::to_string(nodes));
        for (const auto& c : coords)
            if (!std::isfinite(c[0]) || !std::isfinite(c[1]))
                throw config_error("manifest: non-finite coordinate");
        if (channel_names.size() != channels)
            throw config_error("manifest: channel_names count != C");
        parse_iso8601_minutes(start_timestamp);
    }
};

struct STDataset {
    DatasetManifest manifest;
    Tensor observations;  // [T_all, N, C]

    std::int64_t start_epoch_minutes() const {
        return parse_iso8601_minutes(manifest.start_timestamp);
    }

    TemporalIndicator indicator_at(std::size_t step) const {
        return temporal_indicator_at(start_epoch_minutes(), manifest.interval_minutes,
                                     static_cast<std::int64_t>(step));
    }

    void validate() const {
        manifest.validate();
        Shape expect{manifest.t_all, manifest.nodes, manifest.channels};
        if (observations.shape != expect)
            throw shape_error("dataset " + manifest.name + ": observations " +
                              shape_str(observations.shape) + " do not match manifest " +
                              shape_str(expect));
        require_finite(observations, "dataset observations");
    }
};

inline Json manifest_to_json(const DatasetManifest& m) {
    Json coords = Json::array();
    for (const auto& c : m.coords) coords.push_back({c[0], c[1]});
    return Json{{"name", m.name},
                {"T_all", m.t_all},
                {"N", m.nodes},
                {"C", m.channels},
                {"interval_minutes", m.interval_minutes},
                {"start_timestamp", m.start_timestamp},
                {"coords", coords},
                {"channel_names", m.channel_names}};
}

inline DatasetManifest manifest_from_json(const Json& j) {
    DatasetManifest m;
    m.name = j.at("name").get<std::string>();
    m.t_all = j.at("T_all").get<std::size_t>();
    m.nodes = j.at("N").get<std::size_t>();
    m.channels = j.at("C").get<std::size_t>();
    m.interval_minutes = j.at("interval_minutes").get<int>();
    m.start_timestamp = j.at("start_timestamp").get<std::string>();
    for (const auto& c : j.at("coords")) m.coords.push_back({c.at(0).get<double>(), c.at(1).get<double>()});
    m.channel_names = j.at("channel_names").get<std::vector<std::string>>();
    m.validate();
    return m;
}

// Portable dataset directory: manifest.json + observations.csv. CSV columns
// are flattened node-major then channel; values carry enough digits to round
// trip doubles exactly.
inline void save_dataset(const fs::path& dir, const STDataset& ds) {
    ds.validate();
    fs::create_directories(dir);
    atomic_write_json(dir / "manifest.json", manifest_to_json(ds.manifest));

    const DatasetManifest& m = ds.manifest;
    std::string csv;
    csv.reserve(ds.observations.size() * 20);
    csv += "t";
    for (std::size_t n = 0; n < m.nodes; ++n)
        for (std::size_t c = 0; c < m.channels; ++c)
            csv += ",node" + std::to_string(n) + "_ch" + std::to_string(c);
    csv += "\n";
    char buf[40];
    for (std::size_t t = 0; t < m.t_all; ++t) {
        csv += std::to_string(t);
        const double* row = ds.observations.ptr() + t * m.nodes * m.channels;
        for (std::size_t i = 0; i < m.nodes * m.channels; ++i) {
            std::snprintf(buf, sizeof(buf), ",%.17g", row[i]);
            csv += buf;
        }
        csv += "\n";
    }
    atomic_write(dir / "observations.csv", csv);
}

inline STDataset load_dataset(const fs::path& dir) {
    if (!fs::exists(dir / "manifest.json"))
        throw io_error("missing manifest.json in " + dir.string());
    if (!fs::exists(dir / "observations.csv"))
        throw io_error("missing observations.csv in " + dir.string());
    STDataset ds;
    ds.manifest = manifest_from_json(read_json(dir / "manifest.json"));
    const DatasetManifest& m = ds.manifest;
    std::size_t cols = m.nodes * m.channels;
    ds.observations = Tensor::zeros({m.t_all, m.nodes, m.channels});

    std::string text = read_file(dir / "observations.csv");
    std::size_t pos = text.find('\n');
    if (pos == std::string::npos) throw io_error("observations.csv: missing header row");
    std::size_t row = 0;
    pos += 1;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string::npos) end = text.size();
        if (end > pos) {
            if (row >= m.t_all)
                throw io_error("observations.csv: more rows than manifest T_all=" +
                               std::to_string(m.t_all));
            const char* p = text.data() + pos;
            const char* stop = text.data() + end;
            std::size_t col = 0;
            while (p < stop) {
                const char* field_end = static_cast<const char*>(memchr(p, ',', stop - p));
                if (!field_end) field_end = stop;
                if (col > 0) {
                    double v = 0.0;
                    auto [ptr, ec] = std::from_chars(p, field_end, v);
                    if (ec != std::errc() || ptr != field_end)
                        throw io_error("observations.csv: bad value at row " + std::to_string(row) +
                                       " column " + std::to_string(col));
                    if (!std::isfinite(v))
                        throw io_error("observations.csv: non-finite value at row " +
                                       std::to_string(row) + " column " + std::to_string(col));
                    if (col - 1 >= cols)
                        throw io_error("observations.csv: row " + std::to_string(row) + " has more than " +
                                       std::to_string(cols) + " value columns");
                    ds.observations[row * cols + (col - 1)] = v;
                }
                col += 1;
                p = field_end + 1;
            }
            if (col - 1 != cols)
                throw io_error("observations.csv: row " + std::to_string(row) + " has " +
                               std::to_string(col - 1) + " value columns, expected " +
                               std::to_string(cols));
            row += 1;
        }
        pos = end + 1;
    }
    if (row != m.t_all)
        throw io_error("observations.csv: " + std::to_string(row) + " rows, manifest T_all=" +
                       std::to_string(m.t_all));
    ds.validate();
    return ds;
}

// ---- normalization ----

struct NormStats {
    std::vector<double> mean;  // per channel
    std::vector<double> std;   // per channel, floored at 1e-8
};

// Statistics come from the training slice only: steps [0, train_len).
inline NormStats compute_norm_stats(const STDataset& ds, std::size_t train_len) {
    const DatasetManifest& m = ds.manifest;
    if (train_len == 0 || train_len > m.t_all)
        throw config_error("compute_norm_stats: bad train length");
    NormStats s;
    s.mean.assign(m.channels, 0.0);
    s.std.assign(m.channels, 0.0);
    std::size_t count = train_len * m.nodes;
    for (std::size_t t = 0; t < train_len; ++t)
        for (std::size_t n = 0; n < m.nodes; ++n)
            for (std::size_t c = 0; c < m.channels; ++c)
                s.mean[c] += ds.observations[(t * m.nodes + n) * m.channels + c];
    for (std::size_t c = 0; c < m.channels; ++c) s.mean[c] /= static_cast<double>(count);
    for (std::size_t t = 0; t < train_len; ++t)
        for (std::size_t n = 0; n < m.nodes; ++n)
            for (std::size_t c = 0; c < m.channels; ++c) {
                double d = ds.observations[(t * m.nodes + n) * m.channels + c] - s.mean[c];
                s.std[c] += d * d;
            }
    for (std::size_t c = 0; c < m.channels; ++c)
        s.std[c] = std::max(std::sqrt(s.std[c] / static_cast<double>(count)), 1e-8);
    return s;
}

inline double normalize_value(double x, const NormStats& s, std::size_t channel) {
    return (x - s.mean[channel]) / s.std[channel];
}

inline double denormalize_value(double z, const NormStats& s, std::size_t channel) {
    return z * s.std[channel] + s.mean[channel];
}

// ---- chronological split and windowing ----

struct SplitRange {
    std::size_t begin = 0, end = 0;  // step indices, half-open
    std::size_t length() const { return end - begin; }
};

// train = floor(0.7 T), val = floor(0.1 T), test = remainder
inline std::array<SplitRange, 3> split_7_1_2(std::size_t t_all) {
    std::size_t train = static_cast<std::size_t>(0.7 * static_cast<double>(t_all));
    std::size_t val = static_cast<std::size_t>(0.1 * static_cast<double>(t_all));
    return {SplitRange{0, train}, SplitRange{train, train + val}, SplitRange{train + val, t_all}};
}

// Stride-1 windows: input [s, s+T), target [s+T, s+T+T'), all inside the range.
inline std::vector<std::size_t> make_windows(const SplitRange& range, std::size_t input_len,
                                             std::size_t horizon, std::size_t stride = 1) {
    std::size_t need = input_len + horizon;
    if (range.length() < need)
        throw config_error("make_windows: range of " + std::to_string(range.length()) +
                           " steps cannot hold a " + std::to_string(need) + "-step window");
    std::vector<std::size_t> starts;
    for (std::size_t s = range.begin; s + need <= range.end; s += stride) starts.push_back(s);
    return starts;
}

struct WindowedSplit {
    std::size_t input_len = 12;
    std::size_t horizon = 12;
    std::size_t stride = 1;
    std::array<SplitRange, 3> ranges;  // train, val, test
    std::vector<std::size_t> train_windows, val_windows, test_windows;
};

inline WindowedSplit make_split(std::size_t t_all, std::size_t input_len, std::size_t horizon,
                                std::size_t stride = 1) {
    WindowedSplit w;
    w.input_len = input_len;
    w.horizon = horizon;
    w.stride = stride;
    w.ranges = split_7_1_2(t_all);
    w.train_windows = make_windows(w.ranges[0], input_len, horizon, stride);
    w.val_windows = make_windows(w.ranges[1], input_len, horizon, stride);
    w.test_windows = make_windows(w.ranges[2], input_len, horizon, stride);
    return w;
}

}  // namespace cmust
