#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "cmust/tensor.hpp"

namespace cmust {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

// All artifact files are written via temp + rename so interrupted runs never
// leave truncated output behind.
inline void atomic_write(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw io_error("cannot open for writing: " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw io_error("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline void atomic_write_json(const fs::path& path, const Json& j) {
    atomic_write(path, j.dump(2) + "\n");
}

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open: " + path.string());
    std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return s;
}

inline Json read_json(const fs::path& path) {
    try {
        return Json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw io_error("invalid JSON in " + path.string() + ": " + e.what());
    }
}

}  // namespace cmust
