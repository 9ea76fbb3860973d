#pragma once

#include <bit>
#include <cstring>
#include <set>

#include "cmust/fsio.hpp"
#include "cmust/parameter.hpp"

namespace cmust {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; byte swapping is not implemented");

// '/' in parameter paths maps to "__" in file names
inline std::string sanitize_param_name(const std::string& name) {
    std::string out;
    out.reserve(name.size() + 4);
    for (char c : name) {
        if (c == '/')
            out += "__";
        else
            out += c;
    }
    return out;
}

// Checkpoint directory layout:
//   params.json            ordered list of {name, shape}
//   <sanitized>.f64        flat little-endian 64-bit values, row-major
//   <sanitized>.mask       one byte per element, 0 = trainable, 1 = frozen
// Extra metadata files (model_meta.json) may sit alongside; round trips are
// bit-exact.
inline void save_checkpoint(const fs::path& dir, const std::vector<const Parameter*>& params,
                            const Json& meta = Json()) {
    fs::create_directories(dir);
    Json index = Json::array();
    std::set<std::string> seen;
    for (const Parameter* p : params) {
        std::string file = sanitize_param_name(p->name);
        if (!seen.insert(file).second)
            throw io_error("sanitized parameter names collide: " + p->name);
        index.push_back({{"name", p->name}, {"shape", p->value.shape}});
        std::string blob(p->size() * sizeof(double), '\0');
        std::memcpy(blob.data(), p->value.ptr(), blob.size());
        atomic_write(dir / (file + ".f64"), blob);
        std::string mask(p->frozen.begin(), p->frozen.end());
        atomic_write(dir / (file + ".mask"), mask);
    }
    atomic_write_json(dir / "params.json", index);
    if (!meta.is_null()) atomic_write_json(dir / "model_meta.json", meta);
}

struct LoadedParam {
    std::string name;
    Tensor value;
    std::vector<std::uint8_t> frozen;
};

inline std::vector<LoadedParam> load_checkpoint(const fs::path& dir) {
    Json index = read_json(dir / "params.json");
    if (!index.is_array()) throw io_error("params.json: array expected");
    std::vector<LoadedParam> out;
    for (const auto& entry : index) {
        LoadedParam lp;
        lp.name = entry.at("name").get<std::string>();
        Shape shape = entry.at("shape").get<Shape>();
        std::string file = sanitize_param_name(lp.name);
        std::string blob = read_file(dir / (file + ".f64"));
        if (blob.size() != numel(shape) * sizeof(double))
            throw io_error("checkpoint " + lp.name + ": expected " +
                           std::to_string(numel(shape) * sizeof(double)) + " bytes, got " +
                           std::to_string(blob.size()));
        lp.value = Tensor::zeros(shape);
        std::memcpy(lp.value.ptr(), blob.data(), blob.size());
        std::string mask = read_file(dir / (file + ".mask"));
        if (mask.size() != numel(shape))
            throw io_error("checkpoint " + lp.name + ": freeze mask size mismatch");
        lp.frozen.assign(mask.begin(), mask.end());
        out.push_back(std::move(lp));
    }
    return out;
}

inline Json load_checkpoint_meta(const fs::path& dir) { return read_json(dir / "model_meta.json"); }

// Restore values and masks into an existing store; every checkpoint entry
// must match a registered parameter of the same shape.
inline void restore_into(ParameterStore& store, const std::vector<LoadedParam>& loaded) {
    for (const auto& lp : loaded) {
        Parameter* p = store.find(lp.name);
        if (!p) throw io_error("checkpoint parameter not in model: " + lp.name);
        if (p->value.shape != lp.value.shape)
            throw io_error("checkpoint shape mismatch for " + lp.name + ": " +
                           shape_str(lp.value.shape) + " vs " + shape_str(p->value.shape));
        p->value = lp.value;
        p->frozen = lp.frozen;
    }
}

}  // namespace cmust
