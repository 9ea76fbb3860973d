#pragma once

#include <cstdlib>
#include <set>
#include <string>

#include "cmust/experiment.hpp"
#include "cmust/synthetic.hpp"

namespace cmust {

// Grid axes for the sweep subcommand; the cross product of the listed values
// is run. Invalid combinations (e.g. a width not divisible by the head
// count) are reported and skipped.
struct SweepSpec {
    std::vector<std::size_t> d_p;
    std::vector<std::size_t> heads;
    std::vector<double> variance_threshold;

    bool empty() const { return d_p.empty() && heads.empty() && variance_threshold.empty(); }
};

struct RunConfig {
    std::string mode = "roada";
    std::string profile = "tiny";
    std::uint64_t seed = 0;
    fs::path output_dir;
    bool synthetic = true;
    SyntheticSpec synth;
    std::vector<std::string> data_paths;
    TrainConfig train;
    RoAdaConfig roada;
    ModelConfig model;
    AblationFlags ablation;
    SweepSpec sweep;

    RunOptions to_options() const {
        RunOptions opt;
        opt.mode = mode;
        opt.model = model;
        opt.train = train;
        opt.roada = roada;
        opt.ablation = ablation;
        opt.out_dir = output_dir;
        return opt;
    }
};

namespace cfg_detail {

inline void check_keys(const Json& obj, const std::string& where,
                       const std::set<std::string>& allowed) {
    if (!obj.is_object()) throw config_error(where + ": object expected");
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!allowed.count(it.key()))
            throw config_error(where + ": unknown key '" + it.key() + "'");
}

template <typename T>
T get_or(const Json& obj, const char* key, T def) {
    if (!obj.contains(key)) return def;
    try {
        return obj.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw config_error(std::string("config field '") + key + "': " + e.what());
    }
}

}  // namespace cfg_detail

// Fills profile defaults, applies "model" overrides, validates every section
// and rejects unknown keys anywhere in the document.
inline RunConfig parse_run_config(const Json& j) {
    using cfg_detail::check_keys;
    using cfg_detail::get_or;
    check_keys(j, "config", {"mode", "profile", "seed", "output_dir", "data", "train", "roada",
                             "model", "ablation", "sweep"});
    RunConfig c;
    c.mode = get_or<std::string>(j, "mode", "roada");
    if (c.mode != "single" && c.mode != "roada" && c.mode != "ablation")
        throw config_error("config: mode must be single, roada or ablation");
    c.profile = get_or<std::string>(j, "profile", "tiny");
    if (c.profile == "tiny")
        c.model = tiny_profile();
    else if (c.profile == "full")
        c.model = full_profile();
    else
        throw config_error("config: profile must be tiny or full");
    c.seed = get_or<std::uint64_t>(j, "seed", 0);
    c.output_dir = get_or<std::string>(j, "output_dir", "");

    bool tiny = c.profile == "tiny";
    c.train.batch_size = tiny ? 16 : 32;
    c.train.patience = tiny ? 5 : 10;
    c.roada.patience = tiny ? 5 : 10;

    if (!j.contains("data")) throw config_error("config: 'data' section is required");
    const Json& data = j.at("data");
    check_keys(data, "data", {"synthetic", "paths"});
    if (data.contains("synthetic") == data.contains("paths"))
        throw config_error("data: exactly one of 'synthetic' or 'paths' is required");
    if (data.contains("synthetic")) {
        const Json& s = data.at("synthetic");
        check_keys(s, "data.synthetic",
                   {"tasks", "nodes", "steps", "interval_minutes", "coupling", "noise_sd"});
        c.synthetic = true;
        c.synth.tasks = get_or<std::size_t>(s, "tasks", 3);
        c.synth.nodes = get_or<std::size_t>(s, "nodes", 16);
        c.synth.t_all = get_or<std::size_t>(s, "steps", 1344);
        c.synth.interval_minutes = get_or<int>(s, "interval_minutes", 15);
        c.synth.coupling = get_or<double>(s, "coupling", 1.0);
        c.synth.noise_sd = get_or<double>(s, "noise_sd", 0.1);
        c.synth.seed = c.seed;
    } else {
        c.synthetic = false;
        c.data_paths = data.at("paths").get<std::vector<std::string>>();
        if (c.data_paths.empty()) throw config_error("data.paths: at least one dataset required");
    }

    if (j.contains("train")) {
        const Json& t = j.at("train");
        check_keys(t, "train",
                   {"lr", "weight_decay", "beta1", "beta2", "adam_eps", "huber_delta",
                    "batch_size", "patience", "max_epochs"});
        c.train.lr = get_or<double>(t, "lr", c.train.lr);
        c.train.weight_decay = get_or<double>(t, "weight_decay", c.train.weight_decay);
        c.train.beta1 = get_or<double>(t, "beta1", c.train.beta1);
        c.train.beta2 = get_or<double>(t, "beta2", c.train.beta2);
        c.train.adam_eps = get_or<double>(t, "adam_eps", c.train.adam_eps);
        c.train.huber_delta = get_or<double>(t, "huber_delta", c.train.huber_delta);
        c.train.batch_size = get_or<std::size_t>(t, "batch_size", c.train.batch_size);
        c.train.patience = get_or<int>(t, "patience", c.train.patience);
        c.train.max_epochs = get_or<int>(t, "max_epochs", c.train.max_epochs);
    }
    c.train.seed = c.seed;
    c.train.profile = c.profile;
    c.train.validate();

    if (j.contains("roada")) {
        const Json& r = j.at("roada");
        check_keys(r, "roada",
                   {"variance_threshold", "rolling_lr_factor", "patience", "max_epochs_warmup",
                    "max_epochs_refine", "task_order", "per_tensor", "refine_unfrozen",
                    "autoencoder"});
        c.roada.variance_threshold =
            get_or<double>(r, "variance_threshold", c.roada.variance_threshold);
        c.roada.rolling_lr_factor =
            get_or<double>(r, "rolling_lr_factor", c.roada.rolling_lr_factor);
        c.roada.patience = get_or<int>(r, "patience", c.roada.patience);
        c.roada.max_epochs_warmup = get_or<int>(r, "max_epochs_warmup", c.roada.max_epochs_warmup);
        c.roada.max_epochs_refine = get_or<int>(r, "max_epochs_refine", c.roada.max_epochs_refine);
        c.roada.task_order = get_or<std::vector<std::size_t>>(r, "task_order", {});
        c.roada.per_tensor = get_or<bool>(r, "per_tensor", false);
        c.roada.refine_unfrozen = get_or<bool>(r, "refine_unfrozen", true);
        if (r.contains("autoencoder")) {
            const Json& a = r.at("autoencoder");
            check_keys(a, "roada.autoencoder", {"latent", "epochs", "lr"});
            c.roada.ae_latent = get_or<std::size_t>(a, "latent", c.roada.ae_latent);
            c.roada.ae_epochs = get_or<int>(a, "epochs", c.roada.ae_epochs);
            c.roada.ae_lr = get_or<double>(a, "lr", c.roada.ae_lr);
        }
    }
    c.roada.base_lr = c.train.lr;
    c.roada.weight_decay = c.train.weight_decay;
    c.roada.seed = c.seed;
    c.roada.validate();

    if (j.contains("model")) {
        const Json& m = j.at("model");
        check_keys(m, "model",
                   {"d_obs", "d_s", "d_t", "d_p", "h_obs", "d_cross", "d_self", "heads",
                    "ffn_hidden", "blocks", "d_f", "d_y", "input_len", "horizon", "ln_eps",
                    "tcci_bidirectional", "prompt_per_node"});
        SliceLayout& L = c.model.layout;
        L.d_obs = get_or<std::size_t>(m, "d_obs", L.d_obs);
        L.d_s = get_or<std::size_t>(m, "d_s", L.d_s);
        L.d_t = get_or<std::size_t>(m, "d_t", L.d_t);
        L.d_p = get_or<std::size_t>(m, "d_p", L.d_p);
        c.model.h_obs = get_or<std::size_t>(m, "h_obs", c.model.h_obs);
        c.model.attn.d_cross = get_or<std::size_t>(m, "d_cross", c.model.attn.d_cross);
        // self-attention width follows the layout unless pinned explicitly
        c.model.attn.d_self = get_or<std::size_t>(m, "d_self", L.d_h());
        c.model.attn.heads = get_or<std::size_t>(m, "heads", c.model.attn.heads);
        c.model.attn.ffn_hidden = get_or<std::size_t>(m, "ffn_hidden", c.model.attn.ffn_hidden);
        c.model.attn.blocks = get_or<std::size_t>(m, "blocks", c.model.attn.blocks);
        c.model.d_f = get_or<std::size_t>(m, "d_f", c.model.d_f);
        c.model.d_y = get_or<std::size_t>(m, "d_y", c.model.d_y);
        c.model.input_len = get_or<std::size_t>(m, "input_len", c.model.input_len);
        c.model.horizon = get_or<std::size_t>(m, "horizon", c.model.horizon);
        c.model.ln_eps = get_or<double>(m, "ln_eps", c.model.ln_eps);
        c.model.tcci_bidirectional =
            get_or<bool>(m, "tcci_bidirectional", c.model.tcci_bidirectional);
        c.model.prompt_per_node = get_or<bool>(m, "prompt_per_node", c.model.prompt_per_node);
    }

    if (j.contains("ablation")) {
        const Json& a = j.at("ablation");
        check_keys(a, "ablation", {"no_cross_interaction", "no_freezing", "no_prompts"});
        c.ablation.no_cross_interaction = get_or<bool>(a, "no_cross_interaction", false);
        c.ablation.no_freezing = get_or<bool>(a, "no_freezing", false);
        c.ablation.no_prompts = get_or<bool>(a, "no_prompts", false);
    }
    if (c.mode == "ablation" && !c.ablation.no_cross_interaction && !c.ablation.no_freezing &&
        !c.ablation.no_prompts)
        throw config_error("ablation mode requires at least one ablation flag");

    if (j.contains("sweep")) {
        const Json& s = j.at("sweep");
        check_keys(s, "sweep", {"d_p", "heads", "variance_threshold"});
        c.sweep.d_p = cfg_detail::get_or<std::vector<std::size_t>>(s, "d_p", {});
        c.sweep.heads = cfg_detail::get_or<std::vector<std::size_t>>(s, "heads", {});
        c.sweep.variance_threshold =
            cfg_detail::get_or<std::vector<double>>(s, "variance_threshold", {});
    }
    return c;
}

inline RunConfig parse_run_config_file(const fs::path& path) {
    return parse_run_config(read_json(path));
}

// Fully-resolved view, echoed into the output directory.
inline Json resolved_config_json(const RunConfig& c) {
    Json data;
    if (c.synthetic)
        data = Json{{"synthetic",
                     {{"tasks", c.synth.tasks},
                      {"nodes", c.synth.nodes},
                      {"steps", c.synth.t_all},
                      {"interval_minutes", c.synth.interval_minutes},
                      {"coupling", c.synth.coupling},
                      {"noise_sd", c.synth.noise_sd}}}};
    else
        data = Json{{"paths", c.data_paths}};
    return Json{
        {"mode", c.mode},
        {"profile", c.profile},
        {"seed", c.seed},
        {"output_dir", c.output_dir.string()},
        {"data", data},
        {"train",
         {{"lr", c.train.lr},
          {"weight_decay", c.train.weight_decay},
          {"beta1", c.train.beta1},
          {"beta2", c.train.beta2},
          {"adam_eps", c.train.adam_eps},
          {"huber_delta", c.train.huber_delta},
          {"batch_size", c.train.batch_size},
          {"patience", c.train.patience},
          {"max_epochs", c.train.max_epochs}}},
        {"roada",
         {{"variance_threshold", c.roada.variance_threshold},
          {"rolling_lr_factor", c.roada.rolling_lr_factor},
          {"patience", c.roada.patience},
          {"max_epochs_warmup", c.roada.max_epochs_warmup},
          {"max_epochs_refine", c.roada.max_epochs_refine},
          {"task_order", c.roada.task_order},
          {"per_tensor", c.roada.per_tensor},
          {"refine_unfrozen", c.roada.refine_unfrozen},
          {"autoencoder",
           {{"latent", c.roada.ae_latent}, {"epochs", c.roada.ae_epochs}, {"lr", c.roada.ae_lr}}}}},
        {"model", model_config_to_json(c.model)},
        {"ablation",
         {{"no_cross_interaction", c.ablation.no_cross_interaction},
          {"no_freezing", c.ablation.no_freezing},
          {"no_prompts", c.ablation.no_prompts}}}};
}

// Relative output paths resolve under $CMUST_OUT_ROOT when it is set.
inline fs::path resolve_output_dir(const fs::path& dir) {
    if (dir.empty() || dir.is_absolute()) return dir;
    const char* root = std::getenv("CMUST_OUT_ROOT");
    return root && *root ? fs::path(root) / dir : dir;
}

}  // namespace cmust
