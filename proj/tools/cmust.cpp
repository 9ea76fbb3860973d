// cmust — train, evaluate and inspect CMuST models from the command line.
//
// Exit codes: 0 success, 2 configuration/usage error, 3 training divergence.

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cmust/config.hpp"

namespace {

using namespace cmust;

int cmd_gen(std::uint64_t seed, std::size_t tasks, std::size_t nodes, std::size_t steps,
            int interval, double coupling, double noise, const std::string& out) {
    SyntheticSpec spec;
    spec.seed = seed;
    spec.tasks = tasks;
    spec.nodes = nodes;
    spec.t_all = steps;
    spec.interval_minutes = interval;
    spec.coupling = coupling;
    spec.noise_sd = noise;
    std::vector<STDataset> datasets = generate_synthetic(spec);
    fs::path root = resolve_output_dir(out);
    for (std::size_t k = 0; k < datasets.size(); ++k) {
        fs::path dir = root / datasets[k].manifest.name;
        save_dataset(dir, datasets[k]);
        std::cout << "wrote " << dir.string() << " (T_all=" << datasets[k].manifest.t_all
                  << ", N=" << datasets[k].manifest.nodes
                  << ", L_t=" << datasets[k].manifest.slots_per_day() << ")\n";
    }
    return 0;
}

std::vector<STDataset> load_config_datasets(const RunConfig& cfg) {
    if (cfg.synthetic) return generate_synthetic(cfg.synth);
    std::vector<STDataset> out;
    for (const std::string& p : cfg.data_paths) out.push_back(load_dataset(p));
    return out;
}

void print_metrics(const RunResult& result) {
    for (const TaskMetric& m : result.metrics)
        std::printf("task %zu (%s): MAE %.6f  MAPE %.6f  epochs %d\n", m.task,
                    m.task_name.c_str(), m.mae, m.mape, m.epochs);
}

int run_one(RunConfig cfg, const fs::path& out_dir) {
    cfg.output_dir = out_dir;
    if (out_dir.empty())
        throw config_error("no output directory: set output_dir in the config or pass --out");
    atomic_write_json(out_dir / "resolved_config.json", resolved_config_json(cfg));
    RunResult result = run_experiment(load_config_datasets(cfg), cfg.to_options());
    print_metrics(result);
    std::cout << "artifacts in " << out_dir.string() << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_override) {
    RunConfig cfg = parse_run_config_file(config_path);
    fs::path out = resolve_output_dir(out_override.empty() ? cfg.output_dir
                                                           : fs::path(out_override));
    return run_one(std::move(cfg), out);
}

int cmd_sweep(const std::string& config_path, const std::string& out_override) {
    RunConfig base = parse_run_config_file(config_path);
    fs::path root = resolve_output_dir(out_override.empty() ? base.output_dir
                                                            : fs::path(out_override));
    if (root.empty())
        throw config_error("no output directory: set output_dir in the config or pass --out");
    if (base.sweep.empty())
        throw config_error("sweep: config has no 'sweep' section with grid axes");

    auto axis_or = [](std::vector<std::size_t> v, std::size_t fallback) {
        return v.empty() ? std::vector<std::size_t>{fallback} : v;
    };
    std::vector<std::size_t> dps = axis_or(base.sweep.d_p, base.model.layout.d_p);
    std::vector<std::size_t> heads = axis_or(base.sweep.heads, base.model.attn.heads);
    std::vector<double> deltas = base.sweep.variance_threshold.empty()
                                     ? std::vector<double>{base.roada.variance_threshold}
                                     : base.sweep.variance_threshold;

    Json summary = Json::array();
    for (std::size_t dp : dps)
        for (std::size_t h : heads)
            for (double delta : deltas) {
                RunConfig cfg = base;
                cfg.sweep = {};
                cfg.model.layout.d_p = dp;
                cfg.model.attn.d_self = cfg.model.layout.d_h();
                cfg.model.attn.heads = h;
                cfg.roada.variance_threshold = delta;
                char tag[96];
                std::snprintf(tag, sizeof(tag), "dp%zu_heads%zu_delta%.0e", dp, h, delta);
                Json row{{"d_p", dp}, {"heads", h}, {"variance_threshold", delta}, {"run", tag}};
                try {
                    cfg.model.validate();
                } catch (const config_error& e) {
                    std::cout << tag << ": skipped (" << e.what() << ")\n";
                    row["status"] = "invalid";
                    row["reason"] = e.what();
                    summary.push_back(row);
                    continue;
                }
                std::cout << "=== " << tag << " ===\n";
                cfg.output_dir = root / "sweep" / tag;
                atomic_write_json(cfg.output_dir / "resolved_config.json",
                                  resolved_config_json(cfg));
                RunResult result = run_experiment(load_config_datasets(cfg), cfg.to_options());
                print_metrics(result);
                double mean = 0.0;
                for (const TaskMetric& m : result.metrics) mean += m.mae;
                mean /= static_cast<double>(result.metrics.size());
                row["status"] = "ok";
                row["mean_mae"] = mean;
                summary.push_back(row);
            }
    atomic_write_json(root / "sweep_summary.json", summary);
    std::cout << "sweep summary in " << (root / "sweep_summary.json").string() << "\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& dataset, const std::string& out,
             long prompt_index) {
    LoadedModel lm = load_model_checkpoint(checkpoint);
    EvalReport r = evaluate_checkpoint(lm, load_dataset(dataset), prompt_index);
    Json j{{"MAE", r.mae},
           {"MAPE", r.mape},
           {"sample_count", r.sample_count},
           {"horizon_mae", r.horizon_mae}};
    if (!out.empty()) atomic_write_json(resolve_output_dir(out), j);
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_export_attention(const std::string& checkpoint, const std::string& dataset,
                         std::size_t window, const std::string& out, long prompt_index) {
    LoadedModel lm = load_model_checkpoint(checkpoint);
    Json records = export_attention_json(lm, load_dataset(dataset), window, prompt_index);
    atomic_write_json(resolve_output_dir(out), records);
    std::cout << "wrote " << records.size() << " attention records to " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CMuST: continuous multi-task spatiotemporal learning"};
    app.require_subcommand(1);

    std::uint64_t seed = 0;
    std::size_t tasks = 3, nodes = 16, steps = 1344, window = 0;
    int interval = 15;
    double coupling = 1.0, noise = 0.1;
    long prompt_index = -1;
    std::string out, config_path, checkpoint, dataset;

    CLI::App* gen = app.add_subcommand("gen", "generate synthetic multi-task datasets");
    gen->add_option("--seed", seed, "generator seed")->capture_default_str();
    gen->add_option("--tasks", tasks, "number of tasks")->capture_default_str();
    gen->add_option("--nodes", nodes, "grid nodes")->capture_default_str();
    gen->add_option("--steps", steps, "time steps")->capture_default_str();
    gen->add_option("--interval", interval, "minutes per step")->capture_default_str();
    gen->add_option("--coupling", coupling, "task coupling in [0,1]")->capture_default_str();
    gen->add_option("--noise", noise, "observation noise sd")->capture_default_str();
    gen->add_option("--out", out, "output root directory")->required();

    CLI::App* train = app.add_subcommand("train", "run an experiment from a JSON config");
    train->add_option("--config", config_path, "run config path")->required();
    train->add_option("--out", out, "override the config output directory");

    CLI::App* sweep = app.add_subcommand("sweep", "grid sweep over d_p / heads / delta");
    sweep->add_option("--config", config_path, "run config with a sweep section")->required();
    sweep->add_option("--out", out, "override the config output directory");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    eval->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
    eval->add_option("--dataset", dataset, "dataset directory")->required();
    eval->add_option("--out", out, "where to write the evaluation JSON");
    eval->add_option("--prompt-index", prompt_index, "prompt to use (default: checkpoint task)");

    CLI::App* exp = app.add_subcommand("export-attention", "dump attention maps for one window");
    exp->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
    exp->add_option("--dataset", dataset, "dataset directory")->required();
    exp->add_option("--window", window, "test window index")->capture_default_str();
    exp->add_option("--out", out, "output JSON path")->required();
    exp->add_option("--prompt-index", prompt_index, "prompt to use (default: checkpoint task)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen(seed, tasks, nodes, steps, interval, coupling, noise, out);
        if (train->parsed()) return cmd_train(config_path, out);
        if (sweep->parsed()) return cmd_sweep(config_path, out);
        if (eval->parsed()) return cmd_eval(checkpoint, dataset, out, prompt_index);
        if (exp->parsed()) return cmd_export_attention(checkpoint, dataset, window, out, prompt_index);
    } catch (const cmust::train_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const cmust::config_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const cmust::io_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
