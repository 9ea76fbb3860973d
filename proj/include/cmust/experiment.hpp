#pragma once

#include <chrono>
#include <memory>

#include "cmust/checkpoint.hpp"
#include "cmust/roada.hpp"

namespace cmust {

struct AblationFlags {
    bool no_cross_interaction = false;  // drop SCCI + TCCI
    bool no_freezing = false;           // roll with every weight dynamic
    bool no_prompts = false;            // zero, non-trainable prompts
};

struct RunOptions {
    std::string mode = "roada";  // single | roada | ablation
    ModelConfig model;           // nodes / slots_per_day / c_in are filled from the data
    TrainConfig train;
    RoAdaConfig roada;
    AblationFlags ablation;
    fs::path out_dir;  // empty: no artifacts written
};

struct TaskMetric {
    std::size_t task = 0;
    std::string task_name;
    std::string mode;
    std::uint64_t seed = 0;
    double mae = 0.0;
    double mape = 0.0;
    std::vector<double> horizon_mae;
    int epochs = 0;
    double wall_seconds = 0.0;  // reported in timings.json, never in metrics.json
};

struct RunResult {
    std::vector<TaskMetric> metrics;     // one per task, in task order 0..k-1
    std::vector<FreezeReport> reports;   // rolling phases (roada modes with freezing)
    std::vector<EpochRow> log;
    std::vector<PhaseInfo> phases;
    double total_wall_seconds = 0.0;
};

namespace detail {

inline Json norm_stats_to_json(const NormStats& s) {
    return Json{{"mean", s.mean}, {"std", s.std}};
}

inline NormStats norm_stats_from_json(const Json& j) {
    NormStats s;
    s.mean = j.at("mean").get<std::vector<double>>();
    s.std = j.at("std").get<std::vector<double>>();
    return s;
}

inline Json checkpoint_meta(const ModelConfig& cfg, const TaskData* task,
                            const std::vector<std::string>& prompt_names) {
    Json meta{{"model", model_config_to_json(cfg)}, {"prompts", prompt_names}};
    if (task) {
        meta["task_id"] = task->task_id;
        meta["task_name"] = task->dataset.manifest.name;
        meta["norm_stats"] = norm_stats_to_json(task->stats);
    }
    return meta;
}

inline void save_model_checkpoint(const fs::path& dir, Model& model,
                                  const std::vector<Parameter*>& prompts, const TaskData* task) {
    std::vector<const Parameter*> params;
    std::vector<std::string> prompt_names;
    for (Parameter* p : model.shared_params()) params.push_back(p);
    for (Parameter* p : prompts) {
        params.push_back(p);
        prompt_names.push_back(p->name);
    }
    save_checkpoint(dir, params, checkpoint_meta(model.config(), task, prompt_names));
}

inline std::vector<std::size_t> variance_histogram(const Tensor& var) {
    // 16 log-spaced decade bins covering [1e-12, 1e4); under/overflow clamps
    std::vector<std::size_t> bins(16, 0);
    for (double v : var.data) {
        int b = 0;
        if (v > 0.0) {
            b = static_cast<int>(std::floor(std::log10(v))) + 12;
            b = std::clamp(b, 0, 15);
        }
        bins[static_cast<std::size_t>(b)] += 1;
    }
    return bins;
}

}  // namespace detail

// Prompt artifacts for every task: daily-average sample, autoencoder summary,
// seeded projection. With zero_prompts the summarization is skipped and the
// prompts come back zero and non-trainable.
inline std::vector<TaskPromptArtifact> build_prompt_artifacts(const std::vector<TaskData>& tasks,
                                                              const ModelConfig& cfg,
                                                              const RoAdaConfig& rcfg,
                                                              bool zero_prompts = false) {
    std::vector<TaskPromptArtifact> arts;
    for (std::size_t k = 0; k < tasks.size(); ++k) {
        if (zero_prompts) {
            TaskPromptArtifact art;
            art.task_id = k;
            art.prompt_init = Tensor::zeros(Shape{cfg.prompt_per_node ? cfg.nodes : 1,
                                                  cfg.layout.d_p});
            arts.push_back(std::move(art));
            continue;
        }
        Tensor samp = daily_average_sample(tasks[k].dataset);
        TaskPromptArtifact art = train_autoencoder(samp, rcfg.ae_latent, rcfg.ae_epochs,
                                                   rcfg.ae_lr, sub_seed(rcfg.seed, "ae", k));
        art.task_id = k;
        Tensor p = build_prompt(art.latent, cfg.layout.d_p, rcfg.seed);
        if (!cfg.prompt_per_node) {
            // collapse to one shared row by node average
            Tensor g = Tensor::zeros({1, cfg.layout.d_p});
            for (std::size_t n = 0; n < p.dim(0); ++n)
                for (std::size_t j = 0; j < cfg.layout.d_p; ++j) g[j] += p[n * cfg.layout.d_p + j];
            for (double& v : g.data) v /= static_cast<double>(p.dim(0));
            p = std::move(g);
        }
        art.prompt_init = std::move(p);
        arts.push_back(std::move(art));
    }
    return arts;
}

inline std::vector<std::unique_ptr<Parameter>> make_prompt_params(
    const std::vector<TaskPromptArtifact>& arts, bool trainable) {
    std::vector<std::unique_ptr<Parameter>> prompts;
    for (std::size_t k = 0; k < arts.size(); ++k) {
        prompts.push_back(
            std::make_unique<Parameter>("prompt/task" + std::to_string(k), arts[k].prompt_init));
        prompts.back()->trainable = trainable;
    }
    return prompts;
}

// Full RoAda pipeline: prompts, warm-up rolling, per-task refinement from W*,
// test evaluation. Emits exactly one checkpoint and one metric record per
// task (plus the shared W* under wstar/) when out_dir is set.
inline RunResult roada_full(std::vector<TaskData>& tasks, RunOptions opt,
                            const WarmupObserver& observer = {}) {
    auto t_start = std::chrono::steady_clock::now();
    bool freezing = !opt.ablation.no_freezing;
    ModelConfig cfg = opt.model;
    if (opt.ablation.no_cross_interaction) cfg.use_cross_context = false;
    cfg.validate();

    std::vector<TaskPromptArtifact> arts =
        build_prompt_artifacts(tasks, cfg, opt.roada, opt.ablation.no_prompts);
    std::vector<std::unique_ptr<Parameter>> prompts =
        make_prompt_params(arts, !opt.ablation.no_prompts);
    std::vector<Parameter*> prompt_ptrs;
    for (auto& p : prompts) prompt_ptrs.push_back(p.get());

    Model model(cfg, sub_seed(opt.roada.seed, "roada-init"));
    RunResult result;

    WarmupOutcome warm =
        warmup_rolling(model, prompt_ptrs, tasks, opt.roada, opt.train, freezing, observer);
    result.reports = std::move(warm.reports);
    result.log = std::move(warm.log);
    result.phases = std::move(warm.phases);

    // W* snapshot: values plus accumulated masks
    std::vector<Parameter*> shared = model.shared_params();
    std::vector<Tensor> wstar_values;
    std::vector<std::vector<std::uint8_t>> wstar_masks;
    for (Parameter* p : shared) {
        wstar_values.push_back(p->value);
        wstar_masks.push_back(p->frozen);
    }
    if (!opt.out_dir.empty())
        detail::save_model_checkpoint(opt.out_dir / "wstar", model, prompt_ptrs, nullptr);

    for (std::size_t k = 0; k < tasks.size(); ++k) {
        auto t_task = std::chrono::steady_clock::now();
        RefineOutcome ref =
            refine(model, wstar_values, wstar_masks, *prompts[k], tasks[k], opt.roada, opt.train);
        result.log.insert(result.log.end(), ref.train.log.begin(), ref.train.log.end());
        result.phases.push_back({"refine-task" + std::to_string(k), k, ref.train.epochs,
                                 opt.roada.base_lr});
        TaskMetric m;
        m.task = k;
        m.task_name = tasks[k].dataset.manifest.name;
        m.mode = opt.mode;
        m.seed = opt.train.seed;
        m.mae = ref.test.mae;
        m.mape = ref.test.mape;
        m.horizon_mae = ref.test.horizon_mae;
        m.epochs = ref.train.epochs;
        m.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_task).count();
        result.metrics.push_back(std::move(m));
        if (!opt.out_dir.empty())
            detail::save_model_checkpoint(opt.out_dir / "checkpoints" /
                                              ("task" + std::to_string(k)),
                                          model, {prompts[k].get()}, &tasks[k]);
    }
    result.total_wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return result;
}

// Independent single-task baselines: one fresh model per task, trained at the
// base rate with the task's own prompt.
inline RunResult run_single(std::vector<TaskData>& tasks, RunOptions opt) {
    auto t_start = std::chrono::steady_clock::now();
    ModelConfig cfg = opt.model;
    if (opt.ablation.no_cross_interaction) cfg.use_cross_context = false;
    cfg.validate();
    std::vector<TaskPromptArtifact> arts =
        build_prompt_artifacts(tasks, cfg, opt.roada, opt.ablation.no_prompts);
    RunResult result;
    for (std::size_t k = 0; k < tasks.size(); ++k) {
        auto t_task = std::chrono::steady_clock::now();
        Model model(cfg, sub_seed(opt.train.seed, "single-init", k));
        Parameter prompt("prompt/task" + std::to_string(k), arts[k].prompt_init);
        prompt.trainable = !opt.ablation.no_prompts;
        TrainResult tr = train_until_convergence(model, prompt, tasks[k], opt.train,
                                                 "single-task" + std::to_string(k));
        EvalReport ev = evaluate_test(model, prompt, tasks[k], opt.train.batch_size);
        result.log.insert(result.log.end(), tr.log.begin(), tr.log.end());
        result.phases.push_back({"single-task" + std::to_string(k), k, tr.epochs, opt.train.lr});
        TaskMetric m;
        m.task = k;
        m.task_name = tasks[k].dataset.manifest.name;
        m.mode = opt.mode;
        m.seed = opt.train.seed;
        m.mae = ev.mae;
        m.mape = ev.mape;
        m.horizon_mae = ev.horizon_mae;
        m.epochs = tr.epochs;
        m.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_task).count();
        result.metrics.push_back(std::move(m));
        if (!opt.out_dir.empty())
            detail::save_model_checkpoint(
                opt.out_dir / "checkpoints" / ("task" + std::to_string(k)), model, {&prompt},
                &tasks[k]);
    }
    result.total_wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return result;
}

inline void write_run_artifacts(const fs::path& dir, const RunOptions& opt,
                                const RunResult& result) {
    Json metrics = Json::array();
    for (const TaskMetric& m : result.metrics)
        metrics.push_back({{"task", m.task},
                           {"task_name", m.task_name},
                           {"mode", m.mode},
                           {"seed", m.seed},
                           {"MAE", m.mae},
                           {"MAPE", m.mape},
                           {"horizon_mae", m.horizon_mae},
                           {"epochs", m.epochs}});
    atomic_write_json(dir / "metrics.json", metrics);

    Json timings = Json::array();
    for (const TaskMetric& m : result.metrics)
        timings.push_back({{"task", m.task}, {"wall_seconds", m.wall_seconds}});
    atomic_write_json(dir / "timings.json",
                      Json{{"per_task", timings}, {"total_wall_seconds", result.total_wall_seconds}});

    std::string csv = "phase,task,epoch,train_loss,val_mae,lr\n";
    char buf[128];
    for (const EpochRow& r : result.log) {
        std::snprintf(buf, sizeof(buf), "%s,%zu,%d,%.17g,%.17g,%.17g\n", r.phase.c_str(), r.task,
                      r.epoch, r.train_loss, r.val_mae, r.lr);
        csv += buf;
    }
    atomic_write(dir / "epochlog.csv", csv);

    if (!result.reports.empty()) {
        // final-phase variances with the accumulated stable fractions
        const FreezeReport& last = result.reports.back();
        Json items = Json::array();
        for (const auto& item : last.items)
            items.push_back({{"name", item.name},
                             {"shape", item.shape},
                             {"stable_fraction", item.stable_fraction},
                             {"variance_histogram", detail::variance_histogram(item.variance)}});
        atomic_write_json(dir / "freeze_report.json",
                          Json{{"delta", last.delta},
                               {"overall_stable_fraction", last.overall_stable_fraction()},
                               {"parameters", items}});
    }

    if (opt.mode != "single") {
        Json phases = Json::array();
        for (const PhaseInfo& p : result.phases)
            phases.push_back(
                {{"phase", p.phase}, {"task", p.task}, {"epochs", p.epochs}, {"lr", p.lr}});
        atomic_write_json(dir / "roada_run.json",
                          Json{{"task_order", resolve_task_order(opt.roada, result.metrics.size())},
                               {"seed", opt.roada.seed},
                               {"variance_threshold", opt.roada.variance_threshold},
                               {"rolling_lr_factor", opt.roada.rolling_lr_factor},
                               {"base_lr", opt.roada.base_lr},
                               {"rolling_lr", opt.roada.base_lr * opt.roada.rolling_lr_factor},
                               {"phases", phases}});
    }
}

// Entry point shared by the CLI and the test suites. Validates that the tasks
// form one multi-task family (same grid, interval and channels), completes
// the model configuration from the data, and dispatches on mode.
inline RunResult run_experiment(std::vector<STDataset> datasets, RunOptions opt) {
    if (datasets.empty()) throw config_error("run_experiment: no datasets");
    if (opt.mode != "single" && opt.mode != "roada" && opt.mode != "ablation")
        throw config_error("run_experiment: unknown mode '" + opt.mode + "'");
    const DatasetManifest& first = datasets[0].manifest;
    for (const STDataset& ds : datasets) {
        if (ds.manifest.nodes != first.nodes || ds.manifest.channels != first.channels ||
            ds.manifest.interval_minutes != first.interval_minutes)
            throw config_error("run_experiment: task datasets must share nodes, channels and "
                               "interval (offending dataset: " + ds.manifest.name + ")");
    }
    std::vector<TaskData> tasks;
    for (std::size_t k = 0; k < datasets.size(); ++k)
        tasks.push_back(prepare_task(std::move(datasets[k]), k, opt.model.input_len,
                                     opt.model.horizon));

    opt.model.nodes = first.nodes;
    opt.model.slots_per_day = first.slots_per_day();
    opt.model.c_in = first.channels + 2;
    opt.roada.seed = opt.train.seed;

    RunResult result;
    if (opt.mode == "single")
        result = run_single(tasks, opt);
    else
        result = roada_full(tasks, opt);
    if (!opt.out_dir.empty()) write_run_artifacts(opt.out_dir, opt, result);
    return result;
}

// ---- checkpoint consumers ----

struct LoadedModel {
    std::unique_ptr<Model> model;
    std::vector<std::unique_ptr<Parameter>> prompts;
    Json meta;
    bool has_stats = false;
    NormStats stats;
    std::size_t task_id = 0;
};

inline LoadedModel load_model_checkpoint(const fs::path& dir) {
    LoadedModel lm;
    lm.meta = load_checkpoint_meta(dir);
    ModelConfig cfg = model_config_from_json(lm.meta.at("model"));
    lm.model = std::make_unique<Model>(cfg, 0);
    std::vector<LoadedParam> params = load_checkpoint(dir);
    std::vector<LoadedParam> shared;
    for (auto& lp : params) {
        if (is_prompt_param(lp.name)) {
            auto p = std::make_unique<Parameter>(lp.name, std::move(lp.value));
            p->frozen = std::move(lp.frozen);
            lm.prompts.push_back(std::move(p));
        } else {
            shared.push_back(std::move(lp));
        }
    }
    restore_into(lm.model->params(), shared);
    if (lm.prompts.empty()) throw io_error("checkpoint has no prompt parameter: " + dir.string());
    if (lm.meta.contains("norm_stats")) {
        lm.stats = detail::norm_stats_from_json(lm.meta.at("norm_stats"));
        lm.has_stats = true;
    }
    if (lm.meta.contains("task_id")) lm.task_id = lm.meta.at("task_id").get<std::size_t>();
    return lm;
}

inline Parameter& select_prompt(LoadedModel& lm, long prompt_index) {
    if (prompt_index >= 0) {
        if (static_cast<std::size_t>(prompt_index) >= lm.prompts.size())
            throw config_error("prompt index out of range");
        return *lm.prompts[static_cast<std::size_t>(prompt_index)];
    }
    std::string want = "prompt/task" + std::to_string(lm.task_id);
    for (auto& p : lm.prompts)
        if (p->name == want) return *p;
    return *lm.prompts[0];
}

// Evaluation without training: test-split MAE/MAPE using the normalization
// statistics recorded at training time (falling back to the dataset's own
// train-split statistics for checkpoints without them, e.g. W*).
inline EvalReport evaluate_checkpoint(LoadedModel& lm, STDataset ds, long prompt_index = -1) {
    const ModelConfig& cfg = lm.model->config();
    TaskData td = prepare_task(std::move(ds), lm.task_id, cfg.input_len, cfg.horizon);
    if (lm.has_stats) td.stats = lm.stats;
    return evaluate_test(*lm.model, select_prompt(lm, prompt_index), td);
}

// One window's attention maps across all stages and heads as a flat record
// list; rows of every matrix are softmax outputs summing to 1.
inline Json export_attention_json(LoadedModel& lm, STDataset ds, std::size_t window_index,
                                  long prompt_index = -1) {
    const ModelConfig& cfg = lm.model->config();
    TaskData td = prepare_task(std::move(ds), lm.task_id, cfg.input_len, cfg.horizon);
    if (lm.has_stats) td.stats = lm.stats;
    if (window_index >= td.split.test_windows.size())
        throw config_error("window index " + std::to_string(window_index) +
                           " out of range: test split has " +
                           std::to_string(td.split.test_windows.size()) + " windows");
    std::size_t start = td.split.test_windows[window_index];
    ModelInput in = make_batch(td, {&start, 1}, cfg.input_len, cfg.horizon);
    ForwardCtx ctx;
    ctx.record = false;
    AttentionMaps maps;
    lm.model->forward(ctx, in, select_prompt(lm, prompt_index), &maps);

    Json records = Json::array();
    for (const auto& stage : maps.stages) {
        std::size_t l = stage.seq_len;
        for (std::size_t h = 0; h < stage.per_head.size(); ++h) {
            const Tensor& m = stage.per_head[h];
            std::size_t groups = m.dim(0);
            for (std::size_t g = 0; g < groups; ++g) {
                std::vector<double> flat(m.ptr() + g * l * l, m.ptr() + (g + 1) * l * l);
                records.push_back({{"stage", stage.stage},
                                   {"head", h},
                                   {"axis", stage.axis},
                                   {"matrix", flat},
                                   {"batch_index", window_index},
                                   {"context_index", g % stage.inner}});
            }
        }
    }
    return records;
}

}  // namespace cmust
