#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cmust/harness.hpp"

namespace cmust {

struct RoAdaConfig {
    double variance_threshold = 1e-6;  // delta
    double base_lr = 1e-3;             // gamma
    double rolling_lr_factor = 0.01;   // rolling phases run at gamma * factor
    double weight_decay = 3e-4;
    int patience = 5;
    int max_epochs_warmup = 50;
    int max_epochs_refine = 50;
    std::vector<std::size_t> task_order;  // empty = natural order
    std::uint64_t seed = 0;
    bool per_tensor = false;        // freeze whole tensors instead of elements
    bool refine_unfrozen = true;    // false = literal Algorithm-1 refinement (masks lifted)
    std::size_t ae_latent = 16;     // d_e
    int ae_epochs = 300;
    double ae_lr = 0.2;

    void validate() const {
        if (variance_threshold <= 0.0) throw config_error("roada: variance_threshold must be > 0");
        if (rolling_lr_factor <= 0.0 || rolling_lr_factor > 1.0)
            throw config_error("roada: rolling_lr_factor must lie in (0, 1]");
        if (base_lr <= 0.0 || ae_lr <= 0.0 || ae_epochs < 0 || ae_latent == 0)
            throw config_error("roada: bad learning configuration");
    }
};

// ---- task summarization prompts ----

// Mean observation per time-of-day slot across all days; a trailing partial
// day contributes to the slots it covers.
inline Tensor daily_average_sample(const STDataset& ds) {
    const DatasetManifest& m = ds.manifest;
    std::size_t lt = m.slots_per_day();
    if (m.t_all < lt)
        throw config_error("daily_average_sample: dataset " + m.name +
                           " is shorter than one day (" + std::to_string(m.t_all) + " < " +
                           std::to_string(lt) + " steps)");
    std::size_t cols = m.nodes * m.channels;
    Tensor sums = Tensor::zeros({lt, m.nodes, m.channels});
    std::vector<std::size_t> counts(lt, 0);
    std::int64_t start = ds.start_epoch_minutes();
    for (std::size_t t = 0; t < m.t_all; ++t) {
        std::size_t slot = static_cast<std::size_t>(
            temporal_indicator_at(start, m.interval_minutes, static_cast<std::int64_t>(t)).tod);
        counts[slot] += 1;
        const double* src = ds.observations.ptr() + t * cols;
        double* dst = sums.ptr() + slot * cols;
        for (std::size_t i = 0; i < cols; ++i) dst[i] += src[i];
    }
    for (std::size_t s = 0; s < lt; ++s) {
        double* dst = sums.ptr() + s * cols;
        for (std::size_t i = 0; i < cols; ++i) dst[i] /= static_cast<double>(counts[s]);
    }
    return sums;
}

// [L_t,N,C] -> [N, L_t*C], min-max scaled to [0,1] per channel
inline Tensor ae_scale_input(const Tensor& x_samp) {
    std::size_t lt = x_samp.dim(0), n = x_samp.dim(1), c = x_samp.dim(2);
    std::vector<double> lo(c, x_samp[0]), hi(c, x_samp[0]);
    for (std::size_t ch = 0; ch < c; ++ch) {
        lo[ch] = hi[ch] = x_samp[ch];
        for (std::size_t i = 0; i < lt * n; ++i) {
            double v = x_samp[i * c + ch];
            lo[ch] = std::min(lo[ch], v);
            hi[ch] = std::max(hi[ch], v);
        }
    }
    Tensor out = Tensor::zeros({n, lt * c});
    for (std::size_t l = 0; l < lt; ++l)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < c; ++ch) {
                double range = std::max(hi[ch] - lo[ch], 1e-8);
                out[i * (lt * c) + l * c + ch] = (x_samp[(l * n + i) * c + ch] - lo[ch]) / range;
            }
    return out;
}

inline Tensor ae_encode(const Tensor& x_flat, const Tensor& w, const Tensor& b) {
    std::size_t n = x_flat.dim(0), f = x_flat.dim(1), de = w.dim(1);
    if (w.dim(0) != f || b.size() != de) throw shape_error("ae_encode: weight shapes disagree");
    Tensor s = Tensor::zeros({n, de});
    gemm(x_flat.ptr(), w.ptr(), s.ptr(), n, f, de);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < de; ++j) s[i * de + j] = sigmoid_scalar(s[i * de + j] + b[j]);
    return s;
}

struct TaskPromptArtifact {
    std::size_t task_id = 0;
    Tensor x_samp;                       // [L_t, N, C]
    Tensor enc_w, enc_b, dec_w, dec_b;   // sigmoid encoder, linear decoder
    Tensor latent;                       // S in (0,1)^{N x d_e}
    Tensor prompt_init;                  // [N, d_p]
    double initial_mse = 0.0;
    double final_mse = 0.0;
};

// Per node: flatten L_t*C -> sigmoid encoder (width d_e) -> linear decoder,
// trained by full-batch gradient descent on the reconstruction MSE.
inline TaskPromptArtifact train_autoencoder(const Tensor& x_samp, std::size_t d_e, int epochs,
                                            double lr, std::uint64_t seed) {
    if (x_samp.rank() != 3) throw shape_error("train_autoencoder: [L_t,N,C] sample required");
    TaskPromptArtifact art;
    art.x_samp = x_samp;
    Tensor x = ae_scale_input(x_samp);
    std::size_t f = x.dim(1);

    Rng rng(seed);
    auto init = [&](std::size_t in, std::size_t out) {
        double limit = std::sqrt(6.0 / static_cast<double>(in + out));
        Tensor t = Tensor::zeros({in, out});
        for (double& v : t.data) v = rng.uniform(-limit, limit);
        return t;
    };
    art.enc_w = init(f, d_e);
    art.enc_b = Tensor::zeros({d_e});
    art.dec_w = init(d_e, f);
    art.dec_b = Tensor::zeros({f});

    Tensor* weights[4] = {&art.enc_w, &art.enc_b, &art.dec_w, &art.dec_b};
    for (int epoch = 0; epoch <= epochs; ++epoch) {
        Var ew = leaf(art.enc_w), eb = leaf(art.enc_b), dw = leaf(art.dec_w), db = leaf(art.dec_b);
        Var s = sigmoid(add_bias(matmul(constant(x), ew), eb));
        Var recon = add_bias(matmul(s, dw), db);
        Var loss = mse_mean(recon, x);
        if (epoch == 0) art.initial_mse = loss.value()[0];
        art.final_mse = loss.value()[0];
        if (epoch == epochs) break;
        backward(loss);
        Var* leaves[4] = {&ew, &eb, &dw, &db};
        for (int i = 0; i < 4; ++i) {
            const Tensor& g = leaves[i]->grad();
            if (g.data.empty()) continue;
            for (std::size_t j = 0; j < weights[i]->size(); ++j) (*weights[i])[j] -= lr * g[j];
        }
        require_finite(art.enc_w, "train_autoencoder");
    }
    art.latent = ae_encode(x, art.enc_w, art.enc_b);
    return art;
}

// Fixed seeded random projection d_e -> d_p; applied once at initialization,
// after which the prompt is an ordinary trainable per-task parameter.
inline Tensor build_prompt(const Tensor& latent, std::size_t d_p, std::uint64_t seed) {
    std::size_t n = latent.dim(0), d_e = latent.dim(1);
    Rng rng(sub_seed(seed, "prompt-projection"));
    Tensor proj = Tensor::zeros({d_e, d_p});
    double scale = 1.0 / std::sqrt(static_cast<double>(d_e));
    for (double& v : proj.data) v = rng.normal() * scale;
    Tensor out = Tensor::zeros({n, d_p});
    gemm(latent.ptr(), proj.ptr(), out.ptr(), n, d_e, d_p);
    return out;
}

// ---- weight behavior modeling ----

// Ordered per-parameter snapshot lists. The first entry of each list is the
// carried-in final weights of the previous task.
class SnapshotHistory {
public:
    void reset(const std::vector<Parameter*>& params) {
        names_.clear();
        lists_.clear();
        record(params);
    }

    void record(const std::vector<Parameter*>& params) {
        if (names_.empty()) {
            for (const Parameter* p : params) {
                names_.push_back(p->name);
                lists_.push_back({p->value});
            }
            return;
        }
        if (params.size() != names_.size())
            throw config_error("snapshot history: parameter set changed");
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (params[i]->name != names_[i])
                throw config_error("snapshot history: parameter order changed at " + names_[i]);
            if (params[i]->value.shape != lists_[i].front().shape)
                throw shape_error("snapshot history: shape drift for " + names_[i]);
            lists_[i].push_back(params[i]->value);
        }
    }

    std::size_t length() const { return lists_.empty() ? 0 : lists_[0].size(); }
    const std::vector<std::string>& names() const { return names_; }
    const std::vector<Tensor>& of(std::size_t i) const { return lists_[i]; }

private:
    std::vector<std::string> names_;
    std::vector<std::vector<Tensor>> lists_;
};

struct FreezeReport {
    struct Item {
        std::string name;
        Shape shape;
        Tensor variance;                  // element-wise population variance
        std::vector<std::uint8_t> stable; // var < delta
        double stable_fraction = 0.0;
    };
    std::vector<Item> items;
    double delta = 0.0;

    double overall_stable_fraction() const {
        std::size_t stable = 0, total = 0;
        for (const auto& it : items) {
            total += it.stable.size();
            for (auto s : it.stable) stable += s ? 1 : 0;
        }
        return total ? static_cast<double>(stable) / static_cast<double>(total) : 0.0;
    }
};

// Element-wise population variance over each parameter's snapshot list
// (Welford), partitioned at delta: stable iff var < delta. In per_tensor mode
// the whole tensor is stable iff its mean element variance is below delta.
inline FreezeReport variance_partition(const SnapshotHistory& hist, double delta,
                                       bool per_tensor = false) {
    if (hist.length() < 2)
        throw config_error("variance_partition: need at least two snapshots, have " +
                           std::to_string(hist.length()));
    FreezeReport report;
    report.delta = delta;
    for (std::size_t i = 0; i < hist.names().size(); ++i) {
        const auto& snaps = hist.of(i);
        FreezeReport::Item item;
        item.name = hist.names()[i];
        item.shape = snaps.front().shape;
        std::size_t n = snaps.front().size();
        item.variance = Tensor::zeros(item.shape);
        item.stable.assign(n, 0);
        std::vector<double> mean(n, 0.0);
        for (std::size_t k = 0; k < snaps.size(); ++k) {
            if (snaps[k].shape != item.shape)
                throw shape_error("variance_partition: shape drift for " + item.name);
            double cnt = static_cast<double>(k + 1);
            for (std::size_t j = 0; j < n; ++j) {
                double x = snaps[k][j];
                double d = x - mean[j];
                mean[j] += d / cnt;
                item.variance[j] += d * (x - mean[j]);
            }
        }
        for (std::size_t j = 0; j < n; ++j)
            item.variance[j] /= static_cast<double>(snaps.size());
        if (per_tensor) {
            double total = 0.0;
            for (std::size_t j = 0; j < n; ++j) total += item.variance[j];
            bool all_stable = (total / static_cast<double>(n)) < delta;
            if (all_stable) item.stable.assign(n, 1);
        } else {
            for (std::size_t j = 0; j < n; ++j) item.stable[j] = item.variance[j] < delta ? 1 : 0;
        }
        std::size_t stable_count = 0;
        for (auto s : item.stable) stable_count += s ? 1 : 0;
        item.stable_fraction = static_cast<double>(stable_count) / static_cast<double>(n);
        report.items.push_back(std::move(item));
    }
    return report;
}

inline bool is_prompt_param(const std::string& name) { return name.rfind("prompt", 0) == 0; }

// freeze_mask |= stable, accumulating across tasks; prompt parameters are
// never frozen.
inline void apply_freeze(const std::vector<Parameter*>& params, const FreezeReport& report) {
    for (const auto& item : report.items) {
        if (is_prompt_param(item.name)) continue;
        Parameter* p = nullptr;
        for (Parameter* q : params)
            if (q->name == item.name) {
                p = q;
                break;
            }
        if (!p) throw config_error("apply_freeze: parameter not found: " + item.name);
        if (p->size() != item.stable.size())
            throw shape_error("apply_freeze: mask size mismatch for " + item.name);
        for (std::size_t j = 0; j < item.stable.size(); ++j)
            p->frozen[j] = (p->frozen[j] || item.stable[j]) ? 1 : 0;
    }
}

// ---- rolling protocol ----

struct PhaseInfo {
    std::string phase;
    std::size_t task = 0;
    int epochs = 0;
    double lr = 0.0;
};

using WarmupObserver = std::function<void(const std::string& phase, std::size_t task, int epoch)>;
// fires after a rolling phase's variance partition and freeze have been applied
using PhaseEndObserver = std::function<void(const std::string& phase, std::size_t task)>;

struct WarmupOutcome {
    std::vector<FreezeReport> reports;  // one per rolling phase, in phase order
    std::vector<EpochRow> log;
    std::vector<PhaseInfo> phases;
};

inline std::vector<std::size_t> resolve_task_order(const RoAdaConfig& cfg, std::size_t k) {
    std::vector<std::size_t> order = cfg.task_order;
    if (order.empty())
        for (std::size_t i = 0; i < k; ++i) order.push_back(i);
    if (order.size() != k) throw config_error("roada: task_order must list every task once");
    std::vector<bool> seen(k, false);
    for (std::size_t t : order) {
        if (t >= k || seen[t]) throw config_error("roada: task_order must be a permutation");
        seen[t] = true;
    }
    return order;
}

// Warm-up rolling: train the first task at the base rate, then roll through
// the remaining tasks (and finally revisit the first) at the reduced rate,
// recording epoch-end snapshots and freezing low-variance elements after each
// rolling phase. Leaves W* in the model.
inline WarmupOutcome warmup_rolling(Model& model, const std::vector<Parameter*>& prompts,
                                    const std::vector<TaskData>& tasks, const RoAdaConfig& rcfg,
                                    const TrainConfig& base, bool apply_freezing = true,
                                    const WarmupObserver& observer = {},
                                    const PhaseEndObserver& on_phase_end = {}) {
    rcfg.validate();
    if (tasks.empty()) throw config_error("warmup_rolling: need at least one task");
    if (prompts.size() != tasks.size())
        throw config_error("warmup_rolling: one prompt per task required");
    std::vector<std::size_t> order = resolve_task_order(rcfg, tasks.size());

    WarmupOutcome out;
    std::vector<Parameter*> shared = model.shared_params();
    SnapshotHistory hist;

    auto run_phase = [&](const std::string& phase, std::size_t task, const TrainConfig& tc,
                         bool snapshot_epochs) {
        EpochHook hook = [&](int epoch) {
            if (snapshot_epochs) hist.record(shared);
            if (observer) observer(phase, task, epoch);
        };
        TrainResult res = train_until_convergence(model, *prompts[task], tasks[task], tc, phase,
                                                  hook);
        out.log.insert(out.log.end(), res.log.begin(), res.log.end());
        out.phases.push_back({phase, task, res.epochs, tc.lr});
    };

    // task 1 at the base rate
    TrainConfig warm = base;
    warm.lr = rcfg.base_lr;
    warm.weight_decay = rcfg.weight_decay;
    warm.patience = rcfg.patience;
    warm.max_epochs = rcfg.max_epochs_warmup;
    run_phase("warmup-task" + std::to_string(order[0]), order[0], warm, false);
    hist.reset(shared);

    // tasks 2..k, then the task-1 revisit, at the reduced rate
    TrainConfig rolling = warm;
    rolling.lr = rcfg.base_lr * rcfg.rolling_lr_factor;
    std::vector<std::pair<std::string, std::size_t>> rolling_phases;
    for (std::size_t i = 1; i < order.size(); ++i)
        rolling_phases.emplace_back("rolling-task" + std::to_string(order[i]), order[i]);
    rolling_phases.emplace_back("revisit-task" + std::to_string(order[0]), order[0]);

    for (const auto& [phase, task] : rolling_phases) {
        run_phase(phase, task, rolling, true);
        if (apply_freezing) {
            FreezeReport report =
                variance_partition(hist, rcfg.variance_threshold, rcfg.per_tensor);
            apply_freeze(shared, report);
            out.reports.push_back(std::move(report));
        }
        hist.reset(shared);
        if (on_phase_end) on_phase_end(phase, task);
    }
    return out;
}

struct RefineOutcome {
    TrainResult train;
    EvalReport test;
};

// Task-specific refinement from W*: stable elements stay frozen (unless the
// literal-Algorithm-1 mode lifts the masks), the task prompt is trainable,
// and remaining weights fine-tune at the base rate.
inline RefineOutcome refine(Model& model, const std::vector<Tensor>& wstar_values,
                            const std::vector<std::vector<std::uint8_t>>& wstar_masks,
                            Parameter& prompt, const TaskData& task, const RoAdaConfig& rcfg,
                            const TrainConfig& base) {
    std::vector<Parameter*> shared = model.shared_params();
    if (wstar_values.size() != shared.size() || wstar_masks.size() != shared.size())
        throw config_error("refine: W* snapshot does not match the model parameter set");
    for (std::size_t i = 0; i < shared.size(); ++i) {
        if (shared[i]->value.shape != wstar_values[i].shape)
            throw shape_error("refine: W* shape mismatch for " + shared[i]->name);
        shared[i]->value = wstar_values[i];
        shared[i]->frozen = rcfg.refine_unfrozen
                                ? wstar_masks[i]
                                : std::vector<std::uint8_t>(shared[i]->size(), 0);
    }
    TrainConfig tc = base;
    tc.lr = rcfg.base_lr;
    tc.weight_decay = rcfg.weight_decay;
    tc.patience = rcfg.patience;
    tc.max_epochs = rcfg.max_epochs_refine;
    RefineOutcome out;
    out.train = train_until_convergence(model, prompt, task, tc,
                                        "refine-task" + std::to_string(task.task_id));
    out.test = evaluate_test(model, prompt, task, tc.batch_size);
    return out;
}

}  // namespace cmust
