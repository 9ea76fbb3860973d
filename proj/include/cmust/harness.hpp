#pragma once

#include <chrono>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cmust/dataset.hpp"
#include "cmust/msti.hpp"

namespace cmust {

struct TrainConfig {
    double lr = 1e-3;
    double weight_decay = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double huber_delta = 1.0;
    std::size_t batch_size = 16;
    int patience = 5;
    int max_epochs = 50;
    std::uint64_t seed = 0;
    std::string profile = "tiny";

    void validate() const {
        if (lr <= 0.0 || batch_size == 0) throw config_error("train: lr and batch_size must be positive");
        if (patience < 0 || max_epochs < 0 || patience > max_epochs)
            throw config_error("train: need 0 <= patience <= max_epochs");
        if (huber_delta <= 0.0) throw config_error("train: huber_delta must be positive");
    }
};

struct EvalReport {
    double mae = 0.0;
    double mape = 0.0;
    std::size_t sample_count = 0;
    std::vector<double> horizon_mae;
    double runtime_seconds = 0.0;
};

// A task dataset with everything training needs precomputed: chronological
// split, train-only normalization stats, normalized coordinates and per-step
// temporal indicators.
struct TaskData {
    std::size_t task_id = 0;
    STDataset dataset;
    WindowedSplit split;
    NormStats stats;
    Tensor coords_norm;                          // [N, 2]
    std::vector<TemporalIndicator> indicators;   // per step

    std::size_t model_channels() const { return dataset.manifest.channels + 2; }
};

inline Tensor normalize_coords(const std::vector<std::array<double, 2>>& coords) {
    Tensor out = Tensor::zeros({coords.size(), 2});
    for (int axis = 0; axis < 2; ++axis) {
        double lo = coords[0][axis], hi = coords[0][axis];
        for (const auto& c : coords) {
            lo = std::min(lo, c[axis]);
            hi = std::max(hi, c[axis]);
        }
        double range = hi - lo;
        for (std::size_t n = 0; n < coords.size(); ++n)
            out[n * 2 + axis] = range > 0.0 ? (coords[n][axis] - lo) / range : 0.0;
    }
    return out;
}

inline TaskData prepare_task(STDataset ds, std::size_t task_id, std::size_t input_len = 12,
                             std::size_t horizon = 12, std::size_t stride = 1) {
    ds.validate();
    TaskData td;
    td.task_id = task_id;
    td.split = make_split(ds.manifest.t_all, input_len, horizon, stride);
    td.stats = compute_norm_stats(ds, td.split.ranges[0].length());
    td.coords_norm = normalize_coords(ds.manifest.coords);
    td.indicators.reserve(ds.manifest.t_all);
    std::int64_t start = ds.start_epoch_minutes();
    for (std::size_t t = 0; t < ds.manifest.t_all; ++t)
        td.indicators.push_back(temporal_indicator_at(start, ds.manifest.interval_minutes,
                                                      static_cast<std::int64_t>(t)));
    td.dataset = std::move(ds);
    return td;
}

// Build one batch. Data channels are z-scored with the train-split stats;
// tod/L_t and dow/7 are appended as extra observation channels. The target is
// channel 0, normalized.
inline ModelInput make_batch(const TaskData& td, std::span<const std::size_t> starts,
                             std::size_t input_len, std::size_t horizon) {
    const DatasetManifest& m = td.dataset.manifest;
    std::size_t B = starts.size(), N = m.nodes, C = m.channels;
    std::size_t c_in = C + 2;
    double lt = static_cast<double>(m.slots_per_day());
    ModelInput in;
    in.batch = B;
    in.x_obs = Tensor::zeros({B, input_len, N, c_in});
    in.coords_norm = td.coords_norm;
    in.tod.resize(B * input_len);
    in.dow.resize(B * input_len);
    in.ts = Tensor::zeros({B, input_len, 6});
    in.target = Tensor::zeros({B, horizon, N, 1});
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t s = starts[b];
        for (std::size_t t = 0; t < input_len; ++t) {
            std::size_t step = s + t;
            const TemporalIndicator& ind = td.indicators[step];
            in.tod[b * input_len + t] = ind.tod;
            in.dow[b * input_len + t] = ind.dow;
            for (int j = 0; j < 6; ++j) in.ts[(b * input_len + t) * 6 + j] = ind.ts[j];
            for (std::size_t n = 0; n < N; ++n) {
                double* row = in.x_obs.ptr() + ((b * input_len + t) * N + n) * c_in;
                const double* src = td.dataset.observations.ptr() + (step * N + n) * C;
                for (std::size_t c = 0; c < C; ++c) row[c] = normalize_value(src[c], td.stats, c);
                row[C] = static_cast<double>(ind.tod) / lt;
                row[C + 1] = static_cast<double>(ind.dow) / 7.0;
            }
        }
        for (std::size_t t = 0; t < horizon; ++t) {
            std::size_t step = s + input_len + t;
            for (std::size_t n = 0; n < N; ++n)
                in.target[(b * horizon + t) * N + n] =
                    normalize_value(td.dataset.observations[(step * N + n) * C], td.stats, 0);
        }
    }
    return in;
}

inline void check_model_matches_task(const Model& model, const TaskData& td) {
    const ModelConfig& c = model.config();
    const DatasetManifest& m = td.dataset.manifest;
    if (c.nodes != m.nodes || c.slots_per_day != m.slots_per_day() ||
        c.c_in != td.model_channels())
        throw config_error("model/profile does not match dataset " + m.name + ": nodes " +
                           std::to_string(c.nodes) + "/" + std::to_string(m.nodes) + ", L_t " +
                           std::to_string(c.slots_per_day) + "/" +
                           std::to_string(m.slots_per_day()) + ", channels " +
                           std::to_string(c.c_in) + "/" + std::to_string(td.model_channels()));
}

// MAE and horizon-wise MAE over all (window, step, node) entries plus MAPE
// masked at |y| < 1e-4, on denormalized values.
class MetricAccumulator {
public:
    explicit MetricAccumulator(std::size_t horizon) : abs_sum_(horizon, 0.0), counts_(horizon, 0) {}

    void add(std::size_t horizon_step, double pred, double target) {
        double err = std::abs(pred - target);
        abs_sum_[horizon_step] += err;
        counts_[horizon_step] += 1;
        if (std::abs(target) >= 1e-4) {
            mape_sum_ += err / std::abs(target);
            mape_count_ += 1;
        }
    }

    EvalReport finish() const {
        EvalReport r;
        r.horizon_mae.resize(abs_sum_.size());
        double total = 0.0;
        for (std::size_t t = 0; t < abs_sum_.size(); ++t) {
            if (counts_[t] == 0) throw config_error("evaluate: empty horizon step");
            r.horizon_mae[t] = abs_sum_[t] / static_cast<double>(counts_[t]);
            total += abs_sum_[t];
            r.sample_count += counts_[t];
        }
        r.mae = total / static_cast<double>(r.sample_count);
        r.mape = mape_count_ > 0 ? mape_sum_ / static_cast<double>(mape_count_) : 0.0;
        return r;
    }

private:
    std::vector<double> abs_sum_;
    std::vector<std::size_t> counts_;
    double mape_sum_ = 0.0;
    std::size_t mape_count_ = 0;
};

// Evaluation over a window list. Accumulation runs in window order, so the
// result does not depend on how windows are batched.
inline EvalReport evaluate_windows(Model& model, Parameter& prompt, const TaskData& td,
                                   std::span<const std::size_t> windows,
                                   std::size_t batch_size = 32) {
    check_model_matches_task(model, td);
    if (windows.empty()) throw config_error("evaluate: empty window set");
    auto t0 = std::chrono::steady_clock::now();
    const ModelConfig& cfg = model.config();
    std::size_t horizon = cfg.horizon, N = cfg.nodes;
    MetricAccumulator acc(horizon);
    for (std::size_t off = 0; off < windows.size(); off += batch_size) {
        std::size_t n = std::min(batch_size, windows.size() - off);
        ModelInput in = make_batch(td, windows.subspan(off, n), cfg.input_len, horizon);
        ForwardCtx ctx;
        ctx.record = false;
        Var pred = model.forward(ctx, in, prompt);
        const Tensor& p = pred.value();
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t t = 0; t < horizon; ++t)
                for (std::size_t nn = 0; nn < N; ++nn) {
                    std::size_t i = (b * horizon + t) * N + nn;
                    acc.add(t, denormalize_value(p[i], td.stats, 0),
                            denormalize_value(in.target[i], td.stats, 0));
                }
    }
    EvalReport r = acc.finish();
    r.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

inline EvalReport evaluate_test(Model& model, Parameter& prompt, const TaskData& td,
                                std::size_t batch_size = 32) {
    return evaluate_windows(model, prompt, td, td.split.test_windows, batch_size);
}

struct EpochRow {
    std::string phase;
    std::size_t task = 0;
    int epoch = 0;
    double train_loss = 0.0;
    double val_mae = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    int epochs = 0;
    double best_val_mae = 0.0;
    std::vector<EpochRow> log;
};

using EpochHook = std::function<void(int epoch)>;

// Mini-batch Huber training with early stopping on validation MAE. The
// pre-training validation score seeds the best-weights baseline, so a model
// that never improves returns its incoming weights unchanged. Optimizer
// moments are reset at phase start; the hook fires after every epoch while
// current (not best) weights are live.
inline TrainResult train_until_convergence(Model& model, Parameter& prompt, const TaskData& td,
                                           const TrainConfig& cfg, const std::string& phase,
                                           const EpochHook& on_epoch = {}) {
    cfg.validate();
    check_model_matches_task(model, td);
    std::vector<Parameter*> params = model.shared_params();
    if (prompt.trainable) params.push_back(&prompt);
    for (Parameter* p : params) p->reset_optimizer_state();

    AdamConfig adam{cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps};
    Rng shuffle_rng(sub_seed(cfg.seed, "shuffle/" + phase));

    auto snapshot = [&] {
        std::vector<Tensor> vals;
        vals.reserve(params.size());
        for (Parameter* p : params) vals.push_back(p->value);
        return vals;
    };
    auto restore = [&](const std::vector<Tensor>& vals) {
        for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = vals[i];
    };

    auto validate = [&](int epoch) {
        try {
            return evaluate_windows(model, prompt, td, td.split.val_windows, cfg.batch_size).mae;
        } catch (const numeric_error& e) {
            throw train_error("training diverged in phase " + phase + ": validation after epoch " +
                                  std::to_string(epoch) + " hit non-finite values: " + e.what(),
                              -1);
        }
    };

    TrainResult result;
    double best = validate(0);
    result.best_val_mae = best;
    std::vector<Tensor> best_weights = snapshot();
    int no_improve = 0;

    std::vector<std::size_t> order = td.split.train_windows;
    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t off = 0; off < order.size(); off += cfg.batch_size) {
            std::size_t n = std::min(cfg.batch_size, order.size() - off);
            ModelInput in = make_batch(td, {order.data() + off, n}, model.config().input_len,
                                       model.config().horizon);
            zero_grad(params);
            ForwardCtx ctx;
            try {
                Var pred = model.forward(ctx, in, prompt);
                Var loss = huber_mean(pred, in.target, cfg.huber_delta);
                loss_sum += loss.value()[0];
                backward(loss);
            } catch (const numeric_error& e) {
                throw train_error("training diverged in phase " + phase + " at batch " +
                                      std::to_string(batches) + ": " + e.what(),
                                  static_cast<long>(batches));
            }
            ctx.harvest();
            adam_step(params, adam);
            batches += 1;
        }
        double val = validate(epoch);
        result.log.push_back(
            {phase, td.task_id, epoch, loss_sum / static_cast<double>(batches), val, cfg.lr});
        result.epochs = epoch;
        if (on_epoch) on_epoch(epoch);
        if (val < best) {
            best = val;
            best_weights = snapshot();
            no_improve = 0;
        } else {
            no_improve += 1;
        }
        if (no_improve >= cfg.patience) break;
    }
    restore(best_weights);
    result.best_val_mae = best;
    return result;
}

// ---- data-sparsity transforms ----

// keeps a seeded random fraction of nodes (at least one), in index order
inline STDataset subsample_nodes(const STDataset& ds, double fraction, std::uint64_t seed) {
    if (fraction <= 0.0 || fraction > 1.0)
        throw config_error("subsample_nodes: fraction must lie in (0, 1]");
    const DatasetManifest& m = ds.manifest;
    if (fraction == 1.0) return ds;
    std::size_t keep = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(m.nodes))));
    std::vector<std::size_t> idx(m.nodes);
    for (std::size_t i = 0; i < m.nodes; ++i) idx[i] = i;
    Rng rng(sub_seed(seed, "subsample-nodes"));
    rng.shuffle(idx);
    idx.resize(keep);
    std::sort(idx.begin(), idx.end());

    STDataset out;
    out.manifest = m;
    out.manifest.nodes = keep;
    out.manifest.coords.clear();
    for (std::size_t i : idx) out.manifest.coords.push_back(m.coords[i]);
    out.observations = Tensor::zeros({m.t_all, keep, m.channels});
    for (std::size_t t = 0; t < m.t_all; ++t)
        for (std::size_t k = 0; k < keep; ++k)
            for (std::size_t c = 0; c < m.channels; ++c)
                out.observations[(t * keep + k) * m.channels + c] =
                    ds.observations[(t * m.nodes + idx[k]) * m.channels + c];
    out.validate();
    return out;
}

// aggregates groups of `multiplier` consecutive steps by mean; a trailing
// partial group is dropped and reported via dropped_steps
inline STDataset expand_interval(const STDataset& ds, int multiplier,
                                 std::size_t* dropped_steps = nullptr) {
    if (multiplier < 1) throw config_error("expand_interval: multiplier must be >= 1");
    const DatasetManifest& m = ds.manifest;
    int new_interval = m.interval_minutes * multiplier;
    if (1440 % new_interval != 0)
        throw config_error("expand_interval: resulting interval " + std::to_string(new_interval) +
                           " does not divide 1440 minutes");
    std::size_t new_t = m.t_all / static_cast<std::size_t>(multiplier);
    if (new_t == 0) throw config_error("expand_interval: dataset shorter than one aggregate step");
    if (dropped_steps) *dropped_steps = m.t_all - new_t * static_cast<std::size_t>(multiplier);

    STDataset out;
    out.manifest = m;
    out.manifest.t_all = new_t;
    out.manifest.interval_minutes = new_interval;
    out.observations = Tensor::zeros({new_t, m.nodes, m.channels});
    std::size_t cols = m.nodes * m.channels;
    for (std::size_t t = 0; t < new_t; ++t)
        for (std::size_t g = 0; g < static_cast<std::size_t>(multiplier); ++g) {
            const double* src = ds.observations.ptr() + (t * multiplier + g) * cols;
            double* dst = out.observations.ptr() + t * cols;
            for (std::size_t i = 0; i < cols; ++i) dst[i] += src[i];
        }
    for (double& v : out.observations.data) v /= static_cast<double>(multiplier);
    out.validate();
    return out;
}

}  // namespace cmust
