#pragma once

#include <cmath>
#include <vector>

#include "cmust/dataset.hpp"
#include "cmust/rng.hpp"

namespace cmust {

struct SyntheticSpec {
    std::uint64_t seed = 0;
    std::size_t tasks = 3;
    std::size_t nodes = 16;
    std::size_t t_all = 1344;
    int interval_minutes = 15;
    double coupling = 1.0;       // 1 = tasks are affine images of one shared field
    double noise_sd = 0.1;
};

namespace detail {

inline constexpr double kTwoPi = 6.283185307179586476925286766559;

struct GridLayout {
    std::size_t rows, cols;
};

// largest factorization rows*cols == n with rows <= cols
inline GridLayout grid_for(std::size_t n) {
    std::size_t rows = static_cast<std::size_t>(std::sqrt(static_cast<double>(n)));
    while (rows > 1 && n % rows != 0) --rows;
    return {rows, n / rows};
}

}  // namespace detail

// Coupled multi-task synthetic generator. All tasks observe affine images of
// one shared latent field (daily + weekly sinusoids plus a smooth spatial
// gradient); a task-specific smooth perturbation is blended in with weight
// (1 - coupling), then Gaussian noise is added. Pure function of its
// arguments: the same spec always yields bit-identical datasets.
inline std::vector<STDataset> generate_synthetic(const SyntheticSpec& spec) {
    if (spec.tasks < 1) throw config_error("generate_synthetic: need at least one task");
    if (spec.nodes < 1 || spec.t_all < 1)
        throw config_error("generate_synthetic: node and step counts must be positive");
    if (spec.interval_minutes <= 0 || 1440 % spec.interval_minutes != 0)
        throw config_error("generate_synthetic: interval must divide 1440 minutes");
    if (spec.coupling < 0.0 || spec.coupling > 1.0)
        throw config_error("generate_synthetic: coupling must lie in [0,1]");
    if (spec.noise_sd < 0.0) throw config_error("generate_synthetic: noise_sd must be >= 0");

    auto grid = detail::grid_for(spec.nodes);
    std::vector<double> xs(spec.nodes), ys(spec.nodes);
    std::vector<std::array<double, 2>> coords(spec.nodes);
    for (std::size_t n = 0; n < spec.nodes; ++n) {
        std::size_t i = n / grid.cols, j = n % grid.cols;
        xs[n] = grid.cols > 1 ? static_cast<double>(j) / static_cast<double>(grid.cols - 1) : 0.0;
        ys[n] = grid.rows > 1 ? static_cast<double>(i) / static_cast<double>(grid.rows - 1) : 0.0;
        coords[n] = {-74.00 + 0.01 * static_cast<double>(j), 40.70 + 0.01 * static_cast<double>(i)};
    }

    // shared latent field; the mixed space-time term makes coordinates
    // genuinely informative for prediction
    auto latent = [&](std::size_t t, std::size_t n) {
        double minutes = static_cast<double>(t) * spec.interval_minutes;
        double day = detail::kTwoPi * minutes / 1440.0;
        double week = detail::kTwoPi * minutes / (1440.0 * 7.0);
        return std::sin(day) + 0.5 * std::sin(2.0 * day + 1.0) + 0.3 * std::sin(week) +
               0.8 * (xs[n] + ys[n]) + 0.4 * std::sin(day + detail::kTwoPi * xs[n]);
    };

    std::vector<STDataset> out;
    for (std::size_t k = 0; k < spec.tasks; ++k) {
        Rng task_rng(sub_seed(spec.seed, "synthetic-task", k));
        double a = task_rng.uniform(0.8, 1.25);
        double b = task_rng.uniform(4.0, 8.0);
        double freq = 2.0 + static_cast<double>(task_rng.below(4));
        double phase = task_rng.uniform(0.0, detail::kTwoPi);
        double cx = task_rng.uniform();
        double cy = task_rng.uniform();

        STDataset ds;
        ds.manifest.name = "task" + std::to_string(k);
        ds.manifest.t_all = spec.t_all;
        ds.manifest.nodes = spec.nodes;
        ds.manifest.channels = 1;
        ds.manifest.interval_minutes = spec.interval_minutes;
        ds.manifest.start_timestamp = "2024-01-01T00:00:00Z";  // a Monday
        ds.manifest.coords = coords;
        ds.manifest.channel_names = {"value"};
        ds.observations = Tensor::zeros({spec.t_all, spec.nodes, 1});

        double pert_w = 1.0 - spec.coupling;
        for (std::size_t t = 0; t < spec.t_all; ++t) {
            double minutes = static_cast<double>(t) * spec.interval_minutes;
            double day = detail::kTwoPi * minutes / 1440.0;
            for (std::size_t n = 0; n < spec.nodes; ++n) {
                double pert =
                    std::sin(day * freq + phase + detail::kTwoPi * (cx * xs[n] + cy * ys[n]));
                double v = a * latent(t, n) + b + pert_w * pert +
                           spec.noise_sd * task_rng.normal();
                ds.observations[t * spec.nodes + n] = v;
            }
        }
        ds.validate();
        out.push_back(std::move(ds));
    }
    return out;
}

}  // namespace cmust
