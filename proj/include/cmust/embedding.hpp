#pragma once

#include <utility>
#include <vector>

#include "cmust/autodiff.hpp"
#include "cmust/parameter.hpp"

namespace cmust {

// Feature layout of the integrated representation H: contiguous, disjoint
// slices in fixed order observation | spatial | temporal | prompt.
struct SliceLayout {
    std::size_t d_obs = 8, d_s = 4, d_t = 12, d_p = 8;

    std::size_t d_h() const { return d_obs + d_s + d_t + d_p; }
    std::size_t obs_offset() const { return 0; }
    std::size_t s_offset() const { return d_obs; }
    std::size_t t_offset() const { return d_obs + d_s; }
    std::size_t p_offset() const { return d_obs + d_s + d_t; }

    void validate() const {
        if (d_obs == 0 || d_s == 0 || d_t == 0 || d_p == 0)
            throw config_error("slice layout: all widths must be positive");
    }
};

// One model-ready window batch. Observation values are normalized and carry
// tod/dow indicator channels appended after the data channels.
struct ModelInput {
    std::size_t batch = 0;     // B
    Tensor x_obs;              // [B, T, N, C_in]
    Tensor coords_norm;        // [N, 2], min-max normalized per axis
    std::vector<int> tod;      // B*T
    std::vector<int> dow;      // B*T
    Tensor ts;                 // [B, T, 6]
    Tensor target;             // [B, T', N, C_out], normalized; may be empty
};

// Per-forward state: binds parameters as graph leaves (or constants when
// gradients are off) and harvests leaf gradients back after backward().
struct ForwardCtx {
    bool record = true;

    Var use(Parameter& p) {
        if (!record) return constant(p.value);
        Var v = leaf(p.value);
        bound_.emplace_back(&p, v.node);
        return v;
    }

    void harvest() {
        for (auto& [p, n] : bound_) {
            if (n->grad.data.empty())
                p->grad.fill(0.0);
            else
                p->grad = n->grad;
            p->grad_valid = true;
        }
    }

private:
    std::vector<std::pair<Parameter*, NodePtr>> bound_;
};

}  // namespace cmust
