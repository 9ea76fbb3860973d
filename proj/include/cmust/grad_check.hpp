#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "cmust/parameter.hpp"
#include "cmust/tensor.hpp"

namespace cmust {

// Central-difference gradient oracle: (f(w+h) - f(w-h)) / 2h per element.
// loss_fn must be a deterministic function of the current parameter values.
inline std::unordered_map<std::string, Tensor> finite_difference_gradient(
    const std::function<double()>& loss_fn, const std::vector<Parameter*>& params, double h) {
    if (h <= 0.0) throw numeric_error("finite_difference_gradient: h must be positive");
    std::unordered_map<std::string, Tensor> out;
    for (Parameter* p : params) {
        Tensor g = Tensor::zeros(p->value.shape);
        for (std::size_t i = 0; i < p->size(); ++i) {
            double saved = p->value[i];
            p->value[i] = saved + h;
            double fp = loss_fn();
            p->value[i] = saved - h;
            double fm = loss_fn();
            p->value[i] = saved;  // bit-exact restore
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw numeric_error("finite_difference_gradient: non-finite loss at perturbed " +
                                    p->name);
            g[i] = (fp - fm) / (2.0 * h);
        }
        out.emplace(p->name, std::move(g));
    }
    return out;
}

// relative error with |a|+|b|+1e-8 denominator
inline double grad_rel_err(double a, double b) {
    return std::abs(a - b) / (std::abs(a) + std::abs(b) + 1e-8);
}

}  // namespace cmust
