#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "cmust/tensor.hpp"

namespace cmust {

// Named trainable array with per-element freeze mask and Adam moments.
// Elements with frozen[i] != 0 are bit-identical before and after any
// optimizer step; their moments are not advanced either.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    std::vector<std::uint8_t> frozen;
    Tensor m1, m2;
    std::int64_t steps = 0;
    bool trainable = true;
    bool grad_valid = false;

    Parameter(std::string n, Tensor init) : name(std::move(n)), value(std::move(init)) {
        grad = Tensor::zeros(value.shape);
        m1 = Tensor::zeros(value.shape);
        m2 = Tensor::zeros(value.shape);
        frozen.assign(value.size(), 0);
    }

    std::size_t size() const { return value.size(); }

    double frozen_fraction() const {
        if (frozen.empty()) return 0.0;
        std::size_t c = 0;
        for (auto f : frozen) c += f ? 1 : 0;
        return static_cast<double>(c) / static_cast<double>(frozen.size());
    }

    void reset_optimizer_state() {
        m1.fill(0.0);
        m2.fill(0.0);
        steps = 0;
    }
};

// Ordered registry; insertion order is the canonical order for checkpoints
// and snapshots, and is fixed by the model architecture.
class ParameterStore {
public:
    Parameter& add(std::string name, Tensor init) {
        if (by_name_.count(name)) throw config_error("parameter already registered: " + name);
        items_.push_back(std::make_unique<Parameter>(name, std::move(init)));
        by_name_.emplace(items_.back()->name, items_.size() - 1);
        return *items_.back();
    }

    Parameter* find(const std::string& name) {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? nullptr : items_[it->second].get();
    }
    const Parameter* find(const std::string& name) const {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? nullptr : items_[it->second].get();
    }

    Parameter& at(const std::string& name) {
        Parameter* p = find(name);
        if (!p) throw config_error("unknown parameter: " + name);
        return *p;
    }

    std::size_t count() const { return items_.size(); }

    std::vector<Parameter*> all() {
        std::vector<Parameter*> v;
        v.reserve(items_.size());
        for (auto& p : items_) v.push_back(p.get());
        return v;
    }
    std::vector<const Parameter*> all() const {
        std::vector<const Parameter*> v;
        v.reserve(items_.size());
        for (auto& p : items_) v.push_back(p.get());
        return v;
    }

private:
    std::vector<std::unique_ptr<Parameter>> items_;
    std::unordered_map<std::string, std::size_t> by_name_;
};

inline void zero_grad(const std::vector<Parameter*>& params) {
    for (Parameter* p : params) {
        p->grad.fill(0.0);
        p->grad_valid = false;
    }
}

struct AdamConfig {
    double lr = 1e-3;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected Adam with coupled L2 weight decay. Frozen elements are
// skipped entirely: no value update, no moment update, no weight decay.
inline void adam_step(const std::vector<Parameter*>& params, const AdamConfig& cfg) {
    for (Parameter* p : params) {
        if (!p->trainable) continue;
        if (!p->grad_valid)
            throw numeric_error("adam_step: missing gradient on trainable parameter " + p->name);
        p->steps += 1;
        double t = static_cast<double>(p->steps);
        double bc1 = 1.0 - std::pow(cfg.beta1, t);
        double bc2 = 1.0 - std::pow(cfg.beta2, t);
        for (std::size_t i = 0; i < p->size(); ++i) {
            if (p->frozen[i]) continue;
            double g = p->grad[i] + cfg.weight_decay * p->value[i];
            p->m1[i] = cfg.beta1 * p->m1[i] + (1.0 - cfg.beta1) * g;
            p->m2[i] = cfg.beta2 * p->m2[i] + (1.0 - cfg.beta2) * g * g;
            double mhat = p->m1[i] / bc1;
            double vhat = p->m2[i] / bc2;
            p->value[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
        require_finite(p->value, "adam_step");
    }
}

}  // namespace cmust
