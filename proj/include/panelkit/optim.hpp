#pragma once

// Decoupled-weight-decay Adam and the warmup+cosine learning-rate schedule.

#include <functional>
#include <map>
#include <string>

#include "panelkit/params.hpp"

namespace panelkit {

// Linear ramp 0 -> base over warmup_steps, then cosine decay to 0 at
// total_steps.
inline double warmup_cosine_lr(long step, long total_steps, double base_lr, long warmup_steps) {
    if (step < 0) throw std::invalid_argument("warmup_cosine_lr: negative step");
    if (warmup_steps > 0 && step < warmup_steps)
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (step >= total_steps) return 0.0;
    if (total_steps <= warmup_steps) return base_lr;
    const double t = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
    return 0.5 * base_lr * (1.0 + std::cos(3.14159265358979323846 * t));
}

template <class S>
class AdamW {
public:
    AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.01)
        : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

    void begin_step() { ++t_; }
    long step_count() const { return t_; }

    // Apply one update from a gradient map; parameters without a gradient or
    // rejected by the filter are untouched. Decay is decoupled.
    void apply(ParamStore<S>& params, const std::map<std::string, TensorT<S>>& grads, double lr,
               const std::function<bool(const std::string&)>& filter = {}) {
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (const auto& [name, g] : grads) {
            if (filter && !filter(name)) continue;
            if (!params.has(name)) continue;
            TensorT<S>& p = params.at(name);
            if (g.size() != p.size())
                throw shape_error("adamw: gradient shape " + shape_str(g.shape) +
                                  " does not match parameter '" + name + "' " + shape_str(p.shape));
            auto& m = m_[name];
            auto& v = v_[name];
            if (m.empty()) m.assign(static_cast<std::size_t>(p.size()), S(0));
            if (v.empty()) v.assign(static_cast<std::size_t>(p.size()), S(0));
            for (long i = 0; i < p.size(); ++i) {
                const double gi = static_cast<double>(g.data()[i]);
                const double mi = beta1_ * static_cast<double>(m[static_cast<std::size_t>(i)]) + (1.0 - beta1_) * gi;
                const double vi = beta2_ * static_cast<double>(v[static_cast<std::size_t>(i)]) + (1.0 - beta2_) * gi * gi;
                m[static_cast<std::size_t>(i)] = static_cast<S>(mi);
                v[static_cast<std::size_t>(i)] = static_cast<S>(vi);
                const double mhat = mi / bc1;
                const double vhat = vi / bc2;
                double p_new = static_cast<double>(p.data()[i]);
                p_new -= lr * weight_decay_ * p_new;
                p_new -= lr * mhat / (std::sqrt(vhat) + eps_);
                p.data()[i] = static_cast<S>(p_new);
            }
        }
    }

    // One self-contained step (the common path outside the training loop).
    void step(ParamStore<S>& params, const std::map<std::string, TensorT<S>>& grads, double lr,
              const std::function<bool(const std::string&)>& filter = {}) {
        begin_step();
        apply(params, grads, lr, filter);
    }

    const std::map<std::string, std::vector<S>>& first_moments() const { return m_; }
    const std::map<std::string, std::vector<S>>& second_moments() const { return v_; }
    void restore_state(std::map<std::string, std::vector<S>> m, std::map<std::string, std::vector<S>> v,
                       long t) {
        m_ = std::move(m);
        v_ = std::move(v);
        t_ = t;
    }

    double beta1() const { return beta1_; }
    double beta2() const { return beta2_; }
    double eps() const { return eps_; }
    double weight_decay() const { return weight_decay_; }

private:
    double beta1_, beta2_, eps_, weight_decay_;
    long t_ = 0;
    std::map<std::string, std::vector<S>> m_, v_;
};

}  // namespace panelkit
