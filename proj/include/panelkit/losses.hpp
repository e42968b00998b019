#pragma once

// Task losses, the weighted multitask combination, and the gradient-norm
// balancing step that keeps the task weights on the sum-2 simplex.

#include <map>

#include "panelkit/tensor.hpp"

namespace panelkit {

struct numeric_abort : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Mean NLL of the true class over non-ignored pixels, fused over logits.
template <class S>
TensorT<S> ce_seg_loss(const TensorT<S>& logits, std::shared_ptr<const std::vector<int>> labels,
                       int ignore_label, long* valid_out = nullptr) {
    return cross_entropy_logits(logits, std::move(labels), ignore_label, valid_out);
}

// Masked mean absolute error; the depth-loss slot is pluggable and this is
// the default implementation.
template <class S>
TensorT<S> depth_loss(const TensorT<S>& pred, std::shared_ptr<const std::vector<S>> gt,
                      std::shared_ptr<const std::vector<std::uint8_t>> valid_mask,
                      long* valid_out = nullptr) {
    return l1_masked(pred, std::move(gt), std::move(valid_mask), valid_out);
}

struct LossWeights {
    double w_seg = 1.0;
    double w_depth = 1.0;
};

// w_seg * L_CE + w_depth * L_depth with the weights held constant in the
// task-gradient pass.
template <class S>
TensorT<S> mtl_loss(const TensorT<S>& l_ce, const TensorT<S>& l_depth, const LossWeights& w) {
    if (w.w_seg <= 0.0 || w.w_depth <= 0.0)
        throw std::invalid_argument("mtl_loss: weights must be positive");
    return add(scale(l_ce, static_cast<S>(w.w_seg)), scale(l_depth, static_cast<S>(w.w_depth)));
}

struct GradNormConfig {
    double alpha = 1.5;
    double weight_lr = 0.025;
};

struct GradNormState {
    bool initialized = false;
    double l0_seg = 0.0;
    double l0_depth = 0.0;

    void capture_initial(double l_seg, double l_depth) {
        if (initialized) return;
        l0_seg = l_seg;
        l0_depth = l_depth;
        initialized = true;
    }
};

// L2 norm of the gradient entries whose parameter name starts with `prefix`.
template <class S>
double grad_norm_over_prefix(const std::map<std::string, TensorT<S>>& grads, const std::string& prefix) {
    double acc = 0.0;
    for (const auto& [name, g] : grads) {
        if (name.rfind(prefix, 0) != 0) continue;
        for (long i = 0; i < g.size(); ++i) {
            const double v = static_cast<double>(g.data()[i]);
            acc += v * v;
        }
    }
    return std::sqrt(acc);
}

// One gradient-norm balancing update. n_seg/n_depth are the shared-layer
// gradient norms of the unweighted task losses, so G_i = w_i * n_i and
// dG_i/dw_i = n_i. The targets mean(G) * r_i^alpha are held constant, the
// weights take one signed step and are renormalized to sum 2.
inline void gradnorm_step(GradNormState& st, LossWeights& w, double l_seg, double l_depth, double n_seg,
                          double n_depth, const GradNormConfig& cfg, double* g_seg_out = nullptr,
                          double* g_depth_out = nullptr) {
    st.capture_initial(l_seg, l_depth);
    const double g_seg = w.w_seg * n_seg;
    const double g_depth = w.w_depth * n_depth;
    if (g_seg_out) *g_seg_out = g_seg;
    if (g_depth_out) *g_depth_out = g_depth;

    const double r_seg_raw = st.l0_seg > 0.0 ? l_seg / st.l0_seg : 1.0;
    const double r_depth_raw = st.l0_depth > 0.0 ? l_depth / st.l0_depth : 1.0;
    const double r_mean = 0.5 * (r_seg_raw + r_depth_raw);
    const double r_seg = r_mean > 0.0 ? r_seg_raw / r_mean : 1.0;
    const double r_depth = r_mean > 0.0 ? r_depth_raw / r_mean : 1.0;

    const double g_mean = 0.5 * (g_seg + g_depth);
    const double target_seg = g_mean * std::pow(r_seg, cfg.alpha);
    const double target_depth = g_mean * std::pow(r_depth, cfg.alpha);

    auto sign = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };
    w.w_seg -= cfg.weight_lr * sign(g_seg - target_seg) * n_seg;
    w.w_depth -= cfg.weight_lr * sign(g_depth - target_depth) * n_depth;

    w.w_seg = std::max(w.w_seg, 1e-4);
    w.w_depth = std::max(w.w_depth, 1e-4);
    const double norm = 2.0 / (w.w_seg + w.w_depth);
    w.w_seg *= norm;
    w.w_depth *= norm;
}

}  // namespace panelkit
