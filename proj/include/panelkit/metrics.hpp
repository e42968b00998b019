#pragma once

// Evaluation: per-class IoU from a confusion matrix, masked RMSE in metric
// units, and whole-split model evaluation rows.

#include "panelkit/data.hpp"
#include "panelkit/model.hpp"

namespace panelkit {

class ConfusionMatrix {
public:
    explicit ConfusionMatrix(long k) : k_(k), m_(static_cast<std::size_t>(k * k), 0) {
        if (k < 2) throw config_error("confusion matrix needs at least 2 classes");
    }

    void update(const std::vector<int>& pred, const std::vector<int>& gt, int ignore = kIgnoreLabel) {
        if (pred.size() != gt.size()) throw shape_error("confusion update: size mismatch");
        for (std::size_t i = 0; i < gt.size(); ++i) {
            const int g = gt[i];
            if (g == ignore) continue;
            if (g < 0 || g >= k_ || pred[i] < 0 || pred[i] >= k_)
                throw data_error("confusion update: label out of range");
            ++m_[static_cast<std::size_t>(g * k_ + pred[i])];
        }
    }

    void merge(const ConfusionMatrix& o) {
        if (o.k_ != k_) throw shape_error("confusion merge: class count mismatch");
        for (std::size_t i = 0; i < m_.size(); ++i) m_[i] += o.m_[i];
    }

    std::int64_t at(long gt, long pred) const { return m_[static_cast<std::size_t>(gt * k_ + pred)]; }
    std::int64_t total() const {
        std::int64_t t = 0;
        for (auto v : m_) t += v;
        return t;
    }
    long classes() const { return k_; }

private:
    long k_;
    std::vector<std::int64_t> m_;
};

struct MiouResult {
    std::vector<double> per_class;  // NaN for classes absent from both maps
    double mean_percent = 0.0;
};

// IoU_k = TP / (TP + FP + FN); classes absent from both prediction and truth
// are excluded from the mean. Result in [0, 100].
inline MiouResult miou(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw data_error("miou: no valid pixels");
    MiouResult r;
    double acc = 0.0;
    long counted = 0;
    for (long k = 0; k < cm.classes(); ++k) {
        const std::int64_t tp = cm.at(k, k);
        std::int64_t fp = 0, fn = 0;
        for (long j = 0; j < cm.classes(); ++j) {
            if (j != k) {
                fp += cm.at(j, k);
                fn += cm.at(k, j);
            }
        }
        if (tp + fp + fn == 0) {
            r.per_class.push_back(std::nan(""));
            continue;
        }
        const double iou = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
        r.per_class.push_back(iou);
        acc += iou;
        ++counted;
    }
    r.mean_percent = counted > 0 ? 100.0 * acc / static_cast<double>(counted) : 0.0;
    return r;
}

inline MiouResult miou(const std::vector<int>& pred, const std::vector<int>& gt, long k,
                       int ignore = kIgnoreLabel) {
    ConfusionMatrix cm(k);
    cm.update(pred, gt, ignore);
    return miou(cm);
}

// sqrt(mean over the mask of (scale_m * (pred - gt))^2); scale_m maps
// normalized units to meters.
inline double rmse(const std::vector<float>& pred, const std::vector<float>& gt,
                   const std::vector<std::uint8_t>& mask, double scale_m = 1.0) {
    if (pred.size() != gt.size() || (!mask.empty() && mask.size() != gt.size()))
        throw shape_error("rmse: size mismatch");
    double acc = 0.0;
    long n = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        if (!mask.empty() && !mask[i]) continue;
        const double d = scale_m * (static_cast<double>(pred[i]) - static_cast<double>(gt[i]));
        acc += d * d;
        ++n;
    }
    if (n == 0) throw data_error("rmse: empty mask");
    return std::sqrt(acc / static_cast<double>(n));
}

struct EvalRow {
    std::string method;
    bool dta = false;
    double miou_percent = 0.0;
    double rmse = 0.0;
};

inline std::string eval_row_json(const EvalRow& r) {
    std::ostringstream os;
    os.precision(17);
    os << "{\"method\":\"" << r.method << "\",\"dta\":" << (r.dta ? "true" : "false")
       << ",\"miou_percent\":" << r.miou_percent << ",\"rmse\":" << r.rmse << "}";
    return os.str();
}

// Argmax map of a [h,w,k] probability tensor.
inline std::vector<int> argmax_map(const TensorT<float>& probs, long h, long w, long k) {
    std::vector<int> out(static_cast<std::size_t>(h * w));
    for (long i = 0; i < h * w; ++i) {
        const float* row = probs.data() + i * k;
        int best = 0;
        for (long j = 1; j < k; ++j)
            if (row[j] > row[best]) best = static_cast<int>(j);
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

// Runs the model over every sample and aggregates both metrics.
inline EvalRow evaluate_model(const ModelConfig& cfg, ParamStore<float>& params,
                              const std::vector<Sample>& samples, const std::string& method,
                              double scale_m = 1.0) {
    if (samples.empty()) throw data_error("evaluate: empty sample set");
    ConfusionMatrix cm(cfg.num_classes);
    double sq = 0.0;
    long n_depth = 0;
    for (const auto& s : samples) {
        MtlForwardT<float> f = forward_mtl(s.image, cfg, params, nullptr);
        TaskPredictionT<float> pred = to_prediction(f, cfg);
        cm.update(argmax_map(pred.seg_probs, s.h, s.w, cfg.num_classes), s.seg_labels);
        for (long i = 0; i < s.h * s.w; ++i) {
            if (!s.depth_valid[static_cast<std::size_t>(i)]) continue;
            const double d = scale_m * (static_cast<double>(pred.depth.data()[i]) -
                                        static_cast<double>(s.depth[static_cast<std::size_t>(i)]));
            sq += d * d;
            ++n_depth;
        }
    }
    if (n_depth == 0) throw data_error("evaluate: no valid depth pixels");
    EvalRow row;
    row.method = method;
    row.dta = cfg.dta_enabled;
    row.miou_percent = miou(cm).mean_percent;
    row.rmse = std::sqrt(sq / static_cast<double>(n_depth));
    return row;
}

}  // namespace panelkit
