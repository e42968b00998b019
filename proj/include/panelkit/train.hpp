#pragma once

// Training loop: supervised forward on the real stream, optional adversarial
// token losses bridging the comics stream, per-task backward sweeps feeding
// both the optimizer and the gradient-norm weight update, per-epoch
// checkpoints, and a line-delimited report stream.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>

#include "panelkit/checkpoint.hpp"
#include "panelkit/data.hpp"
#include "panelkit/losses.hpp"
#include "panelkit/metrics.hpp"
#include "panelkit/model.hpp"
#include "panelkit/optim.hpp"

namespace panelkit {

struct TrainHyper {
    double lr = 5e-5;
    long warmup = 2000;
    long epochs = 20;
    long batch = 4;
    std::uint64_t seed = 0;
    bool dta = false;
    double adv_weight = 0.1;
    GradNormConfig gradnorm{};
    double weight_decay = 0.01;
};

struct TrainStepReport {
    long step = 0;
    long epoch = 0;
    double lr = 0.0;
    double l_ce = 0.0, l_depth = 0.0, l_mtl = 0.0;
    double w_seg = 1.0, w_depth = 1.0;
    double g_seg = 0.0, g_depth = 0.0;
    bool dta = false;
    double loss_d = 0.0, loss_g = 0.0;
    bool warn_all_ignored = false;
};

// One structured record per step; adversarial fields appear only when DTA is
// enabled.
inline std::string report_json(const TrainStepReport& r) {
    std::ostringstream os;
    os.precision(17);
    os << "{\"step\":" << r.step << ",\"epoch\":" << r.epoch << ",\"lr\":" << r.lr
       << ",\"l_ce\":" << r.l_ce << ",\"l_depth\":" << r.l_depth << ",\"l_mtl\":" << r.l_mtl
       << ",\"w_seg\":" << r.w_seg << ",\"w_depth\":" << r.w_depth << ",\"g_seg\":" << r.g_seg
       << ",\"g_depth\":" << r.g_depth;
    if (r.dta) os << ",\"loss_d\":" << r.loss_d << ",\"loss_g\":" << r.loss_g;
    if (r.warn_all_ignored) os << ",\"warn_all_ignored\":true";
    os << "}";
    return os.str();
}

// Supervision planes padded to the model's working extents: labels fill with
// the ignore value, depth validity fills with zero, so the loss never reads
// padding.
inline std::shared_ptr<const std::vector<int>> pad_labels(const Sample& s, long hp, long wp) {
    std::vector<int> out(static_cast<std::size_t>(hp * wp), kIgnoreLabel);
    for (long r = 0; r < s.h; ++r)
        for (long c = 0; c < s.w; ++c)
            out[static_cast<std::size_t>(r * wp + c)] = s.seg_labels[static_cast<std::size_t>(r * s.w + c)];
    return std::make_shared<const std::vector<int>>(std::move(out));
}

inline std::pair<std::shared_ptr<const std::vector<float>>, std::shared_ptr<const std::vector<std::uint8_t>>>
pad_depth(const Sample& s, long hp, long wp) {
    std::vector<float> gt(static_cast<std::size_t>(hp * wp), 0.0f);
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(hp * wp), 0);
    for (long r = 0; r < s.h; ++r)
        for (long c = 0; c < s.w; ++c) {
            gt[static_cast<std::size_t>(r * wp + c)] = s.depth[static_cast<std::size_t>(r * s.w + c)];
            mask[static_cast<std::size_t>(r * wp + c)] = s.depth_valid[static_cast<std::size_t>(r * s.w + c)];
        }
    return {std::make_shared<const std::vector<float>>(std::move(gt)),
            std::make_shared<const std::vector<std::uint8_t>>(std::move(mask))};
}

namespace detail {

using GradVec = std::map<std::string, std::vector<float>>;

inline void accumulate(GradVec& acc, const std::map<std::string, TensorT<float>>& grads, double scale) {
    for (const auto& [name, g] : grads) {
        auto& v = acc[name];
        if (v.empty()) v.assign(static_cast<std::size_t>(g.size()), 0.0f);
        for (long i = 0; i < g.size(); ++i) v[static_cast<std::size_t>(i)] += static_cast<float>(scale) * g.data()[i];
    }
}

inline std::map<std::string, TensorT<float>> to_tensors(const GradVec& acc) {
    std::map<std::string, TensorT<float>> out;
    for (const auto& [name, v] : acc)
        out.emplace(name, TensorT<float>::from({static_cast<long>(v.size())}, v));
    return out;
}

inline double norm_over_prefix(const GradVec& acc, const std::string& prefix) {
    double s = 0.0;
    for (const auto& [name, v] : acc) {
        if (name.rfind(prefix, 0) != 0) continue;
        for (float x : v) s += static_cast<double>(x) * static_cast<double>(x);
    }
    return std::sqrt(s);
}

}  // namespace detail

struct TrainResult {
    std::vector<std::string> checkpoints;
    std::string last_checkpoint;
    long steps = 0;
    LossWeights weights;
};

class Trainer {
public:
    Trainer(ModelConfig cfg, TrainHyper hyper)
        : cfg_(std::move(cfg)), hyper_(hyper), params_(hyper.seed), opt_(0.9, 0.999, 1e-8, hyper.weight_decay) {
        cfg_.validate();
        cfg_.dta_enabled = hyper_.dta;
    }

    ParamStore<float>& params() { return params_; }
    const ModelConfig& config() const { return cfg_; }
    LossWeights& weights() { return weights_; }
    GradNormState& gradnorm_state() { return gn_state_; }
    AdamW<float>& optimizer() { return opt_; }

    // `real` carries supervision; `comics` (parallel, same scenes) feeds the
    // adversarial stream when DTA is on.
    TrainResult run(const std::vector<Sample>& real, const std::vector<Sample>& comics,
                    const std::string& out_dir, std::ostream* report_stream = nullptr,
                    const std::function<void(const TrainStepReport&)>& on_step = {}) {
        if (real.empty()) throw data_error("train: no supervised samples");
        if (hyper_.dta && comics.size() != real.size())
            throw data_error("train: DTA requires one comics twin per supervised sample");
        std::filesystem::create_directories(out_dir);

        const long steps_per_epoch = std::max<long>(1, static_cast<long>(real.size()) / hyper_.batch);
        const long total_steps = steps_per_epoch * hyper_.epochs;
        const std::string shared_prefix =
            "enc.s4.b" + std::to_string(cfg_.stage_depths[3] - 1) + ".";

        TrainResult result;
        Rng shuffle_rng(hyper_.seed ^ 0xda7a5e7ULL);
        for (long epoch = 0; epoch < hyper_.epochs; ++epoch) {
            std::vector<std::size_t> order(real.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            for (std::size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<long>(i) - 1))]);

            for (long step = 0; step < steps_per_epoch; ++step) {
                const double lr = warmup_cosine_lr(global_step_, total_steps, hyper_.lr, hyper_.warmup);
                TrainStepReport rep = run_step(real, comics, order, step, lr, shared_prefix);
                rep.epoch = epoch;
                if (!std::isfinite(rep.l_mtl) || (hyper_.dta && (!std::isfinite(rep.loss_d) || !std::isfinite(rep.loss_g))))
                    throw numeric_abort("non-finite loss at step " + std::to_string(rep.step) + ": " +
                                        report_json(rep));
                if (report_stream) (*report_stream) << report_json(rep) << "\n";
                if (on_step) on_step(rep);
                ++global_step_;
            }

            char name[64];
            std::snprintf(name, sizeof(name), "ckpt_epoch_%03ld.pfck", epoch + 1);
            const std::string path = (std::filesystem::path(out_dir) / name).string();
            save_state(path, epoch + 1);
            result.checkpoints.push_back(path);
            result.last_checkpoint = (std::filesystem::path(out_dir) / "last.pfck").string();
            save_state(result.last_checkpoint, epoch + 1);
        }
        result.steps = global_step_;
        result.weights = weights_;
        return result;
    }

    void save_state(const std::string& path, long epoch) const {
        TrainerSnapshot snap;
        snap.cfg = cfg_;
        snap.w_seg = weights_.w_seg;
        snap.w_depth = weights_.w_depth;
        snap.gradnorm_initialized = gn_state_.initialized;
        snap.l0_seg = gn_state_.l0_seg;
        snap.l0_depth = gn_state_.l0_depth;
        snap.epoch = epoch;
        snap.global_step = global_step_;
        save_model_checkpoint(path, cfg_, params_, &opt_, &snap);
    }

private:
    TrainStepReport run_step(const std::vector<Sample>& real, const std::vector<Sample>& comics,
                             const std::vector<std::size_t>& order, long step, double lr,
                             const std::string& shared_prefix) {
        const long batch = hyper_.batch;
        const double inv_batch = 1.0 / static_cast<double>(batch);

        struct InFlight {
            std::unique_ptr<TapeT<float>> tape;
            TensorT<float> l_ce, l_depth;
            TokenGridT<float> real_tokens;  // tracked, DTA only
            long valid_ce = 0;
        };
        std::vector<InFlight> flight;
        flight.reserve(static_cast<std::size_t>(batch));

        detail::GradVec g_ce, g_dep, g_adv, g_disc;
        double l_ce_acc = 0.0, l_dep_acc = 0.0, loss_d_acc = 0.0, loss_g_acc = 0.0;
        bool warn_ignored = false;

        opt_.begin_step();

        for (long b = 0; b < batch; ++b) {
            const Sample& s = real[order[static_cast<std::size_t>((step * batch + b) % static_cast<long>(real.size()))]];
            InFlight f;
            f.tape = std::make_unique<TapeT<float>>();
            TokenGridT<float> capture;
            MtlForwardT<float> fwd =
                forward_mtl(s.image, cfg_, params_, f.tape.get(), nullptr, hyper_.dta ? &capture : nullptr);
            auto labels = pad_labels(s, fwd.hp, fwd.wp);
            auto [gt, mask] = pad_depth(s, fwd.hp, fwd.wp);
            f.l_ce = ce_seg_loss(fwd.seg_logits, labels, kIgnoreLabel, &f.valid_ce);
            if (f.valid_ce == 0) warn_ignored = true;
            f.l_depth = depth_loss(fwd.depth, gt, mask);
            l_ce_acc += static_cast<double>(f.l_ce.item()) * inv_batch;
            l_dep_acc += static_cast<double>(f.l_depth.item()) * inv_batch;

            if (hyper_.dta) {
                f.real_tokens = capture;
                // the comics stream runs untracked with injection from the
                // detached real tokens; its stage tokens feed the
                // discriminator loss as data
                DtaCtxT<float> ctx;
                ctx.tokens = TokenGridT<float>{capture.h, capture.w, capture.t.detached()};
                ctx.transferability =
                    transferability(d_token(TokenBatchT<float>{capture.t.detached(), DomainTag::Real},
                                            params_, nullptr));
                const Sample& twin = comics[order[static_cast<std::size_t>((step * batch + b) % static_cast<long>(comics.size()))]];
                TokenGridT<float> comics_capture;
                encoder_forward(pad_for_model(twin.image, cfg_), cfg_, params_, nullptr, &ctx, &comics_capture);

                TapeT<float> tape_d;
                TokenAdvLossT<float> adv = token_adv_loss(
                    TokenBatchT<float>{comics_capture.t.detached(), DomainTag::Comics},
                    TokenBatchT<float>{capture.t.detached(), DomainTag::Real}, params_, &tape_d);
                tape_d.backward(adv.loss_d);
                loss_d_acc += static_cast<double>(adv.loss_d.item()) * inv_batch;
                detail::accumulate(g_disc, tape_d.named_grads(), inv_batch);
            }
            flight.push_back(std::move(f));
        }

        // discriminator update first, so the generator pass sees the new one
        if (hyper_.dta)
            opt_.apply(params_, detail::to_tensors(g_disc), lr,
                       [](const std::string& n) { return n.rfind("dta.disc.", 0) == 0; });

        for (auto& f : flight) {
            if (hyper_.dta) {
                TokenBatchT<float> fake =
                    g_f(TokenBatchT<float>{f.real_tokens.t, DomainTag::Real}, params_, f.tape.get());
                TensorT<float> lg = bce_logits(d_token_logits(fake.tokens, params_, f.tape.get()), 1.0);
                loss_g_acc += static_cast<double>(lg.item()) * inv_batch;
                f.tape->backward(lg);
                detail::accumulate(g_adv, f.tape->named_grads(), inv_batch);
            }
            f.tape->backward(f.l_ce);
            detail::accumulate(g_ce, f.tape->named_grads(), inv_batch);
            f.tape->backward(f.l_depth);
            detail::accumulate(g_dep, f.tape->named_grads(), inv_batch);
            f.tape.reset();
        }

        const double n_seg = detail::norm_over_prefix(g_ce, shared_prefix);
        const double n_dep = detail::norm_over_prefix(g_dep, shared_prefix);

        // combined update: weighted task gradients plus the generator/backbone
        // share of the adversarial loss; the discriminator keeps its own step
        detail::GradVec combined;
        detail::accumulate(combined, detail::to_tensors(g_ce), weights_.w_seg);
        detail::accumulate(combined, detail::to_tensors(g_dep), weights_.w_depth);
        if (hyper_.dta) detail::accumulate(combined, detail::to_tensors(g_adv), hyper_.adv_weight);
        opt_.apply(params_, detail::to_tensors(combined), lr,
                   [](const std::string& n) { return n.rfind("dta.disc.", 0) != 0; });

        TrainStepReport rep;
        rep.step = global_step_;
        rep.lr = lr;
        rep.l_ce = l_ce_acc;
        rep.l_depth = l_dep_acc;
        rep.w_seg = weights_.w_seg;
        rep.w_depth = weights_.w_depth;
        rep.l_mtl = weights_.w_seg * l_ce_acc + weights_.w_depth * l_dep_acc;
        rep.dta = hyper_.dta;
        rep.loss_d = loss_d_acc;
        rep.loss_g = loss_g_acc;
        rep.warn_all_ignored = warn_ignored;
        gradnorm_step(gn_state_, weights_, l_ce_acc, l_dep_acc, n_seg, n_dep, hyper_.gradnorm, &rep.g_seg,
                      &rep.g_depth);
        return rep;
    }

    ModelConfig cfg_;
    TrainHyper hyper_;
    ParamStore<float> params_;
    AdamW<float> opt_;
    LossWeights weights_;
    GradNormState gn_state_;
    long global_step_ = 0;
};

}  // namespace panelkit
