#pragma once

// Hierarchical windowed-attention encoder: a four-stage pyramid of pre-norm
// transformer blocks over non-overlapping square token windows, alternating
// regular and half-window-shifted partitions, with patch merging between
// stages. Blocks optionally inject cross-domain tokens weighted by a
// per-token transferability score (see dta.hpp).

#include <array>
#include <numeric>
#include <optional>
#include <string>
#include <type_traits>

#include "panelkit/params.hpp"
#include "panelkit/tensor.hpp"

namespace panelkit {

struct ModelConfig {
    long patch_size = 4;
    long embed_dim = 32;  // channels at stage 1; stage s has embed_dim * 2^(s-1)
    std::array<long, 4> stage_depths{2, 2, 2, 2};
    std::array<long, 4> stage_heads{2, 4, 8, 16};
    long window = 4;
    long num_classes = 4;
    bool rel_bias = true;
    bool dta_enabled = false;
    int dta_stage = 3;  // 1-based encoder stage whose blocks accept injected tokens

    static ModelConfig toy() { return ModelConfig{}; }

    static ModelConfig paper() {
        ModelConfig c;
        c.patch_size = 4;
        c.embed_dim = 192;  // head counts {6,12,24,48} require 32-wide heads
        c.stage_depths = {2, 2, 18, 2};
        c.stage_heads = {6, 12, 24, 48};
        c.window = 7;
        c.num_classes = 4;
        return c;
    }

    long stage_channels(int s) const { return embed_dim << (s - 1); }
    long total_blocks() const {
        return std::accumulate(stage_depths.begin(), stage_depths.end(), 0L);
    }

    void validate() const {
        if (patch_size < 1 || embed_dim < 1 || window < 1)
            throw config_error("model config: patch_size, embed_dim and window must be positive");
        if (num_classes < 2) throw config_error("model config: num_classes must be at least 2");
        if (dta_stage < 1 || dta_stage > 4) throw config_error("model config: dta_stage must be in [1,4]");
        for (int s = 1; s <= 4; ++s) {
            if (stage_depths[s - 1] < 1) throw config_error("model config: stage depths must be positive");
            if (stage_heads[s - 1] < 1 || stage_channels(s) % stage_heads[s - 1] != 0)
                throw config_error("model config: head count " + std::to_string(stage_heads[s - 1]) +
                                   " does not divide stage " + std::to_string(s) + " width " +
                                   std::to_string(stage_channels(s)));
        }
    }
};

template <class S>
struct TokenGridT {
    long h = 0, w = 0;
    TensorT<S> t;  // [h*w, channels], row-major over the grid

    long tokens() const { return h * w; }
    long channels() const { return t.shape.empty() ? 0 : t.shape.back(); }
};

template <class S>
struct PyramidT {
    std::array<TokenGridT<S>, 4> level;  // 1/4, 1/8, 1/16, 1/32 of the padded input
};

// Injected cross-domain context for one encoder stage: tokens on the same
// grid as the stage input plus their transferability in [0,1].
template <class S>
struct DtaCtxT {
    TokenGridT<S> tokens;
    TensorT<S> transferability;  // [h*w]
    bool empty() const { return tokens.tokens() == 0; }
};

// ---------------------------------------------------------------------------
// Window geometry. All reorderings are row permutations of the [N, C] token
// matrix, so they ride on permute_rows and are exact inverse pairs.

// Largest window edge that tiles both grid extents and does not exceed the
// configured size.
inline long effective_window(long gh, long gw, long win) {
    const long g = std::gcd(gh, gw);
    for (long d = std::min(win, g); d >= 1; --d)
        if (g % d == 0) return d;
    return 1;
}

inline std::vector<long> window_partition_index(long h, long w, long win) {
    if (h % win != 0 || w % win != 0)
        throw std::logic_error("window_partition: grid " + std::to_string(h) + "x" + std::to_string(w) +
                               " not divisible by window " + std::to_string(win));
    std::vector<long> idx(static_cast<std::size_t>(h * w));
    long o = 0;
    for (long wi = 0; wi < h / win; ++wi)
        for (long wj = 0; wj < w / win; ++wj)
            for (long r = 0; r < win; ++r)
                for (long c = 0; c < win; ++c)
                    idx[static_cast<std::size_t>(o++)] = (wi * win + r) * w + (wj * win + c);
    return idx;
}

inline std::vector<long> invert_index(const std::vector<long>& idx) {
    std::vector<long> inv(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) inv[static_cast<std::size_t>(idx[i])] = static_cast<long>(i);
    return inv;
}

// Roll by (-s, -s): output (r, c) takes input ((r+s) mod h, (c+s) mod w).
inline std::vector<long> cyclic_shift_index(long h, long w, long s) {
    std::vector<long> idx(static_cast<std::size_t>(h * w));
    for (long r = 0; r < h; ++r)
        for (long c = 0; c < w; ++c)
            idx[static_cast<std::size_t>(r * w + c)] = ((r + s) % h) * w + ((c + s) % w);
    return idx;
}

template <class S>
TensorT<S> window_partition_rows(const TensorT<S>& t, long h, long w, long win) {
    return permute_rows(t, window_partition_index(h, w, win));
}
template <class S>
TensorT<S> window_reverse_rows(const TensorT<S>& t, long h, long w, long win) {
    return permute_rows(t, invert_index(window_partition_index(h, w, win)));
}

// Spec-level window ops on grids.
template <class S>
TensorT<S> window_partition(const TokenGridT<S>& g, long win) {
    TensorT<S> rows = window_partition_rows(g.t, g.h, g.w, win);
    return reshape(rows, {g.tokens() / (win * win), win * win, g.channels()});
}
template <class S>
TokenGridT<S> window_reverse(const TensorT<S>& windows, long h, long w, long win) {
    TensorT<S> rows = reshape(windows, {h * w, windows.shape.back()});
    return TokenGridT<S>{h, w, window_reverse_rows(rows, h, w, win)};
}

template <class S>
TokenGridT<S> cyclic_shift(const TokenGridT<S>& g, long s) {
    if (s == 0) return g;
    return TokenGridT<S>{g.h, g.w, permute_rows(g.t, cyclic_shift_index(g.h, g.w, s))};
}
template <class S>
TokenGridT<S> cyclic_unshift(const TokenGridT<S>& g, long s) {
    if (s == 0) return g;
    return TokenGridT<S>{g.h, g.w, permute_rows(g.t, invert_index(cyclic_shift_index(g.h, g.w, s)))};
}

inline constexpr double kMaskNegative = -1e9;

// Additive attention mask for the shifted partition. Tokens are labeled by
// the band they occupy in the shifted frame ([0,h-win), [h-win,h-s), [h-s,h)
// per axis); pairs with different labels were not spatial neighbors before
// the roll and get -1e9.
template <class S>
TensorT<S> build_shift_mask(long h, long w, long win, long s) {
    const long nwh = h / win, nww = w / win;
    const long nw = nwh * nww, t = win * win;
    auto band = [&](long x, long extent) {
        if (extent <= win) return x < extent - s ? 1L : 2L;
        if (x < extent - win) return 0L;
        return x < extent - s ? 1L : 2L;
    };
    std::vector<long> label(static_cast<std::size_t>(h * w));
    for (long r = 0; r < h; ++r)
        for (long c = 0; c < w; ++c)
            label[static_cast<std::size_t>(r * w + c)] = band(r, h) * 3 + band(c, w);
    const auto part = window_partition_index(h, w, win);
    TensorT<S> mask = TensorT<S>::zeros({nw, t, t});
    S* mp = mask.data();
    for (long wi = 0; wi < nw; ++wi)
        for (long i = 0; i < t; ++i)
            for (long j = 0; j < t; ++j) {
                const long li = label[static_cast<std::size_t>(part[static_cast<std::size_t>(wi * t + i)])];
                const long lj = label[static_cast<std::size_t>(part[static_cast<std::size_t>(wi * t + j)])];
                mp[(wi * t + i) * t + j] = li == lj ? S(0) : static_cast<S>(kMaskNegative);
            }
    return mask;
}

// Relative-position index table for a window: pair (i, j) -> offset id in a
// (2*win_cfg-1)^2 table. Sized by the configured window so parameter shapes
// do not depend on the input size.
inline std::shared_ptr<const std::vector<long>> rel_position_index(long win_eff, long win_cfg) {
    const long t = win_eff * win_eff;
    std::vector<long> idx(static_cast<std::size_t>(t * t));
    for (long i = 0; i < t; ++i)
        for (long j = 0; j < t; ++j) {
            const long dr = i / win_eff - j / win_eff + win_cfg - 1;
            const long dc = i % win_eff - j % win_eff + win_cfg - 1;
            idx[static_cast<std::size_t>(i * t + j)] = dr * (2 * win_cfg - 1) + dc;
        }
    return std::make_shared<const std::vector<long>>(std::move(idx));
}

// ---------------------------------------------------------------------------
// Fused per-window multi-head attention core. Operates on window-partitioned
// rows: [nW*T, C] queries/keys/values, optionally [nW*Ti, C] injected keys
// and values whose softmax columns are Hadamard-scaled by a transferability
// weight (own columns keep weight 1; no renormalization afterwards).
//
// Projections live outside as plain matmuls; this node owns logits, softmax,
// masking, relative position bias and the transferability weighting.

template <class S>
TensorT<S> window_attention_core(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v,
                                 long n_windows, long tokens, long heads,
                                 const TensorT<S>& mask,                     // [nW,T,T] or empty
                                 const TensorT<S>& k_inj, const TensorT<S>& v_inj,  // [nW*Ti, C] or empty
                                 const TensorT<S>& t_inj,                    // [nW*Ti] or empty
                                 const TensorT<S>& rel_bias,                 // [(2w-1)^2, heads] or empty
                                 std::shared_ptr<const std::vector<long>> rel_index) {
    const long c = q.shape.back();
    if (c % heads != 0) throw config_error("window attention: heads " + std::to_string(heads) +
                                           " do not divide channels " + std::to_string(c));
    const long n = n_windows * tokens;
    if (q.shape[0] != n || k.shape[0] != n || v.shape[0] != n || k.shape.back() != c ||
        v.shape.back() != c)
        throw shape_error("window attention: q/k/v must be [" + std::to_string(n) + "," +
                          std::to_string(c) + "], got " + shape_str(q.shape) + "/" + shape_str(k.shape) +
                          "/" + shape_str(v.shape));
    const bool has_inj = k_inj.store && k_inj.size() > 0;
    const long ti = has_inj ? k_inj.shape[0] / n_windows : 0;
    if (has_inj && (k_inj.shape[0] != n_windows * ti || v_inj.shape[0] != n_windows * ti ||
                    t_inj.size() != n_windows * ti || k_inj.shape.back() != c))
        throw shape_error("window attention: injected tokens misaligned with windows");
    const bool has_mask = mask.store && mask.size() > 0;
    const bool has_rb = rel_bias.store && rel_bias.size() > 0;
    const long dh = c / heads;
    const S att_scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    const long cols = tokens + ti;

    TapeT<S>* tp = joint_tape(q, k);
    if (!tp) tp = v.tape;
    if (!tp && has_inj) tp = joint_tape(k_inj, v_inj);
    if (!tp && has_inj && t_inj.tracked()) tp = t_inj.tape;
    if (!tp && has_rb && rel_bias.tracked()) tp = rel_bias.tape;

    std::vector<S> out(static_cast<std::size_t>(n * c));
    // post-softmax, pre-Hadamard probabilities, saved for backward
    std::shared_ptr<std::vector<S>> saved_p;
    if (tp) saved_p = std::make_shared<std::vector<S>>(static_cast<std::size_t>(n_windows * heads * tokens * cols));

    const S* qp = q.data();
    const S* kp = k.data();
    const S* vp = v.data();
    const S* kip = has_inj ? k_inj.data() : nullptr;
    const S* vip = has_inj ? v_inj.data() : nullptr;
    const S* tip = has_inj ? t_inj.data() : nullptr;
    const S* mp = has_mask ? mask.data() : nullptr;
    const S* rbp = has_rb ? rel_bias.data() : nullptr;

#pragma omp parallel for schedule(static)
    for (long wi = 0; wi < n_windows; ++wi) {
        std::vector<S> row(static_cast<std::size_t>(cols));
        for (long h = 0; h < heads; ++h) {
            const long hc = h * dh;
            for (long i = 0; i < tokens; ++i) {
                const S* qi = qp + (wi * tokens + i) * c + hc;
                for (long j = 0; j < tokens; ++j) {
                    const S* kj = kp + (wi * tokens + j) * c + hc;
                    S acc = S(0);
                    for (long d = 0; d < dh; ++d) acc += qi[d] * kj[d];
                    acc *= att_scale;
                    if (mp) acc += mp[(wi * tokens + i) * tokens + j];
                    if (rbp) acc += rbp[(*rel_index)[static_cast<std::size_t>(i * tokens + j)] * heads + h];
                    row[static_cast<std::size_t>(j)] = acc;
                }
                for (long j = 0; j < ti; ++j) {
                    const S* kj = kip + (wi * ti + j) * c + hc;
                    S acc = S(0);
                    for (long d = 0; d < dh; ++d) acc += qi[d] * kj[d];
                    row[static_cast<std::size_t>(tokens + j)] = acc * att_scale;
                }
                // stabilized softmax over the concatenated columns
                S mx = row[0];
                for (long j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
                double denom = 0.0;
                for (long j = 0; j < cols; ++j) {
                    row[static_cast<std::size_t>(j)] = std::exp(row[static_cast<std::size_t>(j)] - mx);
                    denom += static_cast<double>(row[static_cast<std::size_t>(j)]);
                }
                const S inv = static_cast<S>(1.0 / denom);
                for (long j = 0; j < cols; ++j) row[static_cast<std::size_t>(j)] *= inv;
                if (saved_p)
                    std::copy(row.begin(), row.end(),
                              saved_p->begin() + ((wi * heads + h) * tokens + i) * cols);
                // weighted sum of values; injected columns carry their transferability
                S* oi = out.data() + (wi * tokens + i) * c + hc;
                std::fill(oi, oi + dh, S(0));
                for (long j = 0; j < tokens; ++j) {
                    const S pj = row[static_cast<std::size_t>(j)];
                    const S* vj = vp + (wi * tokens + j) * c + hc;
                    for (long d = 0; d < dh; ++d) oi[d] += pj * vj[d];
                }
                for (long j = 0; j < ti; ++j) {
                    const S pj = row[static_cast<std::size_t>(tokens + j)] * tip[wi * ti + j];
                    const S* vj = vip + (wi * ti + j) * c + hc;
                    for (long d = 0; d < dh; ++d) oi[d] += pj * vj[d];
                }
            }
        }
    }

    TensorT<S> y = detail::make_output(Shape{n, c}, std::move(out), tp);
    if (tp) {
        const int yid = y.node;
        const int qn = q.node, kn = k.node, vn = v.node;
        const int kin = has_inj ? k_inj.node : -1, vin = has_inj ? v_inj.node : -1;
        const int tn = has_inj ? t_inj.node : -1;
        const int rbn = has_rb ? rel_bias.node : -1;
        const auto qs = q.store, ks = k.store, vs = v.store;
        const auto kis = has_inj ? k_inj.store : nullptr;
        const auto vis = has_inj ? v_inj.store : nullptr;
        const auto tis = has_inj ? t_inj.store : nullptr;
        tp->set_backward(yid, [=](TapeT<S>& t2) {
            const auto& gy = *t2.grad_raw(yid);
            std::vector<S>* gq = qn >= 0 ? &t2.grad_acc(qn) : nullptr;
            std::vector<S>* gk = kn >= 0 ? &t2.grad_acc(kn) : nullptr;
            std::vector<S>* gv = vn >= 0 ? &t2.grad_acc(vn) : nullptr;
            std::vector<S>* gki = kin >= 0 ? &t2.grad_acc(kin) : nullptr;
            std::vector<S>* gvi = vin >= 0 ? &t2.grad_acc(vin) : nullptr;
            std::vector<S>* gt = tn >= 0 ? &t2.grad_acc(tn) : nullptr;
            std::vector<S>* grb = rbn >= 0 ? &t2.grad_acc(rbn) : nullptr;
            // per-window scratch for the shared bias table keeps the
            // reduction order independent of the thread count
            std::vector<std::vector<S>> rb_scratch;
            if (grb) rb_scratch.assign(static_cast<std::size_t>(n_windows),
                                       std::vector<S>(grb->size(), S(0)));

            const S* qp2 = qs->data();
            const S* kp2 = ks->data();
            const S* vp2 = vs->data();
            const S* kip2 = kis ? kis->data() : nullptr;
            const S* vip2 = vis ? vis->data() : nullptr;
            const S* tip2 = tis ? tis->data() : nullptr;
            const S* pall = saved_p->data();

#pragma omp parallel for schedule(static)
            for (long wi = 0; wi < n_windows; ++wi) {
                std::vector<S> dpw(static_cast<std::size_t>(cols)), dl(static_cast<std::size_t>(cols));
                for (long h = 0; h < heads; ++h) {
                    const long hc = h * dh;
                    for (long i = 0; i < tokens; ++i) {
                        const S* prow = pall + ((wi * heads + h) * tokens + i) * cols;
                        const S* go = gy.data() + (wi * tokens + i) * c + hc;
                        // dpw = d(out)/d(weighted prob); dp folds the Hadamard factor
                        for (long j = 0; j < tokens; ++j) {
                            const S* vj = vp2 + (wi * tokens + j) * c + hc;
                            S acc = S(0);
                            for (long d = 0; d < dh; ++d) acc += go[d] * vj[d];
                            dpw[static_cast<std::size_t>(j)] = acc;
                        }
                        for (long j = 0; j < ti; ++j) {
                            const S* vj = vip2 + (wi * ti + j) * c + hc;
                            S acc = S(0);
                            for (long d = 0; d < dh; ++d) acc += go[d] * vj[d];
                            dpw[static_cast<std::size_t>(tokens + j)] = acc;
                        }
                        // value gradients
                        if (gv)
                            for (long j = 0; j < tokens; ++j) {
                                const S pj = prow[j];
                                S* gvj = gv->data() + (wi * tokens + j) * c + hc;
                                for (long d = 0; d < dh; ++d) gvj[d] += pj * go[d];
                            }
                        if (gvi)
                            for (long j = 0; j < ti; ++j) {
                                const S pj = prow[tokens + j] * tip2[wi * ti + j];
                                S* gvj = gvi->data() + (wi * ti + j) * c + hc;
                                for (long d = 0; d < dh; ++d) gvj[d] += pj * go[d];
                            }
                        if (gt)
                            for (long j = 0; j < ti; ++j)
                                (*gt)[static_cast<std::size_t>(wi * ti + j)] +=
                                    dpw[static_cast<std::size_t>(tokens + j)] * prow[tokens + j];
                        // softmax backward over the full row
                        double dot = 0.0;
                        for (long j = 0; j < cols; ++j) {
                            S dp = dpw[static_cast<std::size_t>(j)];
                            if (j >= tokens) dp *= tip2[wi * ti + (j - tokens)];
                            dl[static_cast<std::size_t>(j)] = dp;
                            dot += static_cast<double>(dp) * static_cast<double>(prow[j]);
                        }
                        for (long j = 0; j < cols; ++j)
                            dl[static_cast<std::size_t>(j)] =
                                prow[j] * (dl[static_cast<std::size_t>(j)] - static_cast<S>(dot));
                        if (grb)
                            for (long j = 0; j < tokens; ++j)
                                rb_scratch[static_cast<std::size_t>(wi)]
                                          [(*rel_index)[static_cast<std::size_t>(i * tokens + j)] * heads + h] +=
                                    dl[static_cast<std::size_t>(j)];
                        // logits backward: l = scale * q . k
                        const S* qi = qp2 + (wi * tokens + i) * c + hc;
                        S* gqi = gq ? gq->data() + (wi * tokens + i) * c + hc : nullptr;
                        for (long j = 0; j < tokens; ++j) {
                            const S g = dl[static_cast<std::size_t>(j)] * att_scale;
                            if (g == S(0)) continue;
                            const S* kj = kp2 + (wi * tokens + j) * c + hc;
                            if (gqi)
                                for (long d = 0; d < dh; ++d) gqi[d] += g * kj[d];
                            if (gk) {
                                S* gkj = gk->data() + (wi * tokens + j) * c + hc;
                                for (long d = 0; d < dh; ++d) gkj[d] += g * qi[d];
                            }
                        }
                        for (long j = 0; j < ti; ++j) {
                            const S g = dl[static_cast<std::size_t>(tokens + j)] * att_scale;
                            if (g == S(0)) continue;
                            const S* kj = kip2 + (wi * ti + j) * c + hc;
                            if (gqi)
                                for (long d = 0; d < dh; ++d) gqi[d] += g * kj[d];
                            if (gki) {
                                S* gkj = gki->data() + (wi * ti + j) * c + hc;
                                for (long d = 0; d < dh; ++d) gkj[d] += g * qi[d];
                            }
                        }
                    }
                }
            }
            if (grb)
                for (const auto& scratch : rb_scratch)
                    for (std::size_t i = 0; i < scratch.size(); ++i) (*grb)[i] += scratch[i];
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Layers.

template <class S>
TensorT<S> linear(const TensorT<S>& x, ParamStore<S>& P, const std::string& prefix, long in, long out,
                  std::type_identity_t<TapeT<S>*> tp) {
    TensorT<S> w = tp ? P.use(prefix + ".w", {in, out}, Init::TruncNormal02, *tp)
                      : P.get_or_create(prefix + ".w", {in, out}, Init::TruncNormal02).detached();
    TensorT<S> b = tp ? P.use(prefix + ".b", {out}, Init::Zeros, *tp)
                      : P.get_or_create(prefix + ".b", {out}, Init::Zeros).detached();
    return add(matmul(x, w), b);
}

template <class S>
TensorT<S> layer_norm_p(const TensorT<S>& x, ParamStore<S>& P, const std::string& prefix, long d,
                        std::type_identity_t<TapeT<S>*> tp) {
    TensorT<S> g = tp ? P.use(prefix + ".g", {d}, Init::Ones, *tp)
                      : P.get_or_create(prefix + ".g", {d}, Init::Ones).detached();
    TensorT<S> b = tp ? P.use(prefix + ".b", {d}, Init::Zeros, *tp)
                      : P.get_or_create(prefix + ".b", {d}, Init::Zeros).detached();
    return layer_norm(x, g, b);
}

// One pre-norm windowed transformer block (Eq.-5 structure): attention with
// residual, then a 4x-hidden gelu MLP with residual. When `ctx` carries
// injected tokens the attention becomes transferability-weighted; with an
// empty ctx this is exactly standard windowed self-attention.
template <class S>
TokenGridT<S> swin_block(const TokenGridT<S>& g, bool shifted, long heads, const ModelConfig& cfg,
                         ParamStore<S>& P, const std::string& prefix, std::type_identity_t<TapeT<S>*> tp,
                         std::type_identity_t<const DtaCtxT<S>*> ctx = nullptr) {
    const long c = g.channels();
    const long we = effective_window(g.h, g.w, cfg.window);
    const long s = shifted && (g.h > we || g.w > we) ? we / 2 : 0;
    const bool has_ctx = ctx != nullptr && !ctx->empty();
    if (has_ctx && (ctx->tokens.h != g.h || ctx->tokens.w != g.w || ctx->tokens.channels() != c))
        throw shape_error("dta context grid does not match block input grid");

    auto use = [&](const std::string& name, const Shape& shape, Init init) {
        return tp ? P.use(prefix + name, shape, init, *tp)
                  : P.get_or_create(prefix + name, shape, init).detached();
    };

    TensorT<S> xn = layer_norm_p(g.t, P, prefix + ".ln1", c, tp);
    TensorT<S> yn;
    if (has_ctx) yn = layer_norm_p(ctx->tokens.t, P, prefix + ".ln1", c, tp);

    const auto part_idx = std::make_shared<const std::vector<long>>(window_partition_index(g.h, g.w, we));
    std::shared_ptr<const std::vector<long>> shift_idx;
    TensorT<S> xw = xn, yw = yn, t_inj;
    if (s > 0) {
        shift_idx = std::make_shared<const std::vector<long>>(cyclic_shift_index(g.h, g.w, s));
        xw = permute_rows(xw, shift_idx);
        if (has_ctx) yw = permute_rows(yw, shift_idx);
    }
    xw = permute_rows(xw, part_idx);
    if (has_ctx) {
        yw = permute_rows(yw, part_idx);
        TensorT<S> t2d = reshape(ctx->transferability, {g.tokens(), 1});
        if (s > 0) t2d = permute_rows(t2d, shift_idx);
        t_inj = reshape(permute_rows(t2d, part_idx), {g.tokens()});
    }

    TensorT<S> wq = use(".attn.wq", {c, c}, Init::TruncNormal02);
    TensorT<S> bq = use(".attn.bq", {c}, Init::Zeros);
    TensorT<S> wk = use(".attn.wk", {c, c}, Init::TruncNormal02);
    TensorT<S> bk = use(".attn.bk", {c}, Init::Zeros);
    TensorT<S> wv = use(".attn.wv", {c, c}, Init::TruncNormal02);
    TensorT<S> bv = use(".attn.bv", {c}, Init::Zeros);
    TensorT<S> wo = use(".attn.wo", {c, c}, Init::TruncNormal02);
    TensorT<S> bo = use(".attn.bo", {c}, Init::Zeros);

    TensorT<S> qq = add(matmul(xw, wq), bq);
    TensorT<S> kk = add(matmul(xw, wk), bk);
    TensorT<S> vv = add(matmul(xw, wv), bv);
    TensorT<S> ki, vi;
    if (has_ctx) {
        ki = add(matmul(yw, wk), bk);
        vi = add(matmul(yw, wv), bv);
    }

    TensorT<S> mask;
    if (s > 0) mask = build_shift_mask<S>(g.h, g.w, we, s);
    TensorT<S> rb;
    std::shared_ptr<const std::vector<long>> rel_idx;
    if (cfg.rel_bias) {
        const long table = (2 * cfg.window - 1) * (2 * cfg.window - 1);
        rb = use(".attn.rb", {table, heads}, Init::TruncNormal02);
        rel_idx = rel_position_index(we, cfg.window);
    }

    const long nw = g.tokens() / (we * we);
    TensorT<S> att = window_attention_core(qq, kk, vv, nw, we * we, heads, mask, ki, vi, t_inj, rb, rel_idx);
    att = add(matmul(att, wo), bo);

    att = permute_rows(att, std::make_shared<const std::vector<long>>(invert_index(*part_idx)));
    if (s > 0) att = permute_rows(att, std::make_shared<const std::vector<long>>(invert_index(*shift_idx)));

    TensorT<S> z1 = add(g.t, att);
    TensorT<S> m = layer_norm_p(z1, P, prefix + ".ln2", c, tp);
    m = linear(m, P, prefix + ".mlp.fc1", c, 4 * c, tp);
    m = gelu(m);
    m = linear(m, P, prefix + ".mlp.fc2", 4 * c, c, tp);
    return TokenGridT<S>{g.h, g.w, add(z1, m)};
}

// ---------------------------------------------------------------------------
// Patch embedding, merging, padding.

// Smallest stage-1 token extent >= ceil(pixels/patch) that is divisible by 8
// (so every stage grid is even) and window-tileable at every stage.
inline long padded_tokens(long pixels, long patch, long win) {
    long p0 = (pixels + patch - 1) / patch;
    for (long p = p0;; ++p) {
        if (p % 8 != 0) continue;
        bool ok = true;
        for (int s = 0; s < 4 && ok; ++s) {
            const long g = p >> s;
            if (g >= win && g % win != 0) ok = false;
        }
        if (ok) return p;
    }
}

// Reflect-pad bottom/right so post-patch grids satisfy every partition
// precondition; predictions are cropped back by the callers.
template <class S>
TensorT<S> reflect_pad_image(const TensorT<S>& img, long hp, long wp) {
    const long h = img.shape[0], w = img.shape[1], c = img.shape[2];
    if (hp == h && wp == w) return img;
    if (hp - h > h - 1 || wp - w > w - 1)
        throw config_error("image " + std::to_string(h) + "x" + std::to_string(w) +
                           " too small to pad to " + std::to_string(hp) + "x" + std::to_string(wp) +
                           " (smaller than one stage-4 window)");
    TensorT<S> out = TensorT<S>::zeros({hp, wp, c});
    auto src = [&](long x, long extent) { return x < extent ? x : 2 * extent - 2 - x; };
    for (long r = 0; r < hp; ++r)
        for (long q = 0; q < wp; ++q) {
            const S* ip = img.data() + (src(r, h) * w + src(q, w)) * c;
            S* op = out.data() + (r * wp + q) * c;
            std::copy(ip, ip + c, op);
        }
    return out;
}

// Learned linear map over flattened patches followed by LayerNorm.
template <class S>
TokenGridT<S> patch_embed(const TensorT<S>& image, const ModelConfig& cfg, ParamStore<S>& P, std::type_identity_t<TapeT<S>*> tp) {
    if (image.rank() != 3 || image.shape[2] != 3)
        throw shape_error("patch_embed: [H,W,3] image expected, got " + shape_str(image.shape));
    const long h = image.shape[0], w = image.shape[1], p = cfg.patch_size;
    if (h % p != 0 || w % p != 0)
        throw std::logic_error("patch_embed: image extents must be patch-aligned after padding");
    const long gh = h / p, gw = w / p;
    const long pc = p * p * 3;
    TensorT<S> patches = TensorT<S>::zeros({gh * gw, pc});
    const S* ip = image.data();
    for (long r = 0; r < gh; ++r)
        for (long q = 0; q < gw; ++q) {
            S* op = patches.data() + (r * gw + q) * pc;
            for (long pr = 0; pr < p; ++pr)
                for (long pq = 0; pq < p; ++pq) {
                    const S* px = ip + ((r * p + pr) * w + (q * p + pq)) * 3;
                    std::copy(px, px + 3, op + (pr * p + pq) * 3);
                }
        }
    TensorT<S> tok = linear(patches, P, "embed.proj", pc, cfg.embed_dim, tp);
    tok = layer_norm_p(tok, P, "embed.ln", cfg.embed_dim, tp);
    return TokenGridT<S>{gh, gw, tok};
}

// 2x2 neighbor concatenation -> LayerNorm -> linear halving: halves the grid,
// doubles the channels.
template <class S>
TokenGridT<S> patch_merging(const TokenGridT<S>& g, ParamStore<S>& P, const std::string& prefix,
                            std::type_identity_t<TapeT<S>*> tp) {
    if (g.h % 2 != 0 || g.w % 2 != 0)
        throw std::logic_error("patch_merging: grid extents must be even (padding invariant violated)");
    const long c = g.channels(), oh = g.h / 2, ow = g.w / 2;
    std::vector<long> order;
    order.reserve(static_cast<std::size_t>(g.tokens()));
    for (long i = 0; i < oh; ++i)
        for (long j = 0; j < ow; ++j) {
            order.push_back((2 * i) * g.w + 2 * j);
            order.push_back((2 * i) * g.w + 2 * j + 1);
            order.push_back((2 * i + 1) * g.w + 2 * j);
            order.push_back((2 * i + 1) * g.w + 2 * j + 1);
        }
    TensorT<S> x = permute_rows(g.t, std::move(order));
    x = reshape(x, {oh * ow, 4 * c});
    x = layer_norm_p(x, P, prefix + ".ln", 4 * c, tp);
    x = linear(x, P, prefix + ".reduce", 4 * c, 2 * c, tp);
    return TokenGridT<S>{oh, ow, x};
}

// Four-stage encoder producing the feature pyramid. Stage outputs are
// captured after that stage's blocks; `ctx` (when given) is injected into
// every block of cfg.dta_stage; `capture_stage_input` receives the tokens
// entering that stage (used to build the context for the other stream).
template <class S>
PyramidT<S> encoder_forward(const TensorT<S>& image, const ModelConfig& cfg, ParamStore<S>& P,
                            std::type_identity_t<TapeT<S>*> tp, std::type_identity_t<const DtaCtxT<S>*> ctx = nullptr,
                            std::type_identity_t<TokenGridT<S>*> capture_stage_input = nullptr) {
    cfg.validate();
    PyramidT<S> pyr;
    TokenGridT<S> g = patch_embed(image, cfg, P, tp);
    for (int s = 1; s <= 4; ++s) {
        if (capture_stage_input && s == cfg.dta_stage) *capture_stage_input = g;
        const DtaCtxT<S>* block_ctx =
            (ctx != nullptr && cfg.dta_enabled && s == cfg.dta_stage) ? ctx : nullptr;
        for (long b = 0; b < cfg.stage_depths[static_cast<std::size_t>(s - 1)]; ++b) {
            const std::string prefix = "enc.s" + std::to_string(s) + ".b" + std::to_string(b);
            g = swin_block(g, b % 2 == 1, cfg.stage_heads[static_cast<std::size_t>(s - 1)], cfg, P, prefix,
                           tp, block_ctx);
        }
        pyr.level[static_cast<std::size_t>(s - 1)] = g;
        if (s < 4) g = patch_merging(g, P, "enc.merge" + std::to_string(s), tp);
    }
    return pyr;
}

}  // namespace panelkit
