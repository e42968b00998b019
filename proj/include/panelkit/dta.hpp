#pragma once

// Domain Transferable Attention: a token-level domain discriminator, a
// residual token generator, binary-entropy transferability scores, and
// attention that appends cross-domain keys/values whose softmax columns are
// Hadamard-weighted by those scores (own columns keep weight 1, no
// renormalization afterwards). With nothing injected every path reduces
// exactly to standard attention.

#include "panelkit/swin.hpp"

namespace panelkit {

enum class DomainTag { Comics, Real, FakeComics };

template <class S>
struct TokenBatchT {
    TensorT<S> tokens;  // [n, d]
    DomainTag tag = DomainTag::Real;

    long count() const { return tokens.shape.empty() ? 0 : tokens.shape[0]; }
    long width() const { return tokens.shape.empty() ? 0 : tokens.shape.back(); }
};

// Per-token domain logits: 2-layer MLP to a scalar.
template <class S>
TensorT<S> d_token_logits(const TensorT<S>& tokens, ParamStore<S>& P, std::type_identity_t<TapeT<S>*> tp) {
    const long d = tokens.shape.back();
    TensorT<S> h = relu(linear(tokens, P, "dta.disc.fc1", d, d, tp));
    return linear(h, P, "dta.disc.fc2", d, 1, tp);
}

// Probability of a token belonging to the comics domain, in (0,1).
template <class S>
TensorT<S> d_token(const TokenBatchT<S>& batch, ParamStore<S>& P, std::type_identity_t<TapeT<S>*> tp) {
    return reshape(sigmoid(d_token_logits(batch.tokens, P, tp)), {batch.count()});
}

// Residual generator: real tokens -> fake comics tokens of the same shape.
template <class S>
TokenBatchT<S> g_f(const TokenBatchT<S>& real, ParamStore<S>& P, std::type_identity_t<TapeT<S>*> tp) {
    if (real.tag != DomainTag::Real)
        throw std::invalid_argument("g_f: input batch must carry the real domain tag");
    const long d = real.width();
    TensorT<S> h = relu(linear(real.tokens, P, "dta.gen.fc1", d, d, tp));
    TensorT<S> delta = linear(h, P, "dta.gen.fc2", d, d, tp);
    return TokenBatchT<S>{add(real.tokens, delta), DomainTag::FakeComics};
}

// T(.) = H(D_token(.)) in bits: maximal (1) at probability 0.5, 0 at the
// confident extremes.
template <class S>
TensorT<S> transferability(const TensorT<S>& probs) {
    return entropy_bits(probs);
}

// Single-head transferability-weighted attention over pre-projected
// matrices. Own keys get weight 1; injected keys get their transferability.
template <class S>
TensorT<S> dta_attention(const TensorT<S>& q, const TensorT<S>& k_own, const TensorT<S>& v_own,
                         const TensorT<S>& k_inj, const TensorT<S>& v_inj, const TensorT<S>& t_inj) {
    const long d = q.shape.back();
    const bool has_inj = k_inj.store && k_inj.size() > 0;
    if (has_inj && t_inj.size() != k_inj.shape[0])
        throw shape_error("dta_attention: transferability length " + shape_str(t_inj.shape) +
                          " does not match injected keys " + shape_str(k_inj.shape));
    TensorT<S> keys = has_inj ? concat<S>({k_own, k_inj}, 0) : k_own;
    TensorT<S> values = has_inj ? concat<S>({v_own, v_inj}, 0) : v_own;
    TensorT<S> logits = scale(matmul(q, transpose2(keys)), static_cast<S>(1.0 / std::sqrt(static_cast<double>(d))));
    TensorT<S> p = softmax(logits, -1);
    if (has_inj) {
        TensorT<S> ones = TensorT<S>::full({k_own.shape[0]}, S(1));
        TensorT<S> row = concat<S>({ones, reshape(t_inj, {t_inj.size()})}, 0);
        p = mul(p, row);
    }
    return matmul(p, values);
}

// Eq.-4 style multi-head wrapper: per-head projections, weighted attention
// per head, concat, output projection.
template <class S>
TensorT<S> multi_head_dta(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v,
                          const TensorT<S>& k_inj, const TensorT<S>& v_inj, const TensorT<S>& t_inj,
                          long heads, ParamStore<S>& P, const std::string& prefix,
                          std::type_identity_t<TapeT<S>*> tp) {
    const long d = q.shape.back();
    if (d % heads != 0)
        throw config_error("multi_head_dta: heads " + std::to_string(heads) + " do not divide width " +
                           std::to_string(d));
    const long dh = d / heads;
    const bool has_inj = k_inj.store && k_inj.size() > 0;
    TensorT<S> qp = linear(q, P, prefix + ".wq", d, d, tp);
    TensorT<S> kp = linear(k, P, prefix + ".wk", d, d, tp);
    TensorT<S> vp = linear(v, P, prefix + ".wv", d, d, tp);
    TensorT<S> kip, vip;
    if (has_inj) {
        kip = linear(k_inj, P, prefix + ".wk", d, d, tp);
        vip = linear(v_inj, P, prefix + ".wv", d, d, tp);
    }
    std::vector<TensorT<S>> head_out;
    head_out.reserve(static_cast<std::size_t>(heads));
    for (long h = 0; h < heads; ++h) {
        TensorT<S> qh = slice_last(qp, h * dh, (h + 1) * dh);
        TensorT<S> kh = slice_last(kp, h * dh, (h + 1) * dh);
        TensorT<S> vh = slice_last(vp, h * dh, (h + 1) * dh);
        TensorT<S> kih, vih;
        if (has_inj) {
            kih = slice_last(kip, h * dh, (h + 1) * dh);
            vih = slice_last(vip, h * dh, (h + 1) * dh);
        }
        head_out.push_back(dta_attention(qh, kh, vh, kih, vih, t_inj));
    }
    TensorT<S> cat = heads == 1 ? head_out[0] : concat<S>(head_out, 1);
    return linear(cat, P, prefix + ".wo", d, d, tp);
}

// A block whose attention is DTA: identical to swin_block, which already
// degenerates to plain windowed self-attention when the context is empty.
template <class S>
TokenGridT<S> dta_block(const TokenGridT<S>& g, const DtaCtxT<S>& ctx, bool shifted, long heads,
                        const ModelConfig& cfg, ParamStore<S>& P, const std::string& prefix,
                        std::type_identity_t<TapeT<S>*> tp) {
    return swin_block(g, shifted, heads, cfg, P, prefix, tp, ctx.empty() ? nullptr : &ctx);
}

// Discriminator probabilities over a stage's real tokens turned into an
// injection context for the other stream.
template <class S>
DtaCtxT<S> make_dta_ctx(const TokenGridT<S>& real_stage, ParamStore<S>& P,
                        std::type_identity_t<TapeT<S>*> tp) {
    DtaCtxT<S> ctx;
    ctx.tokens = real_stage;
    TokenBatchT<S> batch{real_stage.t, DomainTag::Real};
    ctx.transferability = transferability(d_token(batch, P, tp));
    return ctx;
}

// Token adversarial losses (BCE in nats). loss_d: discriminator assigns 1 to
// comics tokens, 0 to real and generated fake-comics tokens, averaged over
// every token. loss_g: the generator output scored against label 1.
template <class S>
struct TokenAdvLossT {
    TensorT<S> loss_d;
    TensorT<S> loss_g;
};

template <class S>
TokenAdvLossT<S> token_adv_loss(const TokenBatchT<S>& comics, const TokenBatchT<S>& real,
                                ParamStore<S>& P, std::type_identity_t<TapeT<S>*> tp) {
    if (comics.count() < 1 || real.count() < 1)
        throw std::invalid_argument("token_adv_loss: both batches must be non-empty");
    if (comics.tag != DomainTag::Comics || real.tag != DomainTag::Real)
        throw std::invalid_argument("token_adv_loss: batches must carry comics/real tags");
    TokenBatchT<S> fake = g_f(real, P, tp);

    TensorT<S> lc = bce_logits(d_token_logits(comics.tokens, P, tp), 1.0);
    TensorT<S> lr = bce_logits(d_token_logits(real.tokens, P, tp), 0.0);
    TensorT<S> lf = bce_logits(d_token_logits(fake.tokens, P, tp), 0.0);
    const double nc = static_cast<double>(comics.count());
    const double nr = static_cast<double>(real.count());
    const double total = nc + 2.0 * nr;

    TokenAdvLossT<S> out;
    out.loss_d = add(add(scale(lc, static_cast<S>(nc / total)), scale(lr, static_cast<S>(nr / total))),
                     scale(lf, static_cast<S>(nr / total)));
    out.loss_g = bce_logits(d_token_logits(fake.tokens, P, tp), 1.0);
    return out;
}

}  // namespace panelkit
