#pragma once

// Mirrored hourglass decoders over the encoder pyramid, task heads, and the
// whole-model forward pass. The two task decoders share the architecture but
// never the parameters; only the encoder is shared.

#include "panelkit/swin.hpp"

namespace panelkit {

struct DecoderConfig {
    std::array<long, 4> stage_heads{};  // decoder stage order: deepest first
    long blocks_per_stage = 2;

    static DecoderConfig mirror(const ModelConfig& cfg) {
        DecoderConfig d;
        for (int i = 0; i < 4; ++i) d.stage_heads[static_cast<std::size_t>(i)] = cfg.stage_heads[static_cast<std::size_t>(3 - i)];
        return d;
    }
};

template <class S>
struct TaskPredictionT {
    long h = 0, w = 0, k = 0;
    TensorT<S> seg_probs;  // [h, w, k], sums to 1 over k per pixel
    TensorT<S> depth;      // [h, w, 1], strictly inside (0,1)
};

// Tracked artifacts of one forward pass at padded resolution; losses consume
// the logits, predictions are cropped views.
template <class S>
struct MtlForwardT {
    PyramidT<S> pyramid;
    TensorT<S> seg_logits;  // [hp*wp, K]
    TensorT<S> seg_probs;   // [hp*wp, K]
    TensorT<S> depth;       // [hp*wp, 1]
    long hp = 0, wp = 0;
    long h = 0, w = 0;
};

// Learned 2x upsampling: linear to 2C, then regroup each token into its 2x2
// pixel-shuffle neighborhood at half the channels.
template <class S>
TokenGridT<S> upsample_stage(const TokenGridT<S>& g, ParamStore<S>& P, const std::string& prefix,
                             std::type_identity_t<TapeT<S>*> tp) {
    const long c = g.channels();
    if (c % 2 != 0) throw config_error("upsample_stage: channel count must be even");
    TensorT<S> x = linear(g.t, P, prefix, c, 2 * c, tp);
    x = reshape(x, {g.tokens() * 4, c / 2});
    const long oh = g.h * 2, ow = g.w * 2;
    std::vector<long> order(static_cast<std::size_t>(oh * ow));
    for (long r = 0; r < oh; ++r)
        for (long q = 0; q < ow; ++q)
            order[static_cast<std::size_t>(r * ow + q)] =
                ((r / 2) * g.w + (q / 2)) * 4 + (r % 2) * 2 + (q % 2);
    return TokenGridT<S>{oh, ow, permute_rows(x, std::move(order))};
}

// Skip fusion: channel concat, learned linear back to the stage width, LayerNorm.
template <class S>
TokenGridT<S> fuse_skip(const TokenGridT<S>& decoded, const TokenGridT<S>& skip, ParamStore<S>& P,
                        const std::string& prefix, std::type_identity_t<TapeT<S>*> tp) {
    if (decoded.h != skip.h || decoded.w != skip.w || decoded.channels() != skip.channels())
        throw shape_error("fuse_skip: decoded " + std::to_string(decoded.h) + "x" + std::to_string(decoded.w) +
                          "x" + std::to_string(decoded.channels()) + " does not match skip " +
                          std::to_string(skip.h) + "x" + std::to_string(skip.w) + "x" +
                          std::to_string(skip.channels()));
    const long c = decoded.channels();
    TensorT<S> x = concat<S>({decoded.t, skip.t}, 1);
    x = linear(x, P, prefix + ".proj", 2 * c, c, tp);
    x = layer_norm_p(x, P, prefix + ".ln", c, tp);
    return TokenGridT<S>{decoded.h, decoded.w, x};
}

// One task decoder: starts at the 1/32 level, and per stage fuses the
// mirrored encoder skip, runs a regular+shifted block pair, then upsamples
// (except after the last stage). Ends at 1/4 resolution with C channels.
template <class S>
TokenGridT<S> decoder_forward(const PyramidT<S>& pyr, const ModelConfig& cfg, ParamStore<S>& P,
                              const std::string& task, std::type_identity_t<TapeT<S>*> tp) {
    const DecoderConfig dec = DecoderConfig::mirror(cfg);
    TokenGridT<S> g = pyr.level[3];
    for (int d = 1; d <= 4; ++d) {
        const std::string sp = "dec." + task + ".s" + std::to_string(d);
        g = fuse_skip(g, pyr.level[static_cast<std::size_t>(4 - d)], P, sp + ".fuse", tp);
        for (long b = 0; b < dec.blocks_per_stage; ++b)
            g = swin_block(g, b % 2 == 1, dec.stage_heads[static_cast<std::size_t>(d - 1)], cfg, P,
                           sp + ".b" + std::to_string(b), tp);
        if (d < 4) g = upsample_stage(g, P, sp + ".up", tp);
    }
    return g;
}

// K channels, bilinear upsample to pixel resolution, softmax over classes.
// Returns the pre-softmax logits as well (the loss wants them).
template <class S>
std::pair<TensorT<S>, TensorT<S>> seg_head(const TokenGridT<S>& g, const ModelConfig& cfg, ParamStore<S>& P,
                                           std::type_identity_t<TapeT<S>*> tp) {
    if (cfg.num_classes < 2) throw config_error("seg_head: at least two classes required");
    TensorT<S> logits = linear(g.t, P, "head.seg", g.channels(), cfg.num_classes, tp);
    logits = bilinear_upsample(logits, g.h, g.w, cfg.patch_size);
    return {logits, softmax(logits, -1)};
}

// Single channel, bilinear upsample, sigmoid.
template <class S>
TensorT<S> depth_head(const TokenGridT<S>& g, const ModelConfig& cfg, ParamStore<S>& P,
                      std::type_identity_t<TapeT<S>*> tp) {
    TensorT<S> x = linear(g.t, P, "head.depth", g.channels(), 1, tp);
    x = bilinear_upsample(x, g.h, g.w, cfg.patch_size);
    return sigmoid(x);
}

template <class S>
TensorT<S> pad_for_model(const TensorT<S>& image, const ModelConfig& cfg, long* hp_out = nullptr,
                         long* wp_out = nullptr) {
    const long h = image.shape[0], w = image.shape[1];
    const long hp = padded_tokens(h, cfg.patch_size, cfg.window) * cfg.patch_size;
    const long wp = padded_tokens(w, cfg.patch_size, cfg.window) * cfg.patch_size;
    if (hp_out) *hp_out = hp;
    if (wp_out) *wp_out = wp;
    return reflect_pad_image(image, hp, wp);
}

// Shared encoder, two task decoders with identical architecture and distinct
// parameters, task heads. `capture_stage_input` receives the tokens entering
// the configured injection stage (used by training to bridge the streams).
template <class S>
MtlForwardT<S> forward_mtl(const TensorT<S>& image, const ModelConfig& cfg, ParamStore<S>& P,
                           std::type_identity_t<TapeT<S>*> tp, std::type_identity_t<const DtaCtxT<S>*> ctx = nullptr,
                           std::type_identity_t<TokenGridT<S>*> capture_stage_input = nullptr) {
    MtlForwardT<S> out;
    out.h = image.shape[0];
    out.w = image.shape[1];
    TensorT<S> padded = pad_for_model(image, cfg, &out.hp, &out.wp);
    out.pyramid = encoder_forward(padded, cfg, P, tp, ctx, capture_stage_input);
    TokenGridT<S> gs = decoder_forward(out.pyramid, cfg, P, "seg", tp);
    TokenGridT<S> gd = decoder_forward(out.pyramid, cfg, P, "depth", tp);
    auto [logits, probs] = seg_head(gs, cfg, P, tp);
    out.seg_logits = logits;
    out.seg_probs = probs;
    out.depth = depth_head(gd, cfg, P, tp);
    return out;
}

// Crop a padded per-pixel plane back to the original extents.
template <class S>
TensorT<S> crop_pixels(const TensorT<S>& plane, long hp, long wp, long h, long w) {
    if (plane.shape[0] != hp * wp)
        throw shape_error("crop_pixels: plane rows " + shape_str(plane.shape) + " do not match padded extents");
    if (h == hp && w == wp) return plane;
    std::vector<long> idx(static_cast<std::size_t>(h * w));
    for (long r = 0; r < h; ++r)
        for (long q = 0; q < w; ++q) idx[static_cast<std::size_t>(r * w + q)] = r * wp + q;
    return permute_rows(plane, std::move(idx));
}

template <class S>
TaskPredictionT<S> to_prediction(const MtlForwardT<S>& f, const ModelConfig& cfg) {
    TaskPredictionT<S> p;
    p.h = f.h;
    p.w = f.w;
    p.k = cfg.num_classes;
    p.seg_probs = reshape(crop_pixels(f.seg_probs.detached(), f.hp, f.wp, f.h, f.w), {f.h, f.w, p.k});
    p.depth = reshape(crop_pixels(f.depth.detached(), f.hp, f.wp, f.h, f.w), {f.h, f.w, 1});
    return p;
}

}  // namespace panelkit
