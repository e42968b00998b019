#include <catch2/catch_amalgamated.hpp>

#include "panelkit/dta.hpp"
#include "support.hpp"

using namespace panelkit;
using pktest::DTape;
using pktest::DTensor;
using pktest::max_grad_err;
using pktest::random_tensor;

namespace {

void zero_params(ParamStore<double>& P, std::initializer_list<const char*> names) {
    for (const char* n : names) std::fill(P.at(n).store->begin(), P.at(n).store->end(), 0.0);
}

ModelConfig tiny_cfg() {
    ModelConfig cfg;
    cfg.patch_size = 2;
    cfg.embed_dim = 8;
    cfg.stage_depths = {1, 1, 1, 1};
    cfg.stage_heads = {1, 2, 4, 8};
    cfg.window = 4;
    cfg.num_classes = 2;
    return cfg;
}

}  // namespace

TEST_CASE("zero-weight discriminator answers 0.5 everywhere") {
    Rng rng(3);
    ParamStore<double> P(5);
    TokenBatchT<double> b{random_tensor({6, 4}, rng), DomainTag::Real};
    d_token(b, P, nullptr);  // materialize
    zero_params(P, {"dta.disc.fc1.w", "dta.disc.fc1.b", "dta.disc.fc2.w", "dta.disc.fc2.b"});
    DTensor p = d_token(b, P, nullptr);
    for (long i = 0; i < p.size(); ++i) REQUIRE(p.data()[i] == Catch::Approx(0.5));
}

TEST_CASE("discriminator output stays in the open unit interval") {
    for (int seed = 0; seed < 100; ++seed) {
        Rng rng(100 + seed);
        ParamStore<double> P(200 + seed);
        TokenBatchT<double> b{random_tensor({5, 8}, rng, -3.0, 3.0), DomainTag::Comics};
        DTensor p = d_token(b, P, nullptr);
        for (long i = 0; i < p.size(); ++i) {
            REQUIRE(p.data()[i] > 0.0);
            REQUIRE(p.data()[i] < 1.0);
        }
    }
}

TEST_CASE("discriminator learns linearly separable token clouds") {
    Rng rng(7);
    const long n = 64, d = 4;
    DTensor comics = random_tensor({n, d}, rng, -0.5, 0.5);
    DTensor real = random_tensor({n, d}, rng, -0.5, 0.5);
    for (long i = 0; i < n; ++i) {
        comics.data()[i * d] += 1.5;
        real.data()[i * d] -= 1.5;
    }
    ParamStore<double> P(9);
    // plain gradient steps on the discriminator
    for (int step = 0; step < 300; ++step) {
        TapeT<double> tape;
        DTensor lc = bce_logits(d_token_logits(tape.watch(comics), P, &tape), 1.0);
        DTensor lr = bce_logits(d_token_logits(tape.watch(real), P, &tape), 0.0);
        tape.backward(add(lc, lr));
        auto grads = tape.named_grads();
        for (auto& [name, g] : grads) {
            auto& v = P.at(name);
            for (long j = 0; j < v.size(); ++j) v.data()[j] -= 0.5 * g.data()[j];
        }
    }
    DTensor pc = d_token(TokenBatchT<double>{comics, DomainTag::Comics}, P, nullptr);
    DTensor pr = d_token(TokenBatchT<double>{real, DomainTag::Real}, P, nullptr);
    long correct = 0;
    for (long i = 0; i < n; ++i) {
        if (pc.data()[i] > 0.5) ++correct;
        if (pr.data()[i] < 0.5) ++correct;
    }
    REQUIRE(static_cast<double>(correct) / (2 * n) > 0.95);
}

TEST_CASE("generator: identity init, shape, tag contract, gradient") {
    Rng rng(11);
    ParamStore<double> P(13);
    TokenBatchT<double> real{random_tensor({7, 32}, rng), DomainTag::Real};
    g_f(real, P, nullptr);  // materialize
    zero_params(P, {"dta.gen.fc2.w", "dta.gen.fc2.b"});
    TokenBatchT<double> fake = g_f(real, P, nullptr);
    REQUIRE(fake.tag == DomainTag::FakeComics);
    REQUIRE(fake.tokens.shape == real.tokens.shape);
    for (long i = 0; i < fake.tokens.size(); ++i)
        REQUIRE(fake.tokens.data()[i] == Catch::Approx(real.tokens.data()[i]));

    TokenBatchT<double> tagged{real.tokens, DomainTag::Comics};
    REQUIRE_THROWS_AS(g_f(tagged, P, nullptr), std::invalid_argument);

    ParamStore<double> P2(17);
    TokenBatchT<double> small{random_tensor({3, 4}, rng), DomainTag::Real};
    g_f(small, P2, nullptr);
    double err = max_grad_err(
        [&](DTape& tape, std::vector<DTensor>& in) {
            TokenBatchT<double> bi{in[0], DomainTag::Real};
            TokenBatchT<double> f = g_f(bi, P2, &tape);
            return sum(mul(f.tokens, f.tokens));
        },
        {small.tokens});
    REQUIRE(err < 1e-3);
}

TEST_CASE("transferability values") {
    REQUIRE(transferability(DTensor::scalar(0.5)).item() == Catch::Approx(1.0));
    REQUIRE(transferability(DTensor::scalar(0.25)).item() == Catch::Approx(0.8112781).margin(1e-6));
    REQUIRE(transferability(DTensor::scalar(1e-9)).item() == Catch::Approx(0.0).margin(1e-5));
    REQUIRE(transferability(DTensor::scalar(1.0 - 1e-9)).item() == Catch::Approx(0.0).margin(1e-5));
    // bounded and maximal exactly at 0.5
    Rng rng(19);
    for (int i = 0; i < 200; ++i) {
        const double p = rng.uniform();
        const double t = transferability(DTensor::scalar(p)).item();
        REQUIRE(t >= 0.0);
        REQUIRE(t <= 1.0);
        if (std::abs(p - 0.5) > 1e-3) REQUIRE(t < 1.0);
    }
}

TEST_CASE("dta_attention with no injection is plain attention") {
    Rng rng(23);
    DTensor q = random_tensor({3, 4}, rng);
    DTensor k = random_tensor({5, 4}, rng);
    DTensor v = random_tensor({5, 4}, rng);
    DTensor a = dta_attention(q, k, v, DTensor{}, DTensor{}, DTensor{});
    DTensor p = softmax(scale(matmul(q, transpose2(k)), 0.5), -1);
    DTensor b = matmul(p, v);
    for (long i = 0; i < a.size(); ++i) REQUIRE(std::abs(a.data()[i] - b.data()[i]) < 1e-9);
}

TEST_CASE("dta_attention with unit transferability equals concatenated attention") {
    Rng rng(29);
    DTensor q = random_tensor({3, 4}, rng);
    DTensor k = random_tensor({4, 4}, rng);
    DTensor v = random_tensor({4, 4}, rng);
    DTensor ki = random_tensor({2, 4}, rng);
    DTensor vi = random_tensor({2, 4}, rng);
    DTensor ones = DTensor::full({2}, 1.0);
    DTensor a = dta_attention(q, k, v, ki, vi, ones);
    DTensor b = dta_attention(q, concat<double>({k, ki}, 0), concat<double>({v, vi}, 0), DTensor{},
                              DTensor{}, DTensor{});
    for (long i = 0; i < a.size(); ++i) REQUIRE(std::abs(a.data()[i] - b.data()[i]) < 1e-9);
}

TEST_CASE("two-key case: zero transferability nulls the injected token") {
    DTensor q = DTensor::from({1, 2}, {0.8, -0.4});
    DTensor k = DTensor::from({1, 2}, {0.3, 0.9});
    DTensor v = DTensor::from({1, 2}, {1.0, 2.0});
    DTensor ki = DTensor::from({1, 2}, {-0.7, 0.2});
    DTensor vi = DTensor::from({1, 2}, {5.0, -3.0});
    DTensor t0 = DTensor::from({1}, {0.0});
    DTensor out = dta_attention(q, k, v, ki, vi, t0);

    const double s = 1.0 / std::sqrt(2.0);
    const double l0 = s * (0.8 * 0.3 + -0.4 * 0.9);
    const double l1 = s * (0.8 * -0.7 + -0.4 * 0.2);
    const double p0 = std::exp(l0) / (std::exp(l0) + std::exp(l1));
    REQUIRE(out.data()[0] == Catch::Approx(p0 * 1.0));
    REQUIRE(out.data()[1] == Catch::Approx(p0 * 2.0));
}

TEST_CASE("row-mass law: weighted rows sum to at most one") {
    Rng rng(31);
    DTensor q = random_tensor({4, 4}, rng);
    DTensor k = random_tensor({4, 4}, rng);
    DTensor ki = random_tensor({3, 4}, rng);
    // ones as values expose the row masses
    DTensor v1 = DTensor::full({4, 1}, 1.0);
    DTensor vi1 = DTensor::full({3, 1}, 1.0);

    DTensor t = random_tensor({3}, rng, 0.05, 0.8);
    DTensor mass = dta_attention(q, k, v1, ki, vi1, t);
    for (long i = 0; i < 4; ++i) {
        REQUIRE(mass.data()[i] > 0.0);
        REQUIRE(mass.data()[i] < 1.0);  // some injected weight < 1
    }
    DTensor ones = DTensor::full({3}, 1.0);
    DTensor full_mass = dta_attention(q, k, v1, ki, vi1, ones);
    for (long i = 0; i < 4; ++i) REQUIRE(full_mass.data()[i] == Catch::Approx(1.0));
    DTensor no_inj = dta_attention(q, k, v1, DTensor{}, DTensor{}, DTensor{});
    for (long i = 0; i < 4; ++i) REQUIRE(no_inj.data()[i] == Catch::Approx(1.0));
}

TEST_CASE("monotone trust: contribution grows with transferability") {
    Rng rng(37);
    DTensor q = random_tensor({2, 4}, rng);
    DTensor k = random_tensor({3, 4}, rng);
    DTensor v = random_tensor({3, 4}, rng);
    DTensor ki = random_tensor({1, 4}, rng);
    DTensor vi = random_tensor({1, 4}, rng);
    DTensor base = dta_attention(q, k, v, ki, vi, DTensor::from({1}, {0.0}));
    double prev = -1.0;
    for (double t : {0.1, 0.3, 0.5, 0.7, 0.9}) {
        DTensor out = dta_attention(q, k, v, ki, vi, DTensor::from({1}, {t}));
        double contrib = 0.0;
        for (long i = 0; i < out.size(); ++i) {
            const double c = out.data()[i] - base.data()[i];
            contrib += c * c;
        }
        contrib = std::sqrt(contrib);
        REQUIRE(contrib > prev);
        prev = contrib;
    }
}

TEST_CASE("dta_attention gradient, including the transferability input") {
    Rng rng(41);
    DTensor q = random_tensor({3, 4}, rng);
    DTensor k = random_tensor({3, 4}, rng);
    DTensor v = random_tensor({3, 4}, rng);
    DTensor ki = random_tensor({2, 4}, rng);
    DTensor vi = random_tensor({2, 4}, rng);
    DTensor t = random_tensor({2}, rng, 0.2, 0.8);
    double err = max_grad_err(
        [](DTape&, std::vector<DTensor>& in) {
            DTensor o = dta_attention(in[0], in[1], in[2], in[3], in[4], in[5]);
            return sum(mul(o, o));
        },
        {q, k, v, ki, vi, t});
    REQUIRE(err < 1e-3);
}

TEST_CASE("multi_head_dta: single head reduces to projected dta_attention") {
    Rng rng(43);
    ParamStore<double> P(47);
    DTensor q = random_tensor({3, 6}, rng);
    DTensor k = random_tensor({4, 6}, rng);
    DTensor v = random_tensor({4, 6}, rng);
    DTensor ki = random_tensor({2, 6}, rng);
    DTensor vi = random_tensor({2, 6}, rng);
    DTensor t = random_tensor({2}, rng, 0.1, 0.9);
    DTensor a = multi_head_dta(q, k, v, ki, vi, t, 1, P, "mh", nullptr);
    REQUIRE(a.shape == Shape{3, 6});

    auto lin = [&](const DTensor& x, const std::string& p) {
        return add(matmul(x, P.at(p + ".w").detached()), P.at(p + ".b").detached());
    };
    DTensor core = dta_attention(lin(q, "mh.wq"), lin(k, "mh.wk"), lin(v, "mh.wv"), lin(ki, "mh.wk"),
                                 lin(vi, "mh.wv"), t);
    DTensor b = lin(core, "mh.wo");
    for (long i = 0; i < a.size(); ++i) REQUIRE(a.data()[i] == Catch::Approx(b.data()[i]).margin(1e-12));

    REQUIRE_THROWS_AS(multi_head_dta(q, k, v, ki, vi, t, 4, P, "mh", nullptr), config_error);
}

TEST_CASE("multi_head_dta is invariant to head permutation") {
    Rng rng(53);
    ParamStore<double> P(59);
    const long d = 6, heads = 2, dh = d / heads;
    DTensor q = random_tensor({3, d}, rng);
    DTensor k = random_tensor({4, d}, rng);
    DTensor v = random_tensor({4, d}, rng);
    DTensor base = multi_head_dta(q, k, v, DTensor{}, DTensor{}, DTensor{}, heads, P, "hp", nullptr);

    // swap the two head column blocks of every projection and the matching
    // row blocks of the output projection
    for (const char* n : {"hp.wq", "hp.wk", "hp.wv"}) {
        auto& w = P.at(std::string(n) + ".w");
        for (long r = 0; r < d; ++r)
            for (long c = 0; c < dh; ++c) std::swap(w.data()[r * d + c], w.data()[r * d + dh + c]);
        auto& b = P.at(std::string(n) + ".b");
        for (long c = 0; c < dh; ++c) std::swap(b.data()[c], b.data()[dh + c]);
    }
    auto& wo = P.at("hp.wo.w");
    for (long r = 0; r < dh; ++r)
        for (long c = 0; c < d; ++c) std::swap(wo.data()[r * d + c], wo.data()[(dh + r) * d + c]);

    DTensor swapped = multi_head_dta(q, k, v, DTensor{}, DTensor{}, DTensor{}, heads, P, "hp", nullptr);
    for (long i = 0; i < base.size(); ++i)
        REQUIRE(swapped.data()[i] == Catch::Approx(base.data()[i]).margin(1e-12));
}

TEST_CASE("fused window attention agrees with the composed route") {
    Rng rng(61);
    const long t = 4, c = 6, ti = 2;
    DTensor q = random_tensor({t, c}, rng);
    DTensor k = random_tensor({t, c}, rng);
    DTensor v = random_tensor({t, c}, rng);
    DTensor ki = random_tensor({ti, c}, rng);
    DTensor vi = random_tensor({ti, c}, rng);
    DTensor tw = random_tensor({ti}, rng, 0.1, 0.9);

    DTensor fused = window_attention_core(q, k, v, 1, t, 1, DTensor{}, ki, vi, tw, DTensor{}, nullptr);
    DTensor composed = dta_attention(q, k, v, ki, vi, tw);
    for (long i = 0; i < fused.size(); ++i)
        REQUIRE(fused.data()[i] == Catch::Approx(composed.data()[i]).margin(1e-12));
}

TEST_CASE("dta block: empty context reduces to the standard block") {
    Rng rng(67);
    ModelConfig cfg = tiny_cfg();
    ParamStore<double> P(71);
    TokenGridT<double> g{8, 8, random_tensor({64, 8}, rng)};
    TokenGridT<double> plain = swin_block(g, true, 2, cfg, P, "db", nullptr);
    DtaCtxT<double> empty;
    TokenGridT<double> viactx = dta_block(g, empty, true, 2, cfg, P, "db", nullptr);
    REQUIRE(*plain.t.store == *viactx.t.store);

    // injected tokens with full transferability change the output
    DtaCtxT<double> ctx;
    ctx.tokens = TokenGridT<double>{8, 8, random_tensor({64, 8}, rng)};
    ctx.transferability = DTensor::full({64}, 1.0);
    TokenGridT<double> inj = dta_block(g, ctx, true, 2, cfg, P, "db", nullptr);
    REQUIRE(inj.t.shape == plain.t.shape);
    double diff = 0.0;
    for (long i = 0; i < inj.t.size(); ++i) diff += std::abs(inj.t.data()[i] - plain.t.data()[i]);
    REQUIRE(diff > 0.0);

    TokenGridT<double> bad{4, 4, random_tensor({16, 8}, rng)};
    DtaCtxT<double> badctx{bad, DTensor::full({16}, 1.0)};
    REQUIRE_THROWS_AS(dta_block(g, badctx, true, 2, cfg, P, "db", nullptr), shape_error);
}

TEST_CASE("network-level reduction: encoder with empty context matches plain encoder") {
    Rng rng(73);
    ModelConfig cfg = tiny_cfg();
    cfg.dta_enabled = true;
    ParamStore<float> P(79);
    TensorT<float> img = TensorT<float>::zeros({16, 16, 3});
    fill_uniform(img, rng, 0.0, 1.0);
    PyramidT<float> a = encoder_forward(img, cfg, P, nullptr);
    DtaCtxT<float> empty;
    PyramidT<float> b = encoder_forward(img, cfg, P, nullptr, &empty);
    for (int s = 0; s < 4; ++s)
        for (long i = 0; i < a.level[s].t.size(); ++i)
            REQUIRE(std::abs(a.level[s].t.data()[i] - b.level[s].t.data()[i]) < 1e-9f);
}

TEST_CASE("token adversarial loss limits") {
    Rng rng(83);
    const long n = 8, d = 4;
    // comics tokens have a large positive first coordinate, real a negative one
    DTensor ct = random_tensor({n, d}, rng, -0.2, 0.2);
    DTensor rt = random_tensor({n, d}, rng, -0.2, 0.2);
    for (long i = 0; i < n; ++i) {
        ct.data()[i * d] = 4.0;
        rt.data()[i * d] = -4.0;
    }
    TokenBatchT<double> comics{ct, DomainTag::Comics};
    TokenBatchT<double> real{rt, DomainTag::Real};

    // hand-built near-perfect discriminator: picks out the first coordinate
    ParamStore<double> P(89);
    token_adv_loss(comics, real, P, nullptr);  // materialize
    zero_params(P, {"dta.disc.fc1.w", "dta.disc.fc1.b", "dta.disc.fc2.w", "dta.disc.fc2.b",
                    "dta.gen.fc2.w", "dta.gen.fc2.b"});
    P.at("dta.disc.fc1.w").data()[0] = 1.0;           // h0 = relu(x0)
    P.at("dta.disc.fc1.w").data()[1 * d + 1] = -1.0;  // h1 = relu(-x1)... unused
    P.at("dta.disc.fc1.b").data()[1] = 0.0;
    P.at("dta.disc.fc2.w").data()[0] = 8.0;  // logit = 8 * relu(x0)
    P.at("dta.disc.fc2.b").data()[0] = -16.0;
    // comics: logit = 8*4 - 16 = +16 -> p ~ 1; real/fake: relu(-4)=0 -> logit -16 -> p ~ 0
    TokenAdvLossT<double> l = token_adv_loss(comics, real, P, nullptr);
    REQUIRE(l.loss_d.item() < 1e-3);
    REQUIRE(l.loss_g.item() > 5.0);

    // an indifferent discriminator scores ln 2 per term
    zero_params(P, {"dta.disc.fc1.w", "dta.disc.fc1.b", "dta.disc.fc2.w", "dta.disc.fc2.b"});
    TokenAdvLossT<double> mid = token_adv_loss(comics, real, P, nullptr);
    REQUIRE(mid.loss_d.item() == Catch::Approx(std::log(2.0)));
    REQUIRE(mid.loss_g.item() == Catch::Approx(std::log(2.0)));

    REQUIRE_THROWS_AS(token_adv_loss(real, real, P, nullptr), std::invalid_argument);
}

TEST_CASE("one alternating round strictly decreases the discriminator loss") {
    Rng rng(97);
    const long n = 32, d = 4;
    DTensor ct = random_tensor({n, d}, rng, -0.5, 0.5);
    DTensor rt = random_tensor({n, d}, rng, -0.5, 0.5);
    for (long i = 0; i < n; ++i) {
        ct.data()[i * d] += 1.0;
        rt.data()[i * d] -= 1.0;
    }
    TokenBatchT<double> comics{ct, DomainTag::Comics};
    TokenBatchT<double> real{rt, DomainTag::Real};
    ParamStore<double> P(101);
    const double before = token_adv_loss(comics, real, P, nullptr).loss_d.item();

    // one discriminator round: plain gradient steps on the D parameters only
    for (int it = 0; it < 20; ++it) {
        TapeT<double> tape;
        TokenBatchT<double> cbt{tape.watch(comics.tokens), DomainTag::Comics};
        TokenBatchT<double> rbt{tape.watch(real.tokens), DomainTag::Real};
        TokenAdvLossT<double> l = token_adv_loss(cbt, rbt, P, &tape);
        tape.backward(l.loss_d);
        for (auto& [name, g] : tape.named_grads()) {
            if (name.rfind("dta.disc.", 0) != 0) continue;
            auto& v = P.at(name);
            for (long j = 0; j < v.size(); ++j) v.data()[j] -= 0.2 * g.data()[j];
        }
    }
    const double after = token_adv_loss(comics, real, P, nullptr).loss_d.item();
    REQUIRE(after < before);
}
