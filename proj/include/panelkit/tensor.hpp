#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation on an
// explicit tape. The whole library is templated on the scalar type: float is
// the training precision, double exists for finite-difference gradient checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace panelkit {

struct shape_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct config_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct data_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<long>;

inline long shape_numel(const Shape& s) {
    long n = 1;
    for (long e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

template <class S>
class TapeT;

template <class S>
struct TensorT {
    Shape shape{};
    std::shared_ptr<std::vector<S>> store{};
    TapeT<S>* tape = nullptr;
    int node = -1;

    TensorT() = default;

    static TensorT zeros(Shape s) {
        TensorT t;
        long n = shape_numel(s);
        t.shape = std::move(s);
        t.store = std::make_shared<std::vector<S>>(static_cast<std::size_t>(n), S(0));
        return t;
    }
    static TensorT full(Shape s, S v) {
        TensorT t = zeros(std::move(s));
        std::fill(t.store->begin(), t.store->end(), v);
        return t;
    }
    static TensorT from(Shape s, std::vector<S> v) {
        if (shape_numel(s) != static_cast<long>(v.size()))
            throw shape_error("tensor data length " + std::to_string(v.size()) +
                              " does not match shape " + shape_str(s));
        TensorT t;
        t.shape = std::move(s);
        t.store = std::make_shared<std::vector<S>>(std::move(v));
        return t;
    }
    static TensorT scalar(S v) { return from({1}, {v}); }

    long size() const { return shape_numel(shape); }
    long rank() const { return static_cast<long>(shape.size()); }
    S* data() { return store->data(); }
    const S* data() const { return store->data(); }
    bool tracked() const { return tape != nullptr && node >= 0; }

    S item() const {
        if (size() != 1) throw shape_error("item() requires a one-element tensor, got " + shape_str(shape));
        return (*store)[0];
    }
    // Same values, no tape participation.
    TensorT detached() const {
        TensorT t;
        t.shape = shape;
        t.store = store;
        return t;
    }
};

template <class S>
bool all_finite(const TensorT<S>& t) {
    for (S v : *t.store)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Tape: nodes are appended in evaluation order, so creation order is a
// topological order. backward() sweeps once in reverse, accumulating into
// per-node gradient buffers. A tape may be swept several times (each sweep
// starts from fresh gradients); reset() discards everything. One tape per
// training step, single-owner.

template <class S>
class TapeT {
public:
    TapeT() : serial_(next_serial()) {}
    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;

    // Register a value as a tracked leaf. Named leaves show up in named_grads().
    TensorT<S> watch(const TensorT<S>& t, std::string name = {}) {
        TensorT<S> out = t;
        out.tape = this;
        out.node = add_node(t.shape);
        if (!name.empty()) named_.emplace_back(std::move(name), out.node);
        return out;
    }

    int add_node(Shape shape) {
        nodes_.push_back(Node{nullptr, std::move(shape)});
        grads_.emplace_back();
        return static_cast<int>(nodes_.size()) - 1;
    }
    void set_backward(int id, std::function<void(TapeT&)> fn) { nodes_[static_cast<std::size_t>(id)].back = std::move(fn); }

    // Gradient buffer of a node, or null if no gradient has reached it.
    const std::vector<S>* grad_raw(int id) const {
        const auto& g = grads_[static_cast<std::size_t>(id)];
        return g.empty() ? nullptr : &g;
    }
    // Gradient buffer, materialized as zeros on first touch.
    std::vector<S>& grad_acc(int id) {
        auto& g = grads_[static_cast<std::size_t>(id)];
        if (g.empty()) g.assign(static_cast<std::size_t>(shape_numel(nodes_[static_cast<std::size_t>(id)].shape)), S(0));
        return g;
    }

    void backward(const TensorT<S>& loss) {
        if (!loss.tracked() || loss.tape != this)
            throw std::invalid_argument("backward: loss is not tracked on this tape");
        if (loss.size() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape));
        for (auto& g : grads_) g.clear();
        grad_acc(loss.node)[0] = S(1);
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            auto& n = nodes_[static_cast<std::size_t>(i)];
            if (n.back && grad_raw(i)) n.back(*this);
        }
    }

    // Gradient of a tracked tensor after backward(); zeros if unreachable.
    TensorT<S> grad(const TensorT<S>& t) const {
        if (!t.tracked() || t.tape != this)
            throw std::invalid_argument("grad: tensor is not tracked on this tape");
        const auto* g = grad_raw(t.node);
        if (!g) return TensorT<S>::zeros(t.shape);
        return TensorT<S>::from(t.shape, *g);
    }

    std::map<std::string, TensorT<S>> named_grads() const {
        std::map<std::string, TensorT<S>> out;
        for (const auto& [name, id] : named_) {
            const auto* g = grad_raw(id);
            const Shape& shp = nodes_[static_cast<std::size_t>(id)].shape;
            out.emplace(name, g ? TensorT<S>::from(shp, *g) : TensorT<S>::zeros(shp));
        }
        return out;
    }

    void reset() {
        nodes_.clear();
        grads_.clear();
        named_.clear();
        serial_ = next_serial();
    }

    std::uint64_t serial() const { return serial_; }
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        std::function<void(TapeT&)> back;
        Shape shape;
    };
    static std::uint64_t next_serial() {
        static std::uint64_t counter = 0;
        return ++counter;
    }
    std::vector<Node> nodes_;
    std::vector<std::vector<S>> grads_;
    std::vector<std::pair<std::string, int>> named_;
    std::uint64_t serial_;
};

template <class S>
TapeT<S>* joint_tape(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.tracked() && b.tracked() && a.tape != b.tape)
        throw std::invalid_argument("operands tracked on different tapes");
    return a.tracked() ? a.tape : (b.tracked() ? b.tape : nullptr);
}

// ---------------------------------------------------------------------------
// Deterministic RNG. Box-Muller instead of std::normal_distribution so the
// stream does not depend on the standard library implementation.

class Rng {
public:
    explicit Rng(std::uint64_t seed) : g_(seed) {}

    double uniform() { return static_cast<double>(g_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    long uniform_int(long lo, long hi) {  // inclusive bounds
        return lo + static_cast<long>(uniform() * static_cast<double>(hi - lo + 1));
    }
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 1e-300) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }
    // Resampled normal, |x| <= clip * stddev.
    double trunc_normal(double stddev, double clip = 2.0) {
        double x = normal();
        while (std::abs(x) > clip) x = normal();
        return x * stddev;
    }
    std::uint64_t raw() { return g_(); }

private:
    std::mt19937_64 g_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

template <class S>
void fill_trunc_normal(TensorT<S>& t, Rng& rng, double stddev) {
    for (S& v : *t.store) v = static_cast<S>(rng.trunc_normal(stddev));
}
template <class S>
void fill_uniform(TensorT<S>& t, Rng& rng, double lo, double hi) {
    for (S& v : *t.store) v = static_cast<S>(rng.uniform(lo, hi));
}

// ---------------------------------------------------------------------------
// gemm kernel: row-major C (+)= op(A) * op(B). Rows of C are independent, so
// the OpenMP split is bit-deterministic regardless of thread count.

template <class S>
void gemm(bool ta, bool tb, long m, long n, long k,
          const S* a, long lda, const S* b, long ldb, S* c, long ldc, bool accumulate) {
    const bool par = m * n * k > 16384;
#pragma omp parallel for schedule(static) if (par)
    for (long i = 0; i < m; ++i) {
        S* crow = c + i * ldc;
        if (!accumulate) std::fill(crow, crow + n, S(0));
        if (!ta && !tb) {
            const S* arow = a + i * lda;
            for (long l = 0; l < k; ++l) {
                const S av = arow[l];
                if (av == S(0)) continue;
                const S* brow = b + l * ldb;
                for (long j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        } else if (!ta && tb) {
            const S* arow = a + i * lda;
            for (long j = 0; j < n; ++j) {
                const S* brow = b + j * ldb;
                S acc = S(0);
                for (long l = 0; l < k; ++l) acc += arow[l] * brow[l];
                crow[j] += acc;
            }
        } else if (ta && !tb) {
            for (long l = 0; l < k; ++l) {
                const S av = a[l * lda + i];
                if (av == S(0)) continue;
                const S* brow = b + l * ldb;
                for (long j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        } else {
            for (long j = 0; j < n; ++j) {
                S acc = S(0);
                for (long l = 0; l < k; ++l) acc += a[l * lda + i] * b[j * ldb + l];
                crow[j] += acc;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Ops. Each op computes its value eagerly and, when any input is tracked,
// appends one node whose closure scatters the output gradient to the inputs.

namespace detail {

template <class S>
TensorT<S> make_output(Shape shape, std::vector<S> vals, TapeT<S>* tp) {
    TensorT<S> y = TensorT<S>::from(std::move(shape), std::move(vals));
    if (tp) {
        y.tape = tp;
        y.node = tp->add_node(y.shape);
    }
    return y;
}

// Split a matmul operand into (batch count, rows, cols) under the
// leading-batch-broadcast rule.
inline void matmul_dims(const Shape& s, long& rows, long& cols, long& batch) {
    rows = s[s.size() - 2];
    cols = s[s.size() - 1];
    batch = 1;
    for (std::size_t i = 0; i + 2 < s.size(); ++i) batch *= s[i];
}

}  // namespace detail

// Batched matrix product a[...,m,k] * b[...,k,n]. Batch extents must match
// exactly or be absent on one side (that side is broadcast).
template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw shape_error("matmul: operands must have rank >= 2, got " + shape_str(a.shape) + " and " + shape_str(b.shape));
    long m, ka, ba, kb, n, bb;
    detail::matmul_dims(a.shape, m, ka, ba);
    detail::matmul_dims(b.shape, kb, n, bb);
    if (ka != kb)
        throw shape_error("matmul: inner extents differ: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Shape batch_shape;
    if (a.rank() > 2 && b.rank() > 2) {
        if (ba != bb || !std::equal(a.shape.begin(), a.shape.end() - 2, b.shape.begin()))
            throw shape_error("matmul: batch extents differ: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
        batch_shape.assign(a.shape.begin(), a.shape.end() - 2);
    } else if (a.rank() > 2) {
        batch_shape.assign(a.shape.begin(), a.shape.end() - 2);
    } else if (b.rank() > 2) {
        batch_shape.assign(b.shape.begin(), b.shape.end() - 2);
    }
    const long nb = shape_numel(batch_shape);
    const long k = ka;

    std::vector<S> out(static_cast<std::size_t>(nb * m * n));
    for (long t = 0; t < nb; ++t) {
        const S* ap = a.data() + (a.rank() > 2 ? t * m * k : 0);
        const S* bp = b.data() + (b.rank() > 2 ? t * k * n : 0);
        gemm<S>(false, false, m, n, k, ap, k, bp, n, out.data() + t * m * n, n, false);
    }
    Shape oshape = batch_shape;
    oshape.push_back(m);
    oshape.push_back(n);

    TapeT<S>* tp = joint_tape(a, b);
    TensorT<S> y = detail::make_output(std::move(oshape), std::move(out), tp);
    if (tp) {
        const int yid = y.node, an = a.node, bn = b.node;
        const auto as = a.store, bs = b.store;
        const bool abatch = a.rank() > 2, bbatch = b.rank() > 2;
        const Shape ashape = a.shape, bshape = b.shape;
        tp->set_backward(yid, [=](TapeT<S>& t2) {
            const auto* gy = t2.grad_raw(yid);
            if (an >= 0) {
                auto& ga = t2.grad_acc(an);
                for (long t = 0; t < nb; ++t) {
                    const S* gyp = gy->data() + t * m * n;
                    const S* bp = bs->data() + (bbatch ? t * k * n : 0);
                    S* gap = ga.data() + (abatch ? t * m * k : 0);
                    gemm<S>(false, true, m, k, n, gyp, n, bp, n, gap, k, true);
                }
            }
            if (bn >= 0) {
                auto& gb = t2.grad_acc(bn);
                for (long t = 0; t < nb; ++t) {
                    const S* gyp = gy->data() + t * m * n;
                    const S* ap = as->data() + (abatch ? t * m * k : 0);
                    S* gbp = gb.data() + (bbatch ? t * k * n : 0);
                    gemm<S>(true, false, k, n, m, ap, k, gyp, n, gbp, n, true);
                }
            }
            (void)ashape;
            (void)bshape;
        });
    }
    return y;
}

// Numerically stabilized softmax along `axis` (negative axes count from the end).
template <class S>
TensorT<S> softmax(const TensorT<S>& x, long axis = -1) {
    if (axis < 0) axis += x.rank();
    if (axis < 0 || axis >= x.rank())
        throw shape_error("softmax: axis out of range for shape " + shape_str(x.shape));
    long outer = 1, inner = 1;
    for (long i = 0; i < axis; ++i) outer *= x.shape[static_cast<std::size_t>(i)];
    const long d = x.shape[static_cast<std::size_t>(axis)];
    for (long i = axis + 1; i < x.rank(); ++i) inner *= x.shape[static_cast<std::size_t>(i)];

    std::vector<S> out(static_cast<std::size_t>(x.size()));
    const S* xp = x.data();
    for (long o = 0; o < outer; ++o)
        for (long in = 0; in < inner; ++in) {
            const long base = o * d * inner + in;
            S mx = xp[base];
            for (long j = 1; j < d; ++j) mx = std::max(mx, xp[base + j * inner]);
            double denom = 0.0;
            for (long j = 0; j < d; ++j) {
                const S e = std::exp(xp[base + j * inner] - mx);
                out[static_cast<std::size_t>(base + j * inner)] = e;
                denom += static_cast<double>(e);
            }
            const S inv = static_cast<S>(1.0 / denom);
            for (long j = 0; j < d; ++j) out[static_cast<std::size_t>(base + j * inner)] *= inv;
        }

    TapeT<S>* tp = x.tape;
    TensorT<S> y = detail::make_output(x.shape, std::move(out), tp);
    if (tp && x.node >= 0) {
        const int yid = y.node, xn = x.node;
        const auto ys = y.store;
        tp->set_backward(yid, [=](TapeT<S>& t2) {
            const auto* gy = t2.grad_raw(yid);
            auto& gx = t2.grad_acc(xn);
            const S* pp = ys->data();
            for (long o = 0; o < outer; ++o)
                for (long in = 0; in < inner; ++in) {
                    const long base = o * d * inner + in;
                    double dot = 0.0;
                    for (long j = 0; j < d; ++j) {
                        const long ix = base + j * inner;
                        dot += static_cast<double>((*gy)[static_cast<std::size_t>(ix)]) * static_cast<double>(pp[ix]);
                    }
                    for (long j = 0; j < d; ++j) {
                        const long ix = base + j * inner;
                        gx[static_cast<std::size_t>(ix)] +=
                            pp[ix] * ((*gy)[static_cast<std::size_t>(ix)] - static_cast<S>(dot));
                    }
                }
        });
    }
    return y;
}

// LayerNorm over the last axis: zero mean / unit variance per position, then
// the affine gamma/beta.
template <class S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta, double eps = 1e-5) {
    const long d = x.shape.back();
    if (gamma.size() != d || beta.size() != d)
        throw shape_error("layer_norm: gamma/beta " + shape_str(gamma.shape) + "/" + shape_str(beta.shape) +
                          " do not match last axis of " + shape_str(x.shape));
    const long rows = x.size() / d;
    std::vector<S> out(static_cast<std::size_t>(x.size()));
    std::vector<S> inv_std(static_cast<std::size_t>(rows)), means(static_cast<std::size_t>(rows));
    const S* xp = x.data();
    const S* gp = gamma.data();
    const S* bp = beta.data();
    for (long r = 0; r < rows; ++r) {
        const S* row = xp + r * d;
        double mu = 0.0;
        for (long j = 0; j < d; ++j) mu += static_cast<double>(row[j]);
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (long j = 0; j < d; ++j) {
            const double c = static_cast<double>(row[j]) - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        means[static_cast<std::size_t>(r)] = static_cast<S>(mu);
        inv_std[static_cast<std::size_t>(r)] = static_cast<S>(inv);
        for (long j = 0; j < d; ++j) {
            const S xh = static_cast<S>((static_cast<double>(row[j]) - mu) * inv);
            out[static_cast<std::size_t>(r * d + j)] = xh * gp[j] + bp[j];
        }
    }

    TapeT<S>* tp = joint_tape(x, gamma);
    if (!tp) tp = beta.tape;
    TensorT<S> y = detail::make_output(x.shape, std::move(out), tp);
    if (tp) {
        const int yid = y.node, xn = x.node, gn = gamma.node, bnn = beta.node;
        const auto xs = x.store, gs = gamma.store;
        const auto mu_s = std::make_shared<std::vector<S>>(std::move(means));
        const auto inv_s = std::make_shared<std::vector<S>>(std::move(inv_std));
        tp->set_backward(yid, [=](TapeT<S>& t2) {
            const auto* gy = t2.grad_raw(yid);
            const S* xp2 = xs->data();
            const S* gp2 = gs->data();
            std::vector<S>* gx = xn >= 0 ? &t2.grad_acc(xn) : nullptr;
            std::vector<S>* gg = gn >= 0 ? &t2.grad_acc(gn) : nullptr;
            std::vector<S>* gb = bnn >= 0 ? &t2.grad_acc(bnn) : nullptr;
            for (long r = 0; r < rows; ++r) {
                const double mu = static_cast<double>((*mu_s)[static_cast<std::size_t>(r)]);
                const double inv = static_cast<double>((*inv_s)[static_cast<std::size_t>(r)]);
                double m1 = 0.0, m2 = 0.0;
                for (long j = 0; j < d; ++j) {
                    const long ix = r * d + j;
                    const double xh = (static_cast<double>(xp2[ix]) - mu) * inv;
                    const double dyh = static_cast<double>((*gy)[static_cast<std::size_t>(ix)]) * static_cast<double>(gp2[j]);
                    m1 += dyh;
                    m2 += dyh * xh;
                    if (gg) (*gg)[static_cast<std::size_t>(j)] += (*gy)[static_cast<std::size_t>(ix)] * static_cast<S>(xh);
                    if (gb) (*gb)[static_cast<std::size_t>(j)] += (*gy)[static_cast<std::size_t>(ix)];
                }
                if (gx) {
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    for (long j = 0; j < d; ++j) {
                        const long ix = r * d + j;
                        const double xh = (static_cast<double>(xp2[ix]) - mu) * inv;
                        const double dyh = static_cast<double>((*gy)[static_cast<std::size_t>(ix)]) * static_cast<double>(gp2[j]);
                        (*gx)[static_cast<std::size_t>(ix)] += static_cast<S>((dyh - m1 - xh * m2) * inv);
                    }
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Elementwise suite. Binary ops broadcast over leading axes only: when shapes
// differ, the smaller shape must equal the trailing suffix of the larger.

namespace detail {

template <class S>
void check_suffix_broadcast(const Shape& big, const Shape& small) {
    if (small.size() > big.size() ||
        !std::equal(small.rbegin(), small.rend(), big.rbegin()))
        throw shape_error("incompatible shapes " + shape_str(big) + " and " + shape_str(small));
}

enum class BinKind { Add, Sub, Mul };

template <class S>
TensorT<S> binary_op(const TensorT<S>& a, const TensorT<S>& b, BinKind kind) {
    const bool a_big = a.size() >= b.size();
    check_suffix_broadcast<S>(a_big ? a.shape : b.shape, a_big ? b.shape : a.shape);
    const Shape big = a_big ? a.shape : b.shape;
    const long n = shape_numel(big);
    const long sn = a_big ? b.size() : a.size();

    std::vector<S> out(static_cast<std::size_t>(n));
    const S* ap = a.data();
    const S* bp = b.data();
    for (long i = 0; i < n; ++i) {
        const S av = ap[a_big ? i : i % sn];
        const S bv = bp[a_big ? i % sn : i];
        out[static_cast<std::size_t>(i)] =
            kind == BinKind::Add ? av + bv : (kind == BinKind::Sub ? av - bv : av * bv);
    }

    TapeT<S>* tp = joint_tape(a, b);
    TensorT<S> y = detail::make_output(big, std::move(out), tp);
    if (tp) {
        const int yid = y.node, an = a.node, bn = b.node;
        const auto as = a.store, bs = b.store;
        tp->set_backward(yid, [=](TapeT<S>& t2) {
            const auto& gy = *t2.grad_raw(yid);
            if (an >= 0) {
                auto& ga = t2.grad_acc(an);
                const long asz = static_cast<long>(ga.size());
                for (long i = 0; i < n; ++i) {
                    S g = gy[static_cast<std::size_t>(i)];
                    if (kind == BinKind::Mul) g *= bs->data()[a_big ? i % sn : i];
                    ga[static_cast<std::size_t>(a_big ? i : i % asz)] += g;
                }
            }
            if (bn >= 0) {
                auto& gb = t2.grad_acc(bn);
                const long bsz = static_cast<long>(gb.size());
                for (long i = 0; i < n; ++i) {
                    S g = gy[static_cast<std::size_t>(i)];
                    if (kind == BinKind::Sub) g = -g;
                    if (kind == BinKind::Mul) g = gy[static_cast<std::size_t>(i)] * as->data()[a_big ? i : i % sn];
                    gb[static_cast<std::size_t>(a_big ? i % bsz : i)] += g;
                }
            }
        });
    }
    return y;
}

// Unary elementwise op with pointwise derivative.
template <class S, class F, class D>
TensorT<S> unary_op(const TensorT<S>& x, F f, D dfdx) {
    const long n = x.size();
    std::vector<S> out(static_cast<std::size_t>(n));
    const S* xp = x.data();
    for (long i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = f(xp[i]);
    TensorT<S> y = detail::make_output(x.shape, std::move(out), x.tape);
    if (x.tracked()) {
        const int yid = y.node, xn = x.node;
        const auto xs = x.store;
        x.tape->set_backward(yid, [=](TapeT<S>& t2) {
            const auto& gy = *t2.grad_raw(yid);
            auto& gx = t2.grad_acc(xn);
            const S* xp2 = xs->data();
            for (long i = 0; i < n; ++i)
                gx[static_cast<std::size_t>(i)] += gy[static_cast<std::size_t>(i)] * dfdx(xp2[i]);
        });
    }
    return y;
}

}  // namespace detail

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    return detail::binary_op(a, b, detail::BinKind::Add);
}
template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    return detail::binary_op(a, b, detail::BinKind::Sub);
}
template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    return detail::binary_op(a, b, detail::BinKind::Mul);
}

template <class S>
TensorT<S> scale(const TensorT<S>& x, S c) {
    return detail::unary_op(x, [c](S v) { return v * c; }, [c](S) { return c; });
}

template <class S>
TensorT<S> relu(const TensorT<S>& x) {
    return detail::unary_op(x, [](S v) { return v > S(0) ? v : S(0); },
                            [](S v) { return v > S(0) ? S(1) : S(0); });
}

template <class S>
TensorT<S> sigmoid(const TensorT<S>& x) {
    auto sg = [](S v) {
        const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(v)));
        return static_cast<S>(s);
    };
    return detail::unary_op(x, sg, [sg](S v) {
        const S s = sg(v);
        return s * (S(1) - s);
    });
}

namespace detail {
inline constexpr double kInvSqrt2 = 0.7071067811865475244;
inline constexpr double kInvSqrt2Pi = 0.3989422804014326779;
inline constexpr double kProbEps = 1e-7;
inline constexpr double kInvLn2 = 1.4426950408889634074;
}  // namespace detail

// Exact gelu: x/2 * (1 + erf(x/sqrt(2))).
template <class S>
TensorT<S> gelu(const TensorT<S>& x) {
    using detail::kInvSqrt2;
    using detail::kInvSqrt2Pi;
    return detail::unary_op(
        x,
        [](S v) {
            const double d = static_cast<double>(v);
            return static_cast<S>(0.5 * d * (1.0 + std::erf(d * kInvSqrt2)));
        },
        [](S v) {
            const double d = static_cast<double>(v);
            const double cdf = 0.5 * (1.0 + std::erf(d * kInvSqrt2));
            return static_cast<S>(cdf + d * kInvSqrt2Pi * std::exp(-0.5 * d * d));
        });
}

template <class S>
TensorT<S> concat(const std::vector<TensorT<S>>& parts, long axis) {
    if (parts.empty()) throw shape_error("concat: no inputs");
    const long rank = parts[0].rank();
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw shape_error("concat: axis out of range");
    Shape oshape = parts[0].shape;
    long total_axis = 0;
    for (const auto& p : parts) {
        if (p.rank() != rank) throw shape_error("concat: rank mismatch");
        for (long i = 0; i < rank; ++i)
            if (i != axis && p.shape[static_cast<std::size_t>(i)] != oshape[static_cast<std::size_t>(i)])
                throw shape_error("concat: extent mismatch at axis " + std::to_string(i) + ": " +
                                  shape_str(p.shape) + " vs " + shape_str(oshape));
        total_axis += p.shape[static_cast<std::size_t>(axis)];
    }
    oshape[static_cast<std::size_t>(axis)] = total_axis;

    long outer = 1, inner = 1;
    for (long i = 0; i < axis; ++i) outer *= oshape[static_cast<std::size_t>(i)];
    for (long i = axis + 1; i < rank; ++i) inner *= oshape[static_cast<std::size_t>(i)];

    std::vector<S> out(static_cast<std::size_t>(shape_numel(oshape)));
    long offset = 0;
    for (const auto& p : parts) {
        const long pa = p.shape[static_cast<std::size_t>(axis)];
        const S* pp = p.data();
        for (long o = 0; o < outer; ++o)
            std::copy(pp + o * pa * inner, pp + (o + 1) * pa * inner,
                      out.begin() + o * total_axis * inner + offset * inner);
        offset += pa;
    }

    TapeT<S>* tp = nullptr;
    for (const auto& p : parts)
        if (p.tracked()) {
            if (tp && tp != p.tape) throw std::invalid_argument("concat: mixed tapes");
            tp = p.tape;
        }
    TensorT<S> y = detail::make_output(std::move(oshape), std::move(out), tp);
    if (tp) {
        const int yid = y.node;
        std::vector<int> nodes;
        std::vector<long> extents;
        for (const auto& p : parts) {
            nodes.push_back(p.node);
            extents.push_back(p.shape[static_cast<std::size_t>(axis)]);
        }
        tp->set_backward(yid, [=](TapeT<S>& t2) {
            const auto& gy = *t2.grad_raw(yid);
            long off = 0;
            for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
                const long pa = extents[pi];
                if (nodes[pi] >= 0) {
                    auto& gp = t2.grad_acc(nodes[pi]);
                    for (long o = 0; o < outer; ++o)
                        for (long j = 0; j < pa * inner; ++j)
                            gp[static_cast<std::size_t>(o * pa * inner + j)] +=
                                gy[static_cast<std::size_t>(o * total_axis * inner + off * inner + j)];
                }
                off += pa;
            }
        });
    }
    return y;
}

template <class S>
TensorT<S> reshape(const TensorT<S>& x, Shape shape) {
    if (shape_numel(shape) != x.size())
        throw shape_error("reshape: cannot view " + shape_str(x.shape) + " as " + shape_str(shape));
    TensorT<S> y;
    y.shape = std::move(shape);
    y.store = x.store;  // values are immutable after construction, aliasing is safe
    if (x.tracked()) {
        y.tape = x.tape;
        y.node = x.tape->add_node(y.shape);
        const int yid = y.node, xn = x.node;
        x.tape->set_backward(yid, [=](TapeT<S>& t2) {
            const auto& gy = *t2.grad_raw(yid);
            auto& gx = t2.grad_acc(xn);
            for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
        });
    }
    return y;
}

// Swap the last two axes (batched over the leading ones).
template <class S>
TensorT<S> transpose2(const TensorT<S>& x) {
    if (x.rank() < 2) throw shape_error("transpose2: rank >= 2 required, got " + shape_str(x.shape));
    Shape oshape = x.shape;
    std::swap(oshape[oshape.size() - 1], oshape[oshape.size() - 2]);
    const long m = x.shape[x.shape.size() - 2];
    const long n = x.shape[x.shape.size() - 1];
    const long nb = x.size() / (m * n);
    std::vector<S> out(static_cast<std::size_t>(x.size()));
    const S* xp = x.data();
    for (long t = 0; t < nb; ++t)
        for (long i = 0; i < m; ++i)
            for (long j = 0; j < n; ++j)
                out[static_cast<std::size_t>(t * m * n + j * m + i)] = xp[t * m * n + i * n + j];
    TensorT<S> y = detail::make_output(std::move(oshape), std::move(out), x.tape);
    if (x.tracked()) {
        const int yid = y.node, xn = x.node;
        x.tape->set_backward(yid, [=](TapeT<S>& t2) {
            const auto& gy = *t2.grad_raw(yid);
            auto& gx = t2.grad_acc(xn);
            for (long t = 0; t < nb; ++t)
                for (long i = 0; i < m; ++i)
                    for (long j = 0; j < n; ++j)
                        gx[static_cast<std::size_t>(t * m * n + i * n + j)] +=
                            gy[static_cast<std::size_t>(t * m * n + j * m + i)];
        });
    }
    return y;
}

template <class S>
TensorT<S> sum(const TensorT<S>& x) {
    double acc = 0.0;
    for (S v : *x.store) acc += static_cast<double>(v);
    TensorT<S> y = detail::make_output(Shape{1}, std::vector<S>{static_cast<S>(acc)}, x.tape);
    if (x.tracked()) {
        const int yid = y.node, xn = x.node;
        const long n = x.size();
        x.tape->set_backward(yid, [=](TapeT<S>& t2) {
            const S g = (*t2.grad_raw(yid))[0];
            auto& gx = t2.grad_acc(xn);
            for (long i = 0; i < n; ++i) gx[static_cast<std::size_t>(i)] += g;
        });
    }
    return y;
}

template <class S>
TensorT<S> mean(const TensorT<S>& x) {
    const long n = x.size();
    double acc = 0.0;
    for (S v : *x.store) acc += static_cast<double>(v);
    TensorT<S> y = detail::make_output(Shape{1}, std::vector<S>{static_cast<S>(acc / static_cast<double>(n))}, x.tape);
    if (x.tracked()) {
        const int yid = y.node, xn = x.node;
        x.tape->set_backward(yid, [=](TapeT<S>& t2) {
            const S g = (*t2.grad_raw(yid))[0] / static_cast<S>(n);
            auto& gx = t2.grad_acc(xn);
            for (long i = 0; i < n; ++i) gx[static_cast<std::size_t>(i)] += g;
        });
    }
    return y;
}

// out[i, :] = x[idx[i], :]. Window partitioning, cyclic shifts and the
// pixel-shuffle style regroupings are all instances of this gather.
template <class S>
TensorT<S> permute_rows(const TensorT<S>& x, std::shared_ptr<const std::vector<long>> idx) {
    if (x.rank() != 2) throw shape_error("permute_rows: rank-2 tensor required, got " + shape_str(x.shape));
    const long rows = x.shape[0], cols = x.shape[1];
    const long orows = static_cast<long>(idx->size());
    std::vector<S> out(static_cast<std::size_t>(orows * cols));
    const S* xp = x.data();
    for (long i = 0; i < orows; ++i) {
        const long src = (*idx)[static_cast<std::size_t>(i)];
        if (src < 0 || src >= rows) throw shape_error("permute_rows: index out of range");
        std::copy(xp + src * cols, xp + (src + 1) * cols, out.begin() + i * cols);
    }
    TensorT<S> y = detail::make_output(Shape{orows, cols}, std::move(out), x.tape);
    if (x.tracked()) {
        const int yid = y.node, xn = x.node;
        x.tape->set_backward(yid, [=](TapeT<S>& t2) {
            const auto& gy = *t2.grad_raw(yid);
            auto& gx = t2.grad_acc(xn);
            for (long i = 0; i < orows; ++i) {
                const long src = (*idx)[static_cast<std::size_t>(i)];
                for (long j = 0; j < cols; ++j)
                    gx[static_cast<std::size_t>(src * cols + j)] += gy[static_cast<std::size_t>(i * cols + j)];
            }
        });
    }
    return y;
}

template <class S>
TensorT<S> permute_rows(const TensorT<S>& x, std::vector<long> idx) {
    return permute_rows(x, std::make_shared<const std::vector<long>>(std::move(idx)));
}

// x[..., from:to] along the last axis.
template <class S>
TensorT<S> slice_last(const TensorT<S>& x, long from, long to) {
    const long d = x.shape.back();
    if (from < 0 || to > d || from >= to)
        throw shape_error("slice_last: bad range [" + std::to_string(from) + "," + std::to_string(to) +
                          ") for " + shape_str(x.shape));
    const long w = to - from;
    const long rows = x.size() / d;
    Shape oshape = x.shape;
    oshape.back() = w;
    std::vector<S> out(static_cast<std::size_t>(rows * w));
    const S* xp = x.data();
    for (long r = 0; r < rows; ++r)
        std::copy(xp + r * d + from, xp + r * d + to, out.begin() + r * w);
    TensorT<S> y = detail::make_output(std::move(oshape), std::move(out), x.tape);
    if (x.tracked()) {
        const int yid = y.node, xn = x.node;
        x.tape->set_backward(yid, [=](TapeT<S>& t2) {
            const auto& gy = *t2.grad_raw(yid);
            auto& gx = t2.grad_acc(xn);
            for (long r = 0; r < rows; ++r)
                for (long j = 0; j < w; ++j)
                    gx[static_cast<std::size_t>(r * d + from + j)] += gy[static_cast<std::size_t>(r * w + j)];
        });
    }
    return y;
}

// Bilinear upsampling of an h x w token grid stored as [h*w, C], by an integer
// factor, half-pixel centers.
template <class S>
TensorT<S> bilinear_upsample(const TensorT<S>& x, long h, long w, long factor) {
    if (x.rank() != 2 || x.shape[0] != h * w)
        throw shape_error("bilinear_upsample: expected [" + std::to_string(h * w) + ", C], got " + shape_str(x.shape));
    const long c = x.shape[1];
    const long oh = h * factor, ow = w * factor;

    auto axis_table = [&](long src, long dst) {
        std::vector<long> i0(static_cast<std::size_t>(dst)), i1(static_cast<std::size_t>(dst));
        std::vector<S> t(static_cast<std::size_t>(dst));
        for (long o = 0; o < dst; ++o) {
            double p = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
            p = std::min(std::max(p, 0.0), static_cast<double>(src - 1));
            const long lo = static_cast<long>(std::floor(p));
            i0[static_cast<std::size_t>(o)] = lo;
            i1[static_cast<std::size_t>(o)] = std::min(lo + 1, src - 1);
            t[static_cast<std::size_t>(o)] = static_cast<S>(p - static_cast<double>(lo));
        }
        return std::make_tuple(i0, i1, t);
    };
    auto [y0, y1, ty] = axis_table(h, oh);
    auto [x0, x1, tx] = axis_table(w, ow);

    std::vector<S> out(static_cast<std::size_t>(oh * ow * c));
    const S* xp = x.data();
    for (long r = 0; r < oh; ++r)
        for (long q = 0; q < ow; ++q) {
            const S wy = ty[static_cast<std::size_t>(r)], wx = tx[static_cast<std::size_t>(q)];
            const long r0 = y0[static_cast<std::size_t>(r)], r1 = y1[static_cast<std::size_t>(r)];
            const long q0 = x0[static_cast<std::size_t>(q)], q1 = x1[static_cast<std::size_t>(q)];
            const S w00 = (S(1) - wy) * (S(1) - wx), w01 = (S(1) - wy) * wx;
            const S w10 = wy * (S(1) - wx), w11 = wy * wx;
            S* op = out.data() + (r * ow + q) * c;
            const S* p00 = xp + (r0 * w + q0) * c;
            const S* p01 = xp + (r0 * w + q1) * c;
            const S* p10 = xp + (r1 * w + q0) * c;
            const S* p11 = xp + (r1 * w + q1) * c;
            for (long k = 0; k < c; ++k) op[k] = w00 * p00[k] + w01 * p01[k] + w10 * p10[k] + w11 * p11[k];
        }

    TensorT<S> y = detail::make_output(Shape{oh * ow, c}, std::move(out), x.tape);
    if (x.tracked()) {
        const int yid = y.node, xn = x.node;
        auto tables = std::make_shared<std::tuple<std::vector<long>, std::vector<long>, std::vector<S>,
                                                  std::vector<long>, std::vector<long>, std::vector<S>>>(
            y0, y1, ty, x0, x1, tx);
        x.tape->set_backward(yid, [=](TapeT<S>& t2) {
            const auto& gy = *t2.grad_raw(yid);
            auto& gx = t2.grad_acc(xn);
            const auto& [y0b, y1b, tyb, x0b, x1b, txb] = *tables;
            for (long r = 0; r < oh; ++r)
                for (long q = 0; q < ow; ++q) {
                    const S wy = tyb[static_cast<std::size_t>(r)], wx = txb[static_cast<std::size_t>(q)];
                    const long r0 = y0b[static_cast<std::size_t>(r)], r1 = y1b[static_cast<std::size_t>(r)];
                    const long q0 = x0b[static_cast<std::size_t>(q)], q1 = x1b[static_cast<std::size_t>(q)];
                    const S w00 = (S(1) - wy) * (S(1) - wx), w01 = (S(1) - wy) * wx;
                    const S w10 = wy * (S(1) - wx), w11 = wy * wx;
                    const S* gp = gy.data() + (r * ow + q) * c;
                    for (long k = 0; k < c; ++k) {
                        gx[static_cast<std::size_t>((r0 * w + q0) * c + k)] += w00 * gp[k];
                        gx[static_cast<std::size_t>((r0 * w + q1) * c + k)] += w01 * gp[k];
                        gx[static_cast<std::size_t>((r1 * w + q0) * c + k)] += w10 * gp[k];
                        gx[static_cast<std::size_t>((r1 * w + q1) * c + k)] += w11 * gp[k];
                    }
                }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Fused losses. All means are taken in double and the backward formulas are
// analytic.

// Mean negative log probability of the true class over non-ignored pixels,
// computed from logits in one stable pass. Returns 0 when every pixel is
// ignored (callers can detect that through valid_out).
template <class S>
TensorT<S> cross_entropy_logits(const TensorT<S>& logits, std::shared_ptr<const std::vector<int>> labels,
                                int ignore_label, long* valid_out = nullptr) {
    if (logits.rank() != 2) throw shape_error("cross_entropy_logits: [N,K] expected, got " + shape_str(logits.shape));
    const long n = logits.shape[0], k = logits.shape[1];
    if (static_cast<long>(labels->size()) != n)
        throw shape_error("cross_entropy_logits: label count " + std::to_string(labels->size()) +
                          " != rows " + std::to_string(n));
    const S* lp = logits.data();
    double acc = 0.0;
    long valid = 0;
    for (long i = 0; i < n; ++i) {
        const int y = (*labels)[static_cast<std::size_t>(i)];
        if (y == ignore_label) continue;
        if (y < 0 || y >= k) throw data_error("cross_entropy_logits: label " + std::to_string(y) + " out of range");
        const S* row = lp + i * k;
        S mx = row[0];
        for (long j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double lse = 0.0;
        for (long j = 0; j < k; ++j) lse += std::exp(static_cast<double>(row[j] - mx));
        acc += std::log(lse) - static_cast<double>(row[y] - mx);
        ++valid;
    }
    if (valid_out) *valid_out = valid;
    const double loss = valid > 0 ? acc / static_cast<double>(valid) : 0.0;

    TensorT<S> out = detail::make_output(Shape{1}, std::vector<S>{static_cast<S>(loss)}, logits.tape);
    if (logits.tracked() && valid > 0) {
        const int yid = out.node, xn = logits.node;
        const auto ls = logits.store;
        logits.tape->set_backward(yid, [=](TapeT<S>& t2) {
            const S g = (*t2.grad_raw(yid))[0] / static_cast<S>(valid);
            auto& gx = t2.grad_acc(xn);
            const S* lp2 = ls->data();
            for (long i = 0; i < n; ++i) {
                const int y = (*labels)[static_cast<std::size_t>(i)];
                if (y == ignore_label) continue;
                const S* row = lp2 + i * k;
                S mx = row[0];
                for (long j = 1; j < k; ++j) mx = std::max(mx, row[j]);
                double denom = 0.0;
                for (long j = 0; j < k; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
                for (long j = 0; j < k; ++j) {
                    const double p = std::exp(static_cast<double>(row[j] - mx)) / denom;
                    gx[static_cast<std::size_t>(i * k + j)] += g * static_cast<S>(p - (j == y ? 1.0 : 0.0));
                }
            }
        });
    }
    return out;
}

// Mean absolute error over masked positions; empty mask yields 0.
template <class S>
TensorT<S> l1_masked(const TensorT<S>& pred, std::shared_ptr<const std::vector<S>> target,
                     std::shared_ptr<const std::vector<std::uint8_t>> mask, long* valid_out = nullptr) {
    const long n = pred.size();
    if (static_cast<long>(target->size()) != n || (mask && static_cast<long>(mask->size()) != n))
        throw shape_error("l1_masked: size mismatch");
    const S* pp = pred.data();
    double acc = 0.0;
    long valid = 0;
    for (long i = 0; i < n; ++i) {
        if (mask && !(*mask)[static_cast<std::size_t>(i)]) continue;
        acc += std::abs(static_cast<double>(pp[i] - (*target)[static_cast<std::size_t>(i)]));
        ++valid;
    }
    if (valid_out) *valid_out = valid;
    const double loss = valid > 0 ? acc / static_cast<double>(valid) : 0.0;
    TensorT<S> out = detail::make_output(Shape{1}, std::vector<S>{static_cast<S>(loss)}, pred.tape);
    if (pred.tracked() && valid > 0) {
        const int yid = out.node, xn = pred.node;
        const auto ps = pred.store;
        pred.tape->set_backward(yid, [=](TapeT<S>& t2) {
            const S g = (*t2.grad_raw(yid))[0] / static_cast<S>(valid);
            auto& gx = t2.grad_acc(xn);
            const S* pp2 = ps->data();
            for (long i = 0; i < n; ++i) {
                if (mask && !(*mask)[static_cast<std::size_t>(i)]) continue;
                const S d = pp2[i] - (*target)[static_cast<std::size_t>(i)];
                gx[static_cast<std::size_t>(i)] += g * (d > S(0) ? S(1) : (d < S(0) ? -S(1) : S(0)));
            }
        });
    }
    return out;
}

// Mean binary cross-entropy against a constant label, from logits
// (loss = max(z,0) - z*y + log(1+exp(-|z|)), in nats).
template <class S>
TensorT<S> bce_logits(const TensorT<S>& logits, double label) {
    const long n = logits.size();
    const S* zp = logits.data();
    double acc = 0.0;
    for (long i = 0; i < n; ++i) {
        const double z = static_cast<double>(zp[i]);
        acc += std::max(z, 0.0) - z * label + std::log1p(std::exp(-std::abs(z)));
    }
    TensorT<S> out = detail::make_output(Shape{1}, std::vector<S>{static_cast<S>(acc / static_cast<double>(n))},
                                         logits.tape);
    if (logits.tracked()) {
        const int yid = out.node, xn = logits.node;
        const auto zs = logits.store;
        logits.tape->set_backward(yid, [=](TapeT<S>& t2) {
            const S g = (*t2.grad_raw(yid))[0] / static_cast<S>(n);
            auto& gx = t2.grad_acc(xn);
            const S* zp2 = zs->data();
            for (long i = 0; i < n; ++i) {
                const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(zp2[i])));
                gx[static_cast<std::size_t>(i)] += g * static_cast<S>(s - label);
            }
        });
    }
    return out;
}

// Binary entropy in bits, elementwise; inputs clamped away from {0,1}.
template <class S>
TensorT<S> entropy_bits(const TensorT<S>& p) {
    return detail::unary_op(
        p,
        [](S v) {
            double q = std::min(std::max(static_cast<double>(v), detail::kProbEps), 1.0 - detail::kProbEps);
            return static_cast<S>(-(q * std::log2(q) + (1.0 - q) * std::log2(1.0 - q)));
        },
        [](S v) {
            const double q = static_cast<double>(v);
            if (q <= detail::kProbEps || q >= 1.0 - detail::kProbEps) return S(0);
            return static_cast<S>(std::log((1.0 - q) / q) * detail::kInvLn2);
        });
}

}  // namespace panelkit

