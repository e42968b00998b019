#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "panelkit/tensor.hpp"

namespace panelkit {

enum class Init { Zeros, Ones, TruncNormal02 };

// Named parameter tensors in creation order. Parameters are created on first
// use, so initialization order follows the first forward pass and is
// deterministic for a fixed seed.
template <class S>
class ParamStore {
public:
    explicit ParamStore(std::uint64_t init_seed = 0) : rng_(init_seed) {}

    TensorT<S>& get_or_create(const std::string& name, const Shape& shape, Init init) {
        auto it = index_.find(name);
        if (it != index_.end()) {
            Entry& e = entries_[it->second];
            if (e.value.shape != shape)
                throw shape_error("parameter '" + name + "' shape " + shape_str(e.value.shape) +
                                  " does not match requested " + shape_str(shape));
            return e.value;
        }
        TensorT<S> t = TensorT<S>::zeros(shape);
        switch (init) {
            case Init::Zeros: break;
            case Init::Ones: std::fill(t.store->begin(), t.store->end(), S(1)); break;
            case Init::TruncNormal02: fill_trunc_normal(t, rng_, 0.02); break;
        }
        index_.emplace(name, entries_.size());
        entries_.push_back(Entry{name, std::move(t), 0, -1});
        return entries_.back().value;
    }

    // Tracked view of a parameter; memoized per tape so repeated uses within
    // one step share a single leaf node.
    TensorT<S> use(const std::string& name, const Shape& shape, Init init, TapeT<S>& tape) {
        TensorT<S>& v = get_or_create(name, shape, init);
        Entry& e = entries_[index_.at(name)];
        if (e.tape_serial == tape.serial() && e.node >= 0) {
            TensorT<S> t = v;
            t.tape = &tape;
            t.node = e.node;
            return t;
        }
        TensorT<S> t = tape.watch(v, name);
        e.tape_serial = tape.serial();
        e.node = t.node;
        return t;
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }
    TensorT<S>& at(const std::string& name) { return entries_[index_.at(name)].value; }
    const TensorT<S>& at(const std::string& name) const { return entries_[index_.at(name)].value; }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.push_back(e.name);
        return out;
    }
    std::size_t count() const { return entries_.size(); }
    long total_scalars() const {
        long n = 0;
        for (const auto& e : entries_) n += e.value.size();
        return n;
    }

    template <class Fn>
    void for_each(Fn fn) {
        for (auto& e : entries_) fn(e.name, e.value);
    }
    template <class Fn>
    void for_each(Fn fn) const {
        for (const auto& e : entries_) fn(e.name, e.value);
    }

private:
    struct Entry {
        std::string name;
        TensorT<S> value;
        std::uint64_t tape_serial;
        int node;
    };
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
    Rng rng_;
};

}  // namespace panelkit
