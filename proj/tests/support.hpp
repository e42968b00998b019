#pragma once

// Shared test utilities: finite-difference gradient checking in double
// precision (central differences, step 1e-4).

#include <functional>
#include <vector>

#include "panelkit/tensor.hpp"

namespace pktest {

using panelkit::Shape;
using panelkit::TapeT;
using panelkit::TensorT;

using DTensor = TensorT<double>;
using DTape = TapeT<double>;

// f receives the tape and tracked copies of the inputs and must return a
// scalar. Returns the largest relative error between analytic and numeric
// gradients over all input elements.
inline double max_grad_err(const std::function<DTensor(DTape&, std::vector<DTensor>&)>& f,
                           std::vector<DTensor> inputs, double h = 1e-4) {
    DTape tape;
    std::vector<DTensor> tracked;
    tracked.reserve(inputs.size());
    for (auto& in : inputs) tracked.push_back(tape.watch(in));
    DTensor loss = f(tape, tracked);
    tape.backward(loss);
    std::vector<DTensor> analytic;
    for (auto& t : tracked) analytic.push_back(tape.grad(t));

    auto eval = [&](const std::vector<DTensor>& xs) {
        DTape t2;
        std::vector<DTensor> tr;
        for (const auto& x : xs) tr.push_back(x.detached());
        return f(t2, tr).item();
    };

    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        for (long j = 0; j < inputs[i].size(); ++j) {
            std::vector<DTensor> plus, minus;
            for (std::size_t q = 0; q < inputs.size(); ++q) {
                plus.push_back(DTensor::from(inputs[q].shape, *inputs[q].store));
                minus.push_back(DTensor::from(inputs[q].shape, *inputs[q].store));
            }
            plus[i].data()[j] += h;
            minus[i].data()[j] -= h;
            const double fd = (eval(plus) - eval(minus)) / (2.0 * h);
            const double an = analytic[i].data()[j];
            const double err = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

inline DTensor random_tensor(Shape shape, panelkit::Rng& rng, double lo = -1.0, double hi = 1.0) {
    DTensor t = DTensor::zeros(std::move(shape));
    fill_uniform(t, rng, lo, hi);
    return t;
}

}  // namespace pktest
