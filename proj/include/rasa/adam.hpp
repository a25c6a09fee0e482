#pragma once
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "rasa/tensor.hpp"

namespace rasa {

// Bias-corrected adaptive-moment optimizer state, shape-aligned with the
// parameter list it was created for.
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t step_count = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    static AdamState for_params(const std::vector<Tensor>& params, double beta1 = 0.9,
                                double beta2 = 0.999, double eps = 1e-8) {
        AdamState s;
        s.beta1 = beta1;
        s.beta2 = beta2;
        s.eps = eps;
        s.m.reserve(params.size());
        s.v.reserve(params.size());
        for (const auto& p : params) {
            s.m.emplace_back(p.size(), 0.0);
            s.v.emplace_back(p.size(), 0.0);
        }
        return s;
    }
};

// In-place parameter update from the gradients currently held by each tensor.
inline void adam_step(std::vector<Tensor>& params, AdamState& state, double lr) {
    if (!(lr > 0.0)) throw NumericError("adam_step: learning rate must be positive");
    if (state.m.size() != params.size())
        throw ShapeError("adam_step: state holds " + std::to_string(state.m.size()) +
                         " moment slots for " + std::to_string(params.size()) + " parameters");
    state.step_count += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        if (state.m[pi].size() != p.size())
            throw ShapeError("adam_step: moment shape mismatch at parameter " + std::to_string(pi));
        auto values = p.mutable_data();
        auto grads = p.mutable_grad();
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double g = grads[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            values[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

inline void zero_grads(std::vector<Tensor>& params) {
    for (auto& p : params) p.zero_grad();
}

}  // namespace rasa
