#pragma once

#include <cmath>
#include <vector>

#include "dfformer/layers.hpp"
#include "dfformer/rng.hpp"
#include "dfformer/tensor.hpp"

namespace dff {

/// Central-difference gradient check. The layer output is reduced to a
/// scalar through a fixed random projection; every input and parameter
/// coordinate is then perturbed by +-epsilon and the two-sided difference
/// quotient is compared against the analytic gradient from backward.
/// Returns the worst relative error, with the denominator floored at 1 so
/// coordinates with near-zero gradient are compared absolutely.
///
/// Use with a wide element type (double); the default epsilon is tuned for
/// that precision.
template <class T, class Layer>
T finite_diff_check(Layer& layer, const Tensor<T>& input, T epsilon = T(1e-4),
                    std::uint64_t seed = 7) {
    if (!(epsilon > T(0))) {
        throw std::invalid_argument("finite_diff_check: epsilon must be > 0");
    }

    Tensor<T> y0 = layer.forward(input);
    if (!all_finite(y0)) {
        throw std::runtime_error("finite_diff_check: non-finite forward output");
    }
    Tensor<T> projection(y0.b(), y0.c(), y0.h(), y0.w());
    Rng rng(mix_seed(seed, 0x70726f6aull));
    for (auto& v : projection.data) {
        v = static_cast<T>(rng.normal());
    }

    const auto project = [&](const Tensor<T>& x) -> T {
        Tensor<T> y = layer.forward(x);
        T acc = T(0);
        for (std::size_t i = 0; i < y.data.size(); ++i) {
            acc += y.data[i] * projection.data[i];
        }
        return acc;
    };

    // Analytic gradients of the projected scalar.
    layer.zero_grad();
    layer.forward(input);
    Tensor<T> analytic_gx = layer.backward(projection);
    const std::vector<ParamRef<T>> params = layer.parameters();
    std::vector<std::vector<T>> analytic_gp;
    analytic_gp.reserve(params.size());
    for (const auto& p : params) {
        analytic_gp.emplace_back(p.grad, p.grad + p.size);
    }

    T worst = T(0);
    const auto update_worst = [&](T analytic, T numeric) {
        if (!std::isfinite(analytic) || !std::isfinite(numeric)) {
            throw std::runtime_error("finite_diff_check: non-finite gradient value");
        }
        const T denom = std::max({T(1), std::abs(analytic), std::abs(numeric)});
        worst = std::max(worst, std::abs(analytic - numeric) / denom);
    };

    Tensor<T> x = input;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const T saved = x.data[i];
        x.data[i] = saved + epsilon;
        const T plus = project(x);
        x.data[i] = saved - epsilon;
        const T minus = project(x);
        x.data[i] = saved;
        update_worst(analytic_gx.data[i], (plus - minus) / (T(2) * epsilon));
    }

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const ParamRef<T>& p = params[pi];
        for (std::int64_t i = 0; i < p.size; ++i) {
            const T saved = p.data[i];
            p.data[i] = saved + epsilon;
            const T plus = project(input);
            p.data[i] = saved - epsilon;
            const T minus = project(input);
            p.data[i] = saved;
            update_worst(analytic_gp[pi][static_cast<std::size_t>(i)],
                         (plus - minus) / (T(2) * epsilon));
        }
    }
    return worst;
}

}  // namespace dff
