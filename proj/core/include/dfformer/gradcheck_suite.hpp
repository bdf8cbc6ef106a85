#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dfformer/gradcheck.hpp"
#include "dfformer/model.hpp"

namespace dff {

/// Explicit-offset deformable convolution wrapped for the gradient check:
/// the offset field is exposed as a parameter so the check differentiates
/// through the bilinear sampling itself.
struct DeformableCoreCheck {
    Tensor<double> weight, grad_weight;
    std::vector<double> bias, grad_bias;
    OffsetField<double> offsets, grad_offsets;
    bool depthwise = false;
    Tensor<double> saved_x;

    DeformableCoreCheck(std::int64_t c_in, std::int64_t c_out, std::int64_t kernel,
                        std::int64_t h, std::int64_t w, bool dw = false)
        : weight(c_out, dw ? 1 : c_in, kernel, kernel),
          grad_weight(c_out, dw ? 1 : c_in, kernel, kernel),
          bias(static_cast<std::size_t>(c_out), 0.0),
          grad_bias(static_cast<std::size_t>(c_out), 0.0),
          offsets(1, 2 * kernel * kernel, h, w),
          grad_offsets(1, 2 * kernel * kernel, h, w),
          depthwise(dw) {}

    Tensor<double> forward(const Tensor<double>& x) {
        saved_x = x;
        return deformable_conv_forward(x, offsets, weight, bias, depthwise);
    }

    Tensor<double> backward(const Tensor<double>& grad_out) {
        DeformableGrads<double> g = deformable_conv_backward(grad_out, saved_x, offsets, weight,
                                                             grad_weight, grad_bias, depthwise);
        add_inplace(grad_offsets, g.grad_offsets);
        return std::move(g.grad_x);
    }

    std::vector<ParamRef<double>> parameters() {
        return {
            {"weight", weight.data.data(), grad_weight.data.data(), weight.size()},
            {"bias", bias.data(), grad_bias.data(), static_cast<std::int64_t>(bias.size())},
            {"offsets", offsets.data.data(), grad_offsets.data.data(), offsets.size()},
        };
    }

    void zero_grad() {
        grad_weight.fill(0.0);
        std::fill(grad_bias.begin(), grad_bias.end(), 0.0);
        grad_offsets.fill(0.0);
    }
};

namespace detail {

inline Tensor<double> random_tensor(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w,
                                    Rng& rng, double scale = 1.0) {
    Tensor<double> t(b, c, h, w);
    for (auto& v : t.data) {
        v = rng.normal(0.0, scale);
    }
    return t;
}

inline void randomize(const std::vector<ParamRef<double>>& params, Rng& rng, double scale) {
    for (const auto& p : params) {
        for (std::int64_t i = 0; i < p.size; ++i) {
            p.data[i] = rng.normal(0.0, scale);
        }
    }
}

/// Offsets at least `margin` from every integer grid line: magnitude drawn
/// from [margin + 0.05, 0.5 - margin/2] with random sign.
inline void fill_offgrid_offsets(Tensor<double>& offsets, Rng& rng, double margin = 0.1) {
    for (auto& v : offsets.data) {
        const double mag = rng.uniform(margin + 0.05, 0.35);
        v = rng.uniform() < 0.5 ? -mag : mag;
    }
}

/// Biases the offset predictor so the predicted field sits away from the
/// integer grid while its weights stay small enough that epsilon-sized
/// perturbations cannot cross a grid line.
template <class T>
void nudge_offset_predictors(Model<T>& model, Rng& rng) {
    for (const auto& p : model.parameters()) {
        if (p.name.find(".offset.") == std::string::npos) {
            continue;
        }
        if (p.name.ends_with(".bias")) {
            for (std::int64_t i = 0; i < p.size; ++i) {
                p.data[i] = static_cast<T>((i % 2 == 0 ? 1.0 : -1.0) * rng.uniform(0.2, 0.35));
            }
        } else {
            for (std::int64_t i = 0; i < p.size; ++i) {
                p.data[i] = static_cast<T>(rng.normal(0.0, 0.005));
            }
        }
    }
}

}  // namespace detail

struct GradCheckEntry {
    std::string name;
    double max_rel_error;
    double tolerance;
};

/// The standard gradient-check battery at wide precision: every layer type,
/// the deformable convolution (input, weights, offsets), and a full tiny
/// model end to end.
inline std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed) {
    std::vector<GradCheckEntry> results;
    Rng rng(mix_seed(seed, 0x67636b73ull));

    {
        Conv2d<double> conv(2, 3, 3, 1, 1);
        detail::randomize(conv.parameters(), rng, 0.5);
        Tensor<double> x = detail::random_tensor(1, 2, 6, 6, rng);
        results.push_back({"conv2d_3x3", finite_diff_check(conv, x), 1e-4});
    }
    {
        Conv2d<double> conv(3, 4, 7, 4, 3);
        detail::randomize(conv.parameters(), rng, 0.3);
        Tensor<double> x = detail::random_tensor(1, 3, 12, 12, rng);
        results.push_back({"conv2d_7x7_s4", finite_diff_check(conv, x), 1e-4});
    }
    {
        Linear<double> lin(8, 4);
        detail::randomize(lin.parameters(), rng, 0.5);
        Tensor<double> x = detail::random_tensor(3, 8, 1, 1, rng);
        results.push_back({"linear", finite_diff_check(lin, x), 1e-4});
    }
    {
        ChannelNorm<double> norm(4);
        detail::randomize(norm.parameters(), rng, 0.5);
        Tensor<double> x = detail::random_tensor(2, 4, 3, 3, rng);
        results.push_back({"channel_norm", finite_diff_check(norm, x), 1e-4});
    }
    {
        Gelu<double> act;
        Tensor<double> x = detail::random_tensor(2, 3, 4, 4, rng);
        results.push_back({"gelu", finite_diff_check(act, x), 1e-4});
    }
    {
        Block<double> block(6, 3, 2, MixerKind::identity, false);
        std::vector<ParamRef<double>> ps;
        block.collect_params("block", ps);
        detail::randomize(ps, rng, 0.3);
        Tensor<double> x = detail::random_tensor(1, 6, 5, 5, rng);
        results.push_back({"mlp_block", finite_diff_check(block, x), 1e-4});
    }
    {
        DeformableCoreCheck core(2, 3, 3, 5, 5);
        Rng wrng(mix_seed(seed, 1));
        for (auto& v : core.weight.data) {
            v = wrng.normal(0.0, 0.5);
        }
        for (auto& v : core.bias) {
            v = wrng.normal(0.0, 0.5);
        }
        detail::fill_offgrid_offsets(core.offsets, wrng);
        Tensor<double> x = detail::random_tensor(1, 2, 5, 5, wrng);
        results.push_back({"deformable_conv", finite_diff_check(core, x), 1e-4});
    }
    {
        DeformableCoreCheck core(3, 3, 3, 4, 4, /*depthwise=*/true);
        Rng wrng(mix_seed(seed, 2));
        for (auto& v : core.weight.data) {
            v = wrng.normal(0.0, 0.5);
        }
        detail::fill_offgrid_offsets(core.offsets, wrng);
        Tensor<double> x = detail::random_tensor(1, 3, 4, 4, wrng);
        results.push_back({"deformable_conv_depthwise", finite_diff_check(core, x), 1e-4});
    }
    {
        DeformableMixer<double> mixer(2, 3, false);
        DeformableConv<double>& conv = mixer.conv();
        Rng wrng(mix_seed(seed, 3));
        for (auto& v : conv.main.weight.data) {
            v = wrng.normal(0.0, 0.5);
        }
        for (auto& v : conv.offset_predictor().params.weight.data) {
            v = wrng.normal(0.0, 0.005);
        }
        for (std::size_t i = 0; i < conv.offset_predictor().params.bias.size(); ++i) {
            conv.offset_predictor().params.bias[i] =
                (i % 2 == 0 ? 1.0 : -1.0) * wrng.uniform(0.2, 0.35);
        }
        struct MixerAdapter {
            DeformableMixer<double>& m;
            Tensor<double> forward(const Tensor<double>& x) { return m.forward(x); }
            Tensor<double> backward(const Tensor<double>& g) { return m.backward(g); }
            std::vector<ParamRef<double>> parameters() {
                std::vector<ParamRef<double>> out;
                m.collect_params("mixer", out);
                return out;
            }
            void zero_grad() { m.zero_grad(); }
        } adapter{mixer};
        Tensor<double> x = detail::random_tensor(1, 2, 5, 5, wrng);
        results.push_back({"deformable_mixer", finite_diff_check(adapter, x), 1e-4});
    }
    {
        PoolingMixer<double> mixer(3);
        struct MixerAdapter {
            PoolingMixer<double>& m;
            Tensor<double> forward(const Tensor<double>& x) { return m.forward(x); }
            Tensor<double> backward(const Tensor<double>& g) { return m.backward(g); }
            std::vector<ParamRef<double>> parameters() { return {}; }
            void zero_grad() {}
        } adapter{mixer};
        Tensor<double> x = detail::random_tensor(1, 3, 5, 5, rng);
        results.push_back({"pooling_mixer", finite_diff_check(adapter, x), 1e-4});
    }
    {
        ModelConfig cfg;
        cfg.stages = {{7, 4, 8, 3, 4, 1}};
        Model<double> model = build_model<double>(cfg, seed);
        Rng wrng(mix_seed(seed, 4));
        detail::nudge_offset_predictors(model, wrng);
        Tensor<double> x = detail::random_tensor(1, 3, 16, 16, wrng, 0.5);
        results.push_back({"tiny_model", finite_diff_check(model, x), 1e-4});
    }
    return results;
}

}  // namespace dff
