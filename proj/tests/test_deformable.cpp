#include <doctest.h>

#include "dfformer/deformable.hpp"
#include "dfformer/gradcheck.hpp"
#include "dfformer/gradcheck_suite.hpp"
#include "dfformer/rng.hpp"

using namespace dff;

namespace {

template <class T>
Tensor<T> random_tensor(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w, Rng& rng) {
    Tensor<T> t(b, c, h, w);
    for (auto& v : t.data) {
        v = static_cast<T>(rng.normal());
    }
    return t;
}

/// Reference interpolation in the textbook four-tap weight form,
/// independent of the production lerp form.
double bilinear_ref(const Tensor<double>& x, std::int64_t n, std::int64_t c, double py,
                    double px) {
    const std::int64_t H = x.h(), W = x.w();
    const auto pixel = [&](std::int64_t y, std::int64_t xx) -> double {
        if (y < 0 || y >= H || xx < 0 || xx >= W) {
            return 0.0;
        }
        return x.at(n, c, y, xx);
    };
    if (py <= -1.0 || py >= static_cast<double>(H) || px <= -1.0 ||
        px >= static_cast<double>(W)) {
        return 0.0;
    }
    const std::int64_t y0 = static_cast<std::int64_t>(std::floor(py));
    const std::int64_t x0 = static_cast<std::int64_t>(std::floor(px));
    const double fy = py - static_cast<double>(y0);
    const double fx = px - static_cast<double>(x0);
    return (1.0 - fy) * (1.0 - fx) * pixel(y0, x0) + (1.0 - fy) * fx * pixel(y0, x0 + 1) +
           fy * (1.0 - fx) * pixel(y0 + 1, x0) + fy * fx * pixel(y0 + 1, x0 + 1);
}

/// Scalar reference for the whole deformable convolution: loops over every
/// output position and kernel point and calls the interpolation directly.
Tensor<double> deformable_oracle(const Tensor<double>& x, const Tensor<double>& offsets,
                                 const Tensor<double>& w, const std::vector<double>& bias) {
    const std::int64_t B = x.b(), C_in = x.c(), H = x.h(), W = x.w();
    const std::int64_t C_out = w.b(), KH = w.h(), KW = w.w();
    const std::int64_t pad_h = KH / 2, pad_w = KW / 2;
    Tensor<double> out(B, C_out, H, W);
    for (std::int64_t n = 0; n < B; ++n)
        for (std::int64_t co = 0; co < C_out; ++co)
            for (std::int64_t ho = 0; ho < H; ++ho)
                for (std::int64_t wo = 0; wo < W; ++wo) {
                    double acc = bias[static_cast<std::size_t>(co)];
                    for (std::int64_t ci = 0; ci < C_in; ++ci)
                        for (std::int64_t kh = 0; kh < KH; ++kh)
                            for (std::int64_t kw = 0; kw < KW; ++kw) {
                                const std::int64_t kp = kh * KW + kw;
                                const double py = static_cast<double>(ho - pad_h + kh) +
                                                  offsets.at(n, 2 * kp, ho, wo);
                                const double px = static_cast<double>(wo - pad_w + kw) +
                                                  offsets.at(n, 2 * kp + 1, ho, wo);
                                acc += w.at(co, ci, kh, kw) * bilinear_ref(x, n, ci, py, px);
                            }
                    out.at(n, co, ho, wo) = acc;
                }
    return out;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    REQUIRE(a.shape == b.shape);
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    }
    return m;
}

}  // namespace

TEST_SUITE("deformable") {

TEST_CASE("bilinear sampling at grid nodes reads the exact pixel") {
    Rng rng(1);
    Tensor<double> x = random_tensor<double>(1, 2, 4, 5, rng);
    for (std::int64_t y = 0; y < 4; ++y) {
        for (std::int64_t xx = 0; xx < 5; ++xx) {
            CHECK(bilinear_sample(x, 0, 1, static_cast<double>(y), static_cast<double>(xx)) ==
                  x.at(0, 1, y, xx));
        }
    }
}

TEST_CASE("bilinear sampling at the cell center averages the four neighbors") {
    Tensor<double> x(1, 1, 2, 2);
    x.data = {0.0, 1.0, 2.0, 3.0};
    CHECK(bilinear_sample(x, 0, 0, 0.5, 0.5) == 1.5);
}

TEST_CASE("bilinear sampling outside the padded support is zero") {
    Tensor<double> x = Tensor<double>::full(1, 1, 3, 3, 7.0);
    CHECK(bilinear_sample(x, 0, 0, -2.0, 0.0) == 0.0);
    CHECK(bilinear_sample(x, 0, 0, -1.0, 1.0) == 0.0);
    CHECK(bilinear_sample(x, 0, 0, 3.0, 1.0) == 0.0);
    CHECK(bilinear_sample(x, 0, 0, 1.0, -1.0) == 0.0);
    CHECK(bilinear_sample(x, 0, 0, 1.0, 3.0) == 0.0);
    // halfway into the border: half weight on the edge pixel
    CHECK(bilinear_sample(x, 0, 0, -0.5, 1.0) == doctest::Approx(3.5));
    // continuity against the reference form everywhere
    Rng rng(2);
    Tensor<double> r = random_tensor<double>(1, 1, 4, 4, rng);
    for (int t = 0; t < 200; ++t) {
        const double py = rng.uniform(-2.5, 5.5);
        const double px = rng.uniform(-2.5, 5.5);
        CHECK(bilinear_sample(r, 0, 0, py, px) ==
              doctest::Approx(bilinear_ref(r, 0, 0, py, px)).epsilon(1e-14));
    }
}

TEST_CASE("offset channel layout round-trips") {
    const std::int64_t N = 9;
    OffsetField<double> of(1, 2 * N, 2, 2);
    for (std::int64_t kp = 0; kp < N; ++kp) {
        of.at(0, offset_channel_dy(kp), 1, 1) = 10.0 + static_cast<double>(kp);
        of.at(0, offset_channel_dx(kp), 1, 1) = 20.0 + static_cast<double>(kp);
    }
    for (std::int64_t kp = 0; kp < N; ++kp) {
        CHECK(of.at(0, 2 * kp, 1, 1) == 10.0 + static_cast<double>(kp));
        CHECK(of.at(0, 2 * kp + 1, 1, 1) == 20.0 + static_cast<double>(kp));
    }
}

TEST_CASE("fresh layer predicts an all-zero offset field of the right shape") {
    DeformableConv<float> layer(64, 64, 3);
    Tensor<float> x(1, 64, 40, 40);
    Rng rng(3);
    for (auto& v : x.data) {
        v = static_cast<float>(rng.normal());
    }
    OffsetField<float> of = layer.predict_offsets(x);
    CHECK(of.shape == std::array<std::int64_t, 4>{1, 18, 40, 40});
    for (float v : of.data) {
        CHECK(v == 0.0f);
    }
}

TEST_CASE("offset field channel count follows the 2N rule at full scale") {
    DeformableConv<float> layer(64, 64, 3);
    Tensor<float> x(1, 64, 400, 400);
    OffsetField<float> of = layer.predict_offsets(x);
    CHECK(of.shape == std::array<std::int64_t, 4>{1, 18, 400, 400});
}

TEST_CASE("bias-only predictor writes a constant offset plane") {
    DeformableConv<double> layer(2, 2, 3);
    layer.offset_predictor().params.bias[static_cast<std::size_t>(offset_channel_dx(0))] = 0.5;
    Rng rng(4);
    Tensor<double> x = random_tensor<double>(1, 2, 6, 6, rng);
    OffsetField<double> of = layer.predict_offsets(x);
    for (std::int64_t h = 0; h < 6; ++h) {
        for (std::int64_t w = 0; w < 6; ++w) {
            CHECK(of.at(0, offset_channel_dx(0), h, w) == 0.5);
            CHECK(of.at(0, offset_channel_dy(0), h, w) == 0.0);
        }
    }
}

TEST_CASE("zero offsets reduce to the standard convolution") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const std::int64_t cin = 1 + static_cast<std::int64_t>(rng.below(4));
        const std::int64_t cout = 1 + static_cast<std::int64_t>(rng.below(4));
        const std::int64_t k = rng.below(2) ? 3 : 5;
        const std::int64_t h = k + static_cast<std::int64_t>(rng.below(8));
        const std::int64_t w = k + static_cast<std::int64_t>(rng.below(8));
        Tensor<double> x = random_tensor<double>(2, cin, h, w, rng);
        Tensor<double> wt = random_tensor<double>(cout, cin, k, k, rng);
        std::vector<double> bias(static_cast<std::size_t>(cout));
        for (auto& b : bias) {
            b = rng.normal();
        }
        OffsetField<double> zeros(2, 2 * k * k, h, w);
        Tensor<double> a = deformable_conv_forward(x, zeros, wt, bias);
        Tensor<double> b = conv2d_forward(x, wt, bias, 1, k / 2);
        CHECK(max_abs_diff(a, b) < 1e-12);
    }
}

TEST_CASE("zero-offset equivalence holds at 32-bit within 1e-6") {
    Rng rng(55);
    for (int trial = 0; trial < 10; ++trial) {
        const std::int64_t c = 1 + static_cast<std::int64_t>(rng.below(6));
        Tensor<float> x(1, c, 10, 10);
        for (auto& v : x.data) {
            v = static_cast<float>(rng.normal());
        }
        Tensor<float> wt(c, c, 3, 3);
        for (auto& v : wt.data) {
            v = static_cast<float>(rng.normal());
        }
        std::vector<float> bias(static_cast<std::size_t>(c), 0.1f);
        OffsetField<float> zeros(1, 18, 10, 10);
        Tensor<float> a = deformable_conv_forward(x, zeros, wt, bias);
        Tensor<float> b = conv2d_forward(x, wt, bias, 1, 1);
        for (std::size_t i = 0; i < a.data.size(); ++i) {
            CHECK(std::abs(a.data[i] - b.data[i]) < 1e-6f);
        }
    }
}

TEST_CASE("a freshly built deformable layer computes exactly the standard conv") {
    Rng rng(6);
    DeformableConv<double> layer(3, 3, 3);
    for (auto& v : layer.main.weight.data) {
        v = rng.normal();
    }
    for (auto& v : layer.main.bias) {
        v = rng.normal();
    }
    Tensor<double> x = random_tensor<double>(1, 3, 7, 7, rng);
    Tensor<double> y = layer.forward(x);
    Tensor<double> ref = conv2d_forward(x, layer.main.weight, layer.main.bias, 1, 1);
    CHECK(max_abs_diff(y, ref) == 0.0);
}

TEST_CASE("constant offset (0, 1) equals convolving the column-shifted input") {
    Rng rng(7);
    const std::int64_t H = 8, W = 8, k = 3;
    Tensor<double> x = random_tensor<double>(1, 2, H, W, rng);
    Tensor<double> wt = random_tensor<double>(2, 2, k, k, rng);
    std::vector<double> bias = {0.3, -0.2};

    OffsetField<double> of(1, 2 * k * k, H, W);
    for (std::int64_t kp = 0; kp < k * k; ++kp) {
        for (std::int64_t h = 0; h < H; ++h) {
            for (std::int64_t w = 0; w < W; ++w) {
                of.at(0, offset_channel_dx(kp), h, w) = 1.0;
            }
        }
    }
    Tensor<double> y = deformable_conv_forward(x, of, wt, bias);

    Tensor<double> shifted(1, 2, H, W);
    for (std::int64_t c = 0; c < 2; ++c) {
        for (std::int64_t h = 0; h < H; ++h) {
            for (std::int64_t w = 0; w + 1 < W; ++w) {
                shifted.at(0, c, h, w) = x.at(0, c, h, w + 1);
            }
        }
    }
    Tensor<double> ref = conv2d_forward(shifted, wt, bias, 1, k / 2);
    for (std::int64_t co = 0; co < 2; ++co) {
        for (std::int64_t h = 1; h + 1 < H; ++h) {
            for (std::int64_t w = 1; w + 2 < W; ++w) {  // interior, away from the shifted edge
                CHECK(y.at(0, co, h, w) == doctest::Approx(ref.at(0, co, h, w)).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("random fractional offsets match the scalar loop oracle") {
    Rng rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor<double> x = random_tensor<double>(1, 1, 5, 5, rng);
        Tensor<double> wt = random_tensor<double>(1, 1, 3, 3, rng);
        std::vector<double> bias = {rng.normal()};
        OffsetField<double> of(1, 18, 5, 5);
        for (auto& v : of.data) {
            v = rng.uniform(-2.0, 2.0);
        }
        Tensor<double> y = deformable_conv_forward(x, of, wt, bias);
        Tensor<double> ref = deformable_oracle(x, of, wt, bias);
        CHECK(max_abs_diff(y, ref) < 1e-13);
    }
    // multi-channel instance against the same oracle
    Tensor<double> x = random_tensor<double>(2, 3, 6, 6, rng);
    Tensor<double> wt = random_tensor<double>(4, 3, 3, 3, rng);
    std::vector<double> bias(4, 0.1);
    OffsetField<double> of(2, 18, 6, 6);
    for (auto& v : of.data) {
        v = rng.uniform(-1.5, 1.5);
    }
    CHECK(max_abs_diff(deformable_conv_forward(x, of, wt, bias),
                       deformable_oracle(x, of, wt, bias)) < 1e-13);
}

TEST_CASE("integer offsets reproduce exact pixel gathers") {
    Rng rng(9);
    Tensor<double> x = random_tensor<double>(1, 2, 6, 6, rng);
    Tensor<double> wt = random_tensor<double>(2, 2, 3, 3, rng);
    std::vector<double> bias = {0.0, 0.0};
    OffsetField<double> of(1, 18, 6, 6);
    for (std::int64_t kp = 0; kp < 9; ++kp) {
        for (auto h = 0; h < 6; ++h) {
            for (auto w = 0; w < 6; ++w) {
                of.at(0, 2 * kp, h, w) = static_cast<double>((kp % 3) - 1);      // -1, 0, 1
                of.at(0, 2 * kp + 1, h, w) = static_cast<double>((kp % 5) - 2);  // -2 .. 2
            }
        }
    }
    Tensor<double> y = deformable_conv_forward(x, of, wt, bias);
    // gather oracle: integer reads with zero padding, no interpolation
    Tensor<double> ref(1, 2, 6, 6);
    for (std::int64_t co = 0; co < 2; ++co)
        for (std::int64_t ho = 0; ho < 6; ++ho)
            for (std::int64_t wo = 0; wo < 6; ++wo) {
                double acc = 0.0;
                for (std::int64_t ci = 0; ci < 2; ++ci)
                    for (std::int64_t kh = 0; kh < 3; ++kh)
                        for (std::int64_t kw = 0; kw < 3; ++kw) {
                            const std::int64_t kp = kh * 3 + kw;
                            const std::int64_t py =
                                ho - 1 + kh + static_cast<std::int64_t>(of.at(0, 2 * kp, ho, wo));
                            const std::int64_t px =
                                wo - 1 + kw +
                                static_cast<std::int64_t>(of.at(0, 2 * kp + 1, ho, wo));
                            if (py >= 0 && py < 6 && px >= 0 && px < 6) {
                                acc += wt.at(co, ci, kh, kw) * x.at(0, ci, py, px);
                            }
                        }
                ref.at(0, co, ho, wo) = acc;
            }
    CHECK(max_abs_diff(y, ref) < 1e-13);
}

TEST_CASE("output is continuous in the offsets") {
    Rng rng(10);
    Tensor<double> x = random_tensor<double>(1, 2, 5, 5, rng);
    Tensor<double> wt = random_tensor<double>(2, 2, 3, 3, rng);
    std::vector<double> bias = {0.0, 0.0};
    double sum_w = 0.0, max_x = 0.0;
    for (double v : wt.data) {
        sum_w += std::abs(v);
    }
    for (double v : x.data) {
        max_x = std::max(max_x, std::abs(v));
    }
    // slope of the interpolation along one axis is at most 2 max|x|
    const double lipschitz = 2.0 * sum_w * max_x;

    OffsetField<double> of(1, 18, 5, 5);
    for (auto& v : of.data) {
        v = rng.uniform(-1.0, 1.0);
    }
    Tensor<double> base = deformable_conv_forward(x, of, wt, bias);
    for (int trial = 0; trial < 50; ++trial) {
        const double delta = 1e-3;
        const std::size_t coord = static_cast<std::size_t>(rng.below(of.data.size()));
        OffsetField<double> bumped = of;
        bumped.data[coord] += delta;
        Tensor<double> moved = deformable_conv_forward(x, bumped, wt, bias);
        CHECK(max_abs_diff(base, moved) <= lipschitz * delta + 1e-12);
    }
}

TEST_CASE("backward at zero offsets agrees with the standard conv backward") {
    Rng rng(11);
    Tensor<double> x = random_tensor<double>(1, 2, 5, 5, rng);
    Tensor<double> wt = random_tensor<double>(3, 2, 3, 3, rng);
    std::vector<double> bias(3, 0.0);
    Tensor<double> g = random_tensor<double>(1, 3, 5, 5, rng);
    OffsetField<double> zeros(1, 18, 5, 5);

    Tensor<double> gw_a(3, 2, 3, 3), gw_b(3, 2, 3, 3);
    std::vector<double> gb_a(3, 0.0), gb_b(3, 0.0);
    DeformableGrads<double> da = deformable_conv_backward(g, x, zeros, wt, gw_a, gb_a);
    Tensor<double> gx_b = conv2d_backward(g, x, wt, 1, 1, gw_b, gb_b);

    CHECK(max_abs_diff(da.grad_x, gx_b) < 1e-12);
    CHECK(max_abs_diff(gw_a, gw_b) < 1e-12);
    for (std::size_t i = 0; i < gb_a.size(); ++i) {
        CHECK(gb_a[i] == doctest::Approx(gb_b[i]).epsilon(1e-14));
    }
}

TEST_CASE("zero grad_out yields zero gradients everywhere") {
    Rng rng(12);
    Tensor<double> x = random_tensor<double>(1, 2, 4, 4, rng);
    Tensor<double> wt = random_tensor<double>(2, 2, 3, 3, rng);
    std::vector<double> bias(2, 0.0);
    OffsetField<double> of(1, 18, 4, 4);
    for (auto& v : of.data) {
        v = rng.uniform(-0.5, 0.5);
    }
    Tensor<double> g(1, 2, 4, 4);
    Tensor<double> gw(2, 2, 3, 3);
    std::vector<double> gb(2, 0.0);
    DeformableGrads<double> d = deformable_conv_backward(g, x, of, wt, gw, gb);
    for (double v : d.grad_x.data) {
        CHECK(v == 0.0);
    }
    for (double v : d.grad_offsets.data) {
        CHECK(v == 0.0);
    }
    for (double v : gw.data) {
        CHECK(v == 0.0);
    }
}

TEST_CASE("gradients pass the finite-difference oracle off the grid lines") {
    DeformableCoreCheck core(2, 2, 3, 5, 5);
    Rng rng(13);
    for (auto& v : core.weight.data) {
        v = rng.normal(0.0, 0.5);
    }
    for (auto& v : core.bias) {
        v = rng.normal(0.0, 0.3);
    }
    detail::fill_offgrid_offsets(core.offsets, rng);
    Tensor<double> x = random_tensor<double>(1, 2, 5, 5, rng);
    CHECK(finite_diff_check(core, x) < 1e-4);
}

TEST_CASE("depthwise variant matches a per-channel scalar oracle") {
    Rng rng(14);
    const std::int64_t C = 3, H = 5, W = 5;
    Tensor<double> x = random_tensor<double>(1, C, H, W, rng);
    Tensor<double> wt = random_tensor<double>(C, 1, 3, 3, rng);
    std::vector<double> bias(static_cast<std::size_t>(C), 0.25);
    OffsetField<double> of(1, 18, H, W);
    for (auto& v : of.data) {
        v = rng.uniform(-1.0, 1.0);
    }
    Tensor<double> y = deformable_conv_forward(x, of, wt, bias, /*depthwise=*/true);
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t ho = 0; ho < H; ++ho)
            for (std::int64_t wo = 0; wo < W; ++wo) {
                double acc = bias[static_cast<std::size_t>(c)];
                for (std::int64_t kh = 0; kh < 3; ++kh)
                    for (std::int64_t kw = 0; kw < 3; ++kw) {
                        const std::int64_t kp = kh * 3 + kw;
                        const double py =
                            static_cast<double>(ho - 1 + kh) + of.at(0, 2 * kp, ho, wo);
                        const double px =
                            static_cast<double>(wo - 1 + kw) + of.at(0, 2 * kp + 1, ho, wo);
                        acc += wt.at(c, 0, kh, kw) * bilinear_ref(x, 0, c, py, px);
                    }
                CHECK(y.at(0, c, ho, wo) == doctest::Approx(acc).epsilon(1e-12));
            }
}

TEST_CASE("shape and state validation") {
    Tensor<double> x(1, 2, 4, 4);
    Tensor<double> wt(2, 2, 3, 3);
    std::vector<double> bias(2, 0.0);
    OffsetField<double> wrong(1, 16, 4, 4);  // needs 18 channels
    CHECK_THROWS_AS(deformable_conv_forward(x, wrong, wt, bias), std::invalid_argument);
    OffsetField<double> small(1, 18, 3, 4);  // spatial size must match
    CHECK_THROWS_AS(deformable_conv_forward(x, small, wt, bias), std::invalid_argument);
    Tensor<double> even(2, 2, 2, 2);
    OffsetField<double> of8(1, 8, 4, 4);
    CHECK_THROWS_AS(deformable_conv_forward(x, of8, even, bias), std::invalid_argument);
    CHECK_THROWS_AS(DeformableConv<double>(2, 3, 3, /*depthwise=*/true), std::invalid_argument);

    DeformableConv<double> layer(2, 2, 3);
    Tensor<double> g(1, 2, 4, 4);
    CHECK_THROWS_AS(layer.backward(g), std::runtime_error);
}

}  // TEST_SUITE
