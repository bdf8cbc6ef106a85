#pragma once

#include <cmath>
#include <vector>

#include "dfformer/layers.hpp"
#include "dfformer/tensor.hpp"

namespace dff {

/// Per-position, per-kernel-point displacement field, shape (B, 2N, H, W)
/// for N = kH*kW kernel sampling points. Channel 2n holds the row
/// displacement of point n, channel 2n+1 the column displacement; kernel
/// points are numbered row-major over the kernel grid.
template <class T>
using OffsetField = Tensor<T>;

inline constexpr std::int64_t offset_channel_dy(std::int64_t point) { return 2 * point; }
inline constexpr std::int64_t offset_channel_dx(std::int64_t point) { return 2 * point + 1; }

/// Bilinear read of channel (b, c) at fractional position (py, px).
/// Positions outside (-1, H) x (-1, W) read as zero, matching the zero
/// padding of the standard convolution; the result is continuous and
/// piecewise-bilinear in (py, px). The nested-lerp form keeps reads at
/// integer positions exact.
template <class T>
T bilinear_sample(const Tensor<T>& x, std::int64_t b, std::int64_t c, T py, T px) {
    const std::int64_t H = x.h(), W = x.w();
    if (!(py > T(-1) && py < static_cast<T>(H) && px > T(-1) && px < static_cast<T>(W))) {
        return T(0);
    }
    const std::int64_t y0 = static_cast<std::int64_t>(std::floor(py));
    const std::int64_t x0 = static_cast<std::int64_t>(std::floor(px));
    const T fy = py - static_cast<T>(y0);
    const T fx = px - static_cast<T>(x0);
    const T* base = x.data.data() + ((b * x.c() + c) * H) * W;
    const bool y0ok = y0 >= 0, y1ok = y0 + 1 < H;
    const bool x0ok = x0 >= 0, x1ok = x0 + 1 < W;
    const T v00 = (y0ok && x0ok) ? base[y0 * W + x0] : T(0);
    const T v01 = (y0ok && x1ok) ? base[y0 * W + x0 + 1] : T(0);
    const T v10 = (y1ok && x0ok) ? base[(y0 + 1) * W + x0] : T(0);
    const T v11 = (y1ok && x1ok) ? base[(y0 + 1) * W + x0 + 1] : T(0);
    const T top = v00 + fx * (v01 - v00);
    const T bot = v10 + fx * (v11 - v10);
    return top + fy * (bot - top);
}

namespace detail {

template <class T>
void check_deformable_args(const Tensor<T>& x, const Tensor<T>& offsets, const Tensor<T>& weight,
                           bool depthwise) {
    const std::int64_t KH = weight.h(), KW = weight.w();
    if (KH % 2 == 0 || KW % 2 == 0) {
        throw std::invalid_argument("deformable conv: kernel must be odd for same padding");
    }
    const std::int64_t N = KH * KW;
    if (offsets.b() != x.b() || offsets.c() != 2 * N || offsets.h() != x.h() ||
        offsets.w() != x.w()) {
        throw std::invalid_argument("deformable conv: offset field must be (B, 2*kH*kW, H, W), got " +
                                    shape_str(offsets));
    }
    if (depthwise) {
        if (weight.c() != 1 || weight.b() != x.c()) {
            throw std::invalid_argument("deformable conv: depthwise weight must be (C, 1, kH, kW)");
        }
    } else if (weight.c() != x.c()) {
        throw std::invalid_argument("deformable conv: input has " + std::to_string(x.c()) +
                                    " channels, weight expects " + std::to_string(weight.c()));
    }
}

}  // namespace detail

/// Deformable convolution, stride 1, same padding: for each output position
/// p0 and kernel point n, the input is read at p0 + p_n + offset_n by
/// bilinear interpolation, then reduced with the kernel weights. With all
/// offsets zero this computes exactly the standard convolution.
template <class T>
Tensor<T> deformable_conv_forward(const Tensor<T>& x, const OffsetField<T>& offsets,
                                  const Tensor<T>& weight, const std::vector<T>& bias,
                                  bool depthwise = false) {
    detail::check_deformable_args(x, offsets, weight, depthwise);
    const std::int64_t B = x.b(), C_in = x.c(), H = x.h(), W = x.w();
    const std::int64_t C_out = weight.b(), KH = weight.h(), KW = weight.w();
    const std::int64_t N = KH * KW;
    const std::int64_t pad_h = KH / 2, pad_w = KW / 2;
    if (static_cast<std::int64_t>(bias.size()) != C_out) {
        throw std::invalid_argument("deformable conv: bias length must equal output channels");
    }

    Tensor<T> out(B, C_out, H, W);
    // Sampled values for one output row, laid out as (ci*N + n, wo). The
    // reduction walks rows in (ci, n) order, the same term order as the
    // standard convolution.
    std::vector<T> col(static_cast<std::size_t>(C_in * N * W));

    for (std::int64_t n = 0; n < B; ++n) {
        for (std::int64_t ho = 0; ho < H; ++ho) {
            for (std::int64_t kp = 0; kp < N; ++kp) {
                const std::int64_t kh = kp / KW, kw = kp % KW;
                const T* dyr = offsets.row(n, offset_channel_dy(kp), ho);
                const T* dxr = offsets.row(n, offset_channel_dx(kp), ho);
                const T base_py = static_cast<T>(ho - pad_h + kh);
                const T base_px = static_cast<T>(kw - pad_w);
                for (std::int64_t wo = 0; wo < W; ++wo) {
                    const T py = base_py + dyr[wo];
                    const T px = static_cast<T>(wo) + base_px + dxr[wo];
                    if (!(py > T(-1) && py < static_cast<T>(H) && px > T(-1) &&
                          px < static_cast<T>(W))) {
                        for (std::int64_t ci = 0; ci < C_in; ++ci) {
                            col[static_cast<std::size_t>((ci * N + kp) * W + wo)] = T(0);
                        }
                        continue;
                    }
                    const std::int64_t y0 = static_cast<std::int64_t>(std::floor(py));
                    const std::int64_t x0 = static_cast<std::int64_t>(std::floor(px));
                    const T fy = py - static_cast<T>(y0);
                    const T fx = px - static_cast<T>(x0);
                    const bool y0ok = y0 >= 0, y1ok = y0 + 1 < H;
                    const bool x0ok = x0 >= 0, x1ok = x0 + 1 < W;
                    const T* xc = x.data.data() + (n * C_in * H + y0) * W + x0;
                    for (std::int64_t ci = 0; ci < C_in; ++ci, xc += H * W) {
                        const T v00 = (y0ok && x0ok) ? xc[0] : T(0);
                        const T v01 = (y0ok && x1ok) ? xc[1] : T(0);
                        const T v10 = (y1ok && x0ok) ? xc[W] : T(0);
                        const T v11 = (y1ok && x1ok) ? xc[W + 1] : T(0);
                        const T top = v00 + fx * (v01 - v00);
                        const T bot = v10 + fx * (v11 - v10);
                        col[static_cast<std::size_t>((ci * N + kp) * W + wo)] =
                            top + fy * (bot - top);
                    }
                }
            }

            if (!depthwise) {
                for (std::int64_t co = 0; co < C_out; ++co) {
                    T* orow = out.row(n, co, ho);
                    std::fill(orow, orow + W, bias[static_cast<std::size_t>(co)]);
                    const T* wrow = weight.data.data() + co * C_in * N;
                    for (std::int64_t r = 0; r < C_in * N; ++r) {
                        const T wv = wrow[r];
                        const T* crow = col.data() + r * W;
                        for (std::int64_t wo = 0; wo < W; ++wo) {
                            orow[wo] += wv * crow[wo];
                        }
                    }
                }
            } else {
                for (std::int64_t c = 0; c < C_out; ++c) {
                    T* orow = out.row(n, c, ho);
                    std::fill(orow, orow + W, bias[static_cast<std::size_t>(c)]);
                    const T* wrow = weight.data.data() + c * N;
                    for (std::int64_t kp = 0; kp < N; ++kp) {
                        const T wv = wrow[kp];
                        const T* crow = col.data() + (c * N + kp) * W;
                        for (std::int64_t wo = 0; wo < W; ++wo) {
                            orow[wo] += wv * crow[wo];
                        }
                    }
                }
            }
        }
    }
    return out;
}

template <class T>
struct DeformableGrads {
    Tensor<T> grad_x;
    OffsetField<T> grad_offsets;
};

/// Gradients of the deformable convolution. grad_x scatters through the four
/// bilinear taps of every sample; grad_offsets uses the piecewise derivative
/// of the interpolation with respect to the sampling position. Weight and
/// bias gradients accumulate into the supplied buffers.
template <class T>
DeformableGrads<T> deformable_conv_backward(const Tensor<T>& grad_out, const Tensor<T>& x,
                                            const OffsetField<T>& offsets, const Tensor<T>& weight,
                                            Tensor<T>& grad_weight, std::vector<T>& grad_bias,
                                            bool depthwise = false) {
    detail::check_deformable_args(x, offsets, weight, depthwise);
    const std::int64_t B = x.b(), C_in = x.c(), H = x.h(), W = x.w();
    const std::int64_t C_out = weight.b(), KH = weight.h(), KW = weight.w();
    const std::int64_t N = KH * KW;
    const std::int64_t pad_h = KH / 2, pad_w = KW / 2;
    if (grad_out.shape != std::array<std::int64_t, 4>{B, C_out, H, W}) {
        throw std::invalid_argument("deformable conv backward: grad_out shape mismatch");
    }
    if (!grad_weight.same_shape(weight) ||
        static_cast<std::int64_t>(grad_bias.size()) != C_out) {
        throw std::invalid_argument("deformable conv backward: gradient accumulator mismatch");
    }

    Tensor<T> grad_x(B, C_in, H, W);
    OffsetField<T> grad_offsets(B, 2 * N, H, W);

    const std::int64_t R = C_in * N;
    std::vector<T> col(static_cast<std::size_t>(R * W));    // sampled values
    std::vector<T> dcoly(static_cast<std::size_t>(R * W));  // d sample / d py
    std::vector<T> dcolx(static_cast<std::size_t>(R * W));  // d sample / d px
    std::vector<T> gcol(static_cast<std::size_t>(R * W));   // d loss / d sample
    // Per (kernel point, wo): tap anchor and fractions, shared across channels.
    std::vector<std::int64_t> ty0(static_cast<std::size_t>(N * W));
    std::vector<std::int64_t> tx0(static_cast<std::size_t>(N * W));
    std::vector<T> tfy(static_cast<std::size_t>(N * W));
    std::vector<T> tfx(static_cast<std::size_t>(N * W));
    std::vector<char> tin(static_cast<std::size_t>(N * W));

    for (std::int64_t n = 0; n < B; ++n) {
        for (std::int64_t ho = 0; ho < H; ++ho) {
            // Pass 1: sampled values and their position derivatives.
            for (std::int64_t kp = 0; kp < N; ++kp) {
                const std::int64_t kh = kp / KW, kw = kp % KW;
                const T* dyr = offsets.row(n, offset_channel_dy(kp), ho);
                const T* dxr = offsets.row(n, offset_channel_dx(kp), ho);
                const T base_py = static_cast<T>(ho - pad_h + kh);
                const T base_px = static_cast<T>(kw - pad_w);
                for (std::int64_t wo = 0; wo < W; ++wo) {
                    const T py = base_py + dyr[wo];
                    const T px = static_cast<T>(wo) + base_px + dxr[wo];
                    const std::size_t ti = static_cast<std::size_t>(kp * W + wo);
                    if (!(py > T(-1) && py < static_cast<T>(H) && px > T(-1) &&
                          px < static_cast<T>(W))) {
                        tin[ti] = 0;
                        for (std::int64_t ci = 0; ci < C_in; ++ci) {
                            const std::size_t idx = static_cast<std::size_t>((ci * N + kp) * W + wo);
                            col[idx] = dcoly[idx] = dcolx[idx] = T(0);
                        }
                        continue;
                    }
                    const std::int64_t y0 = static_cast<std::int64_t>(std::floor(py));
                    const std::int64_t x0 = static_cast<std::int64_t>(std::floor(px));
                    const T fy = py - static_cast<T>(y0);
                    const T fx = px - static_cast<T>(x0);
                    tin[ti] = 1;
                    ty0[ti] = y0;
                    tx0[ti] = x0;
                    tfy[ti] = fy;
                    tfx[ti] = fx;
                    const bool y0ok = y0 >= 0, y1ok = y0 + 1 < H;
                    const bool x0ok = x0 >= 0, x1ok = x0 + 1 < W;
                    const T* xc = x.data.data() + (n * C_in * H + y0) * W + x0;
                    for (std::int64_t ci = 0; ci < C_in; ++ci, xc += H * W) {
                        const T v00 = (y0ok && x0ok) ? xc[0] : T(0);
                        const T v01 = (y0ok && x1ok) ? xc[1] : T(0);
                        const T v10 = (y1ok && x0ok) ? xc[W] : T(0);
                        const T v11 = (y1ok && x1ok) ? xc[W + 1] : T(0);
                        const T top = v00 + fx * (v01 - v00);
                        const T bot = v10 + fx * (v11 - v10);
                        const std::size_t idx = static_cast<std::size_t>((ci * N + kp) * W + wo);
                        col[idx] = top + fy * (bot - top);
                        dcoly[idx] = bot - top;
                        dcolx[idx] = (v01 - v00) + fy * ((v11 - v10) - (v01 - v00));
                    }
                }
            }

            // Pass 2: gcol = W^T grad_out, plus weight/bias gradients.
            std::fill(gcol.begin(), gcol.end(), T(0));
            if (!depthwise) {
                for (std::int64_t co = 0; co < C_out; ++co) {
                    const T* grow = grad_out.row(n, co, ho);
                    T gb = T(0);
                    for (std::int64_t wo = 0; wo < W; ++wo) {
                        gb += grow[wo];
                    }
                    grad_bias[static_cast<std::size_t>(co)] += gb;
                    const T* wrow = weight.data.data() + co * R;
                    T* gwrow = grad_weight.data.data() + co * R;
                    for (std::int64_t r = 0; r < R; ++r) {
                        const T wv = wrow[r];
                        const T* crow = col.data() + r * W;
                        T* grow_c = gcol.data() + r * W;
                        T dw = T(0);
                        for (std::int64_t wo = 0; wo < W; ++wo) {
                            dw += grow[wo] * crow[wo];
                            grow_c[wo] += wv * grow[wo];
                        }
                        gwrow[r] += dw;
                    }
                }
            } else {
                for (std::int64_t c = 0; c < C_out; ++c) {
                    const T* grow = grad_out.row(n, c, ho);
                    T gb = T(0);
                    for (std::int64_t wo = 0; wo < W; ++wo) {
                        gb += grow[wo];
                    }
                    grad_bias[static_cast<std::size_t>(c)] += gb;
                    for (std::int64_t kp = 0; kp < N; ++kp) {
                        const T wv = weight.data[static_cast<std::size_t>(c * N + kp)];
                        const T* crow = col.data() + (c * N + kp) * W;
                        T* grow_c = gcol.data() + (c * N + kp) * W;
                        T dw = T(0);
                        for (std::int64_t wo = 0; wo < W; ++wo) {
                            dw += grow[wo] * crow[wo];
                            grow_c[wo] += wv * grow[wo];
                        }
                        grad_weight.data[static_cast<std::size_t>(c * N + kp)] += dw;
                    }
                }
            }

            // Pass 3: offset gradients and input scatter.
            for (std::int64_t kp = 0; kp < N; ++kp) {
                T* goy = grad_offsets.row(n, offset_channel_dy(kp), ho);
                T* gox = grad_offsets.row(n, offset_channel_dx(kp), ho);
                for (std::int64_t wo = 0; wo < W; ++wo) {
                    const std::size_t ti = static_cast<std::size_t>(kp * W + wo);
                    if (!tin[ti]) {
                        continue;  // flat zero region: no gradient
                    }
                    const std::int64_t y0 = ty0[ti], x0 = tx0[ti];
                    const T fy = tfy[ti], fx = tfx[ti];
                    const bool y0ok = y0 >= 0, y1ok = y0 + 1 < H;
                    const bool x0ok = x0 >= 0, x1ok = x0 + 1 < W;
                    const T w00 = (T(1) - fy) * (T(1) - fx);
                    const T w01 = (T(1) - fy) * fx;
                    const T w10 = fy * (T(1) - fx);
                    const T w11 = fy * fx;
                    T acc_y = T(0), acc_x = T(0);
                    T* gxc = grad_x.data.data() + (n * C_in * H + y0) * W + x0;
                    for (std::int64_t ci = 0; ci < C_in; ++ci, gxc += H * W) {
                        const std::size_t idx = static_cast<std::size_t>((ci * N + kp) * W + wo);
                        const T s = gcol[idx];
                        acc_y += s * dcoly[idx];
                        acc_x += s * dcolx[idx];
                        if (y0ok && x0ok) gxc[0] += s * w00;
                        if (y0ok && x1ok) gxc[1] += s * w01;
                        if (y1ok && x0ok) gxc[W] += s * w10;
                        if (y1ok && x1ok) gxc[W + 1] += s * w11;
                    }
                    goy[wo] += acc_y;
                    gox[wo] += acc_x;
                }
            }
        }
    }
    return {std::move(grad_x), std::move(grad_offsets)};
}

/// Offset-predicting convolution plus deformable convolution, the token
/// mixing unit. The offset predictor is a standard stride-1 same-padding
/// conv with 2N output channels; both convolutions read the same input.
/// Construction leaves every parameter zero, so a fresh layer predicts an
/// all-zero offset field.
template <class T>
class DeformableConv {
public:
    DeformableConv(std::int64_t c_in, std::int64_t c_out, std::int64_t kernel,
                   bool depthwise = false)
        : kernel_(kernel), depthwise_(depthwise),
          offset_conv_(c_in, 2 * kernel * kernel, kernel, /*stride=*/1, /*padding=*/kernel / 2) {
        if (kernel < 1 || kernel % 2 == 0) {
            throw std::invalid_argument("DeformableConv: kernel must be odd");
        }
        if (depthwise && c_in != c_out) {
            throw std::invalid_argument("DeformableConv: depthwise requires c_out == c_in");
        }
        main.resize({c_out, depthwise ? 1 : c_in, kernel, kernel}, c_out);
    }

    /// Offset field for input x (stateless query; forward() recomputes it).
    OffsetField<T> predict_offsets(const Tensor<T>& x) const {
        return conv2d_forward(x, offset_conv_.params.weight, offset_conv_.params.bias, 1,
                              kernel_ / 2);
    }

    Tensor<T> forward(const Tensor<T>& x) {
        OffsetField<T> offsets = offset_conv_.forward(x);
        Tensor<T> y = deformable_conv_forward(x, offsets, main.weight, main.bias, depthwise_);
        if (training_) {
            saved_x_ = x;
            saved_offsets_ = std::move(offsets);
            has_saved_ = true;
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& grad_out) {
        if (!has_saved_) {
            throw std::runtime_error("DeformableConv: backward called without a preceding forward");
        }
        has_saved_ = false;
        DeformableGrads<T> g =
            deformable_conv_backward(grad_out, saved_x_, saved_offsets_, main.weight,
                                     main.grad_weight, main.grad_bias, depthwise_);
        Tensor<T> grad_x_pred = offset_conv_.backward(g.grad_offsets);
        add_inplace(g.grad_x, grad_x_pred);
        return std::move(g.grad_x);
    }

    void zero_grad() {
        main.zero_grad();
        offset_conv_.zero_grad();
    }
    void set_training(bool on) {
        training_ = on;
        offset_conv_.set_training(on);
    }
    void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) {
        main.collect(prefix + ".main", out);
        offset_conv_.collect_params(prefix + ".offset", out);
    }
    std::vector<ParamRef<T>> parameters() {
        std::vector<ParamRef<T>> out;
        collect_params("deform", out);
        return out;
    }

    std::int64_t kernel() const { return kernel_; }
    bool depthwise() const { return depthwise_; }

    LayerParams<T> main;
    Conv2d<T>& offset_predictor() { return offset_conv_; }

private:
    std::int64_t kernel_;
    bool depthwise_;
    Conv2d<T> offset_conv_;
    Tensor<T> saved_x_;
    OffsetField<T> saved_offsets_;
    bool has_saved_ = false;
    bool training_ = true;
};

}  // namespace dff
