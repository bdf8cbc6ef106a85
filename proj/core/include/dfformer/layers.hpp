#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dfformer/rng.hpp"
#include "dfformer/tensor.hpp"

namespace dff {

/// Flat view of one parameter buffer and its gradient accumulator.
/// The name is the stable checkpoint key.
template <class T>
struct ParamRef {
    std::string name;
    T* data = nullptr;
    T* grad = nullptr;
    std::int64_t size = 0;
};

/// Weight + bias of a conv/linear layer with accumulated gradients.
/// Gradients always mirror the parameter shapes and are += accumulated
/// by backward until zero_grad.
template <class T>
struct LayerParams {
    Tensor<T> weight;
    std::vector<T> bias;
    Tensor<T> grad_weight;
    std::vector<T> grad_bias;

    void resize(const std::array<std::int64_t, 4>& weight_shape, std::int64_t bias_len) {
        weight = Tensor<T>(weight_shape[0], weight_shape[1], weight_shape[2], weight_shape[3]);
        grad_weight = Tensor<T>(weight_shape[0], weight_shape[1], weight_shape[2], weight_shape[3]);
        bias.assign(static_cast<std::size_t>(bias_len), T(0));
        grad_bias.assign(static_cast<std::size_t>(bias_len), T(0));
    }

    void zero_grad() {
        grad_weight.fill(T(0));
        std::fill(grad_bias.begin(), grad_bias.end(), T(0));
    }

    void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
        out.push_back({prefix + ".weight", weight.data.data(), grad_weight.data.data(),
                       weight.size()});
        out.push_back({prefix + ".bias", bias.data(), grad_bias.data(),
                       static_cast<std::int64_t>(bias.size())});
    }
};

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// Zero-padded 2-D convolution, direct form. weight is (C_out, C_in, kH, kW).
template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, const std::vector<T>& bias,
                         std::int64_t stride, std::int64_t padding) {
    const std::int64_t B = x.b(), C_in = x.c(), H = x.h(), W = x.w();
    const std::int64_t C_out = weight.b(), KH = weight.h(), KW = weight.w();
    if (weight.c() != C_in) {
        throw std::invalid_argument("conv2d: input has " + std::to_string(C_in) +
                                    " channels, weight expects " + std::to_string(weight.c()));
    }
    if (static_cast<std::int64_t>(bias.size()) != C_out) {
        throw std::invalid_argument("conv2d: bias length must equal output channels");
    }
    if (stride < 1 || padding < 0) {
        throw std::invalid_argument("conv2d: stride must be >=1 and padding >=0");
    }
    const std::int64_t Hp = H + 2 * padding, Wp = W + 2 * padding;
    if (KH > Hp || KW > Wp) {
        throw std::invalid_argument("conv2d: kernel larger than padded input");
    }
    const std::int64_t H_out = conv_out_extent(H, KH, stride, padding);
    const std::int64_t W_out = conv_out_extent(W, KW, stride, padding);

    Tensor<T> out(B, C_out, H_out, W_out);
    std::vector<T> padbuf;
    if (padding > 0) {
        padbuf.assign(static_cast<std::size_t>(C_in * Hp * Wp), T(0));
    }

    for (std::int64_t n = 0; n < B; ++n) {
        const T* xbase = x.data.data() + n * C_in * H * W;
        if (padding > 0) {
            std::fill(padbuf.begin(), padbuf.end(), T(0));
            for (std::int64_t ci = 0; ci < C_in; ++ci) {
                for (std::int64_t h = 0; h < H; ++h) {
                    std::copy(x.row(n, ci, h), x.row(n, ci, h) + W,
                              padbuf.data() + (ci * Hp + h + padding) * Wp + padding);
                }
            }
            xbase = padbuf.data();
        }
        for (std::int64_t co = 0; co < C_out; ++co) {
            const T bv = bias[static_cast<std::size_t>(co)];
            for (std::int64_t ho = 0; ho < H_out; ++ho) {
                T* orow = out.row(n, co, ho);
                std::fill(orow, orow + W_out, bv);
            }
            for (std::int64_t ci = 0; ci < C_in; ++ci) {
                for (std::int64_t kh = 0; kh < KH; ++kh) {
                    for (std::int64_t kw = 0; kw < KW; ++kw) {
                        const T wv = weight.at(co, ci, kh, kw);
                        for (std::int64_t ho = 0; ho < H_out; ++ho) {
                            const T* xr = xbase + (ci * Hp + ho * stride + kh) * Wp + kw;
                            T* orow = out.row(n, co, ho);
                            if (stride == 1) {
                                for (std::int64_t wo = 0; wo < W_out; ++wo) {
                                    orow[wo] += wv * xr[wo];
                                }
                            } else {
                                for (std::int64_t wo = 0; wo < W_out; ++wo) {
                                    orow[wo] += wv * xr[wo * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    return out;
}

/// Returns grad wrt x; accumulates grad_weight / grad_bias.
template <class T>
Tensor<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& x, const Tensor<T>& weight,
                          std::int64_t stride, std::int64_t padding, Tensor<T>& grad_weight,
                          std::vector<T>& grad_bias) {
    const std::int64_t B = x.b(), C_in = x.c(), H = x.h(), W = x.w();
    const std::int64_t C_out = weight.b(), KH = weight.h(), KW = weight.w();
    const std::int64_t H_out = conv_out_extent(H, KH, stride, padding);
    const std::int64_t W_out = conv_out_extent(W, KW, stride, padding);
    if (grad_out.shape != std::array<std::int64_t, 4>{B, C_out, H_out, W_out}) {
        throw std::invalid_argument("conv2d backward: grad_out shape mismatch, got " +
                                    shape_str(grad_out));
    }
    if (!grad_weight.same_shape(weight) ||
        static_cast<std::int64_t>(grad_bias.size()) != C_out) {
        throw std::invalid_argument("conv2d backward: gradient accumulator shape mismatch");
    }

    const std::int64_t Hp = H + 2 * padding, Wp = W + 2 * padding;
    Tensor<T> grad_x(B, C_in, H, W);
    std::vector<T> padbuf, gpadbuf;
    if (padding > 0) {
        padbuf.assign(static_cast<std::size_t>(C_in * Hp * Wp), T(0));
        gpadbuf.assign(static_cast<std::size_t>(C_in * Hp * Wp), T(0));
    }

    for (std::int64_t n = 0; n < B; ++n) {
        const T* xbase = x.data.data() + n * C_in * H * W;
        T* gxbase = grad_x.data.data() + n * C_in * H * W;
        if (padding > 0) {
            std::fill(padbuf.begin(), padbuf.end(), T(0));
            std::fill(gpadbuf.begin(), gpadbuf.end(), T(0));
            for (std::int64_t ci = 0; ci < C_in; ++ci) {
                for (std::int64_t h = 0; h < H; ++h) {
                    std::copy(x.row(n, ci, h), x.row(n, ci, h) + W,
                              padbuf.data() + (ci * Hp + h + padding) * Wp + padding);
                }
            }
            xbase = padbuf.data();
            gxbase = gpadbuf.data();
        }

        for (std::int64_t co = 0; co < C_out; ++co) {
            T gb_acc = T(0);
            for (std::int64_t ho = 0; ho < H_out; ++ho) {
                const T* grow = grad_out.row(n, co, ho);
                for (std::int64_t wo = 0; wo < W_out; ++wo) {
                    gb_acc += grow[wo];
                }
            }
            grad_bias[static_cast<std::size_t>(co)] += gb_acc;

            for (std::int64_t ci = 0; ci < C_in; ++ci) {
                for (std::int64_t kh = 0; kh < KH; ++kh) {
                    for (std::int64_t kw = 0; kw < KW; ++kw) {
                        const T wv = weight.at(co, ci, kh, kw);
                        T dw_acc = T(0);
                        for (std::int64_t ho = 0; ho < H_out; ++ho) {
                            const T* grow = grad_out.row(n, co, ho);
                            const std::int64_t base = (ci * Hp + ho * stride + kh) * Wp + kw;
                            const T* xr = xbase + base;
                            T* gxr = gxbase + base;
                            if (stride == 1) {
                                for (std::int64_t wo = 0; wo < W_out; ++wo) {
                                    dw_acc += grow[wo] * xr[wo];
                                    gxr[wo] += wv * grow[wo];
                                }
                            } else {
                                for (std::int64_t wo = 0; wo < W_out; ++wo) {
                                    dw_acc += grow[wo] * xr[wo * stride];
                                    gxr[wo * stride] += wv * grow[wo];
                                }
                            }
                        }
                        grad_weight.at(co, ci, kh, kw) += dw_acc;
                    }
                }
            }
        }

        if (padding > 0) {
            for (std::int64_t ci = 0; ci < C_in; ++ci) {
                for (std::int64_t h = 0; h < H; ++h) {
                    const T* src = gpadbuf.data() + (ci * Hp + h + padding) * Wp + padding;
                    T* dst = grad_x.row(n, ci, h);
                    for (std::int64_t w = 0; w < W; ++w) {
                        dst[w] = src[w];
                    }
                }
            }
        }
    }
    return grad_x;
}

/// Stateful conv layer: forward retains the input, backward consumes it.
template <class T>
class Conv2d {
public:
    Conv2d(std::int64_t c_in, std::int64_t c_out, std::int64_t kh, std::int64_t kw,
           std::int64_t stride, std::int64_t padding)
        : stride_(stride), padding_(padding) {
        params.resize({c_out, c_in, kh, kw}, c_out);
    }

    Conv2d(std::int64_t c_in, std::int64_t c_out, std::int64_t kernel, std::int64_t stride,
           std::int64_t padding)
        : Conv2d(c_in, c_out, kernel, kernel, stride, padding) {}

    Tensor<T> forward(const Tensor<T>& x) {
        Tensor<T> y = conv2d_forward(x, params.weight, params.bias, stride_, padding_);
        if (training_) {
            saved_x_ = x;
            has_saved_ = true;
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& grad_out) {
        if (!has_saved_) {
            throw std::runtime_error("Conv2d: backward called without a preceding forward");
        }
        has_saved_ = false;
        return conv2d_backward(grad_out, saved_x_, params.weight, stride_, padding_,
                               params.grad_weight, params.grad_bias);
    }

    void zero_grad() { params.zero_grad(); }
    void set_training(bool on) { training_ = on; }
    void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) {
        params.collect(prefix, out);
    }
    std::vector<ParamRef<T>> parameters() {
        std::vector<ParamRef<T>> out;
        collect_params("conv", out);
        return out;
    }

    std::int64_t stride() const { return stride_; }
    std::int64_t padding() const { return padding_; }

    LayerParams<T> params;

private:
    std::int64_t stride_, padding_;
    Tensor<T> saved_x_;
    bool has_saved_ = false;
    bool training_ = true;
};

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

/// Row-wise affine map y = xW + b. Input is (B, D, 1, 1), weight (1, 1, D, D_out).
template <class T>
class Linear {
public:
    Linear(std::int64_t d_in, std::int64_t d_out) : d_in_(d_in), d_out_(d_out) {
        params.resize({1, 1, d_in, d_out}, d_out);
    }

    Tensor<T> forward(const Tensor<T>& x) {
        if (x.c() != d_in_ || x.h() != 1 || x.w() != 1) {
            throw std::invalid_argument("Linear: expected input (B," + std::to_string(d_in_) +
                                        ",1,1), got " + shape_str(x));
        }
        const std::int64_t B = x.b();
        Tensor<T> y(B, d_out_, 1, 1);
        for (std::int64_t n = 0; n < B; ++n) {
            const T* xr = x.data.data() + n * d_in_;
            T* yr = y.data.data() + n * d_out_;
            for (std::int64_t o = 0; o < d_out_; ++o) {
                yr[o] = params.bias[static_cast<std::size_t>(o)];
            }
            for (std::int64_t d = 0; d < d_in_; ++d) {
                const T xv = xr[d];
                const T* wr = params.weight.data.data() + d * d_out_;
                for (std::int64_t o = 0; o < d_out_; ++o) {
                    yr[o] += xv * wr[o];
                }
            }
        }
        if (training_) {
            saved_x_ = x;
            has_saved_ = true;
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& grad_out) {
        if (!has_saved_) {
            throw std::runtime_error("Linear: backward called without a preceding forward");
        }
        if (grad_out.b() != saved_x_.b() || grad_out.c() != d_out_) {
            throw std::invalid_argument("Linear backward: grad shape mismatch");
        }
        has_saved_ = false;
        const std::int64_t B = saved_x_.b();
        Tensor<T> grad_x(B, d_in_, 1, 1);
        for (std::int64_t n = 0; n < B; ++n) {
            const T* xr = saved_x_.data.data() + n * d_in_;
            const T* gr = grad_out.data.data() + n * d_out_;
            T* gxr = grad_x.data.data() + n * d_in_;
            for (std::int64_t o = 0; o < d_out_; ++o) {
                params.grad_bias[static_cast<std::size_t>(o)] += gr[o];
            }
            for (std::int64_t d = 0; d < d_in_; ++d) {
                const T* wr = params.weight.data.data() + d * d_out_;
                T* gwr = params.grad_weight.data.data() + d * d_out_;
                T acc = T(0);
                for (std::int64_t o = 0; o < d_out_; ++o) {
                    acc += gr[o] * wr[o];
                    gwr[o] += xr[d] * gr[o];
                }
                gxr[d] = acc;
            }
        }
        return grad_x;
    }

    void zero_grad() { params.zero_grad(); }
    void set_training(bool on) { training_ = on; }
    void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) {
        params.collect(prefix, out);
    }
    std::vector<ParamRef<T>> parameters() {
        std::vector<ParamRef<T>> out;
        collect_params("linear", out);
        return out;
    }

    LayerParams<T> params;

private:
    std::int64_t d_in_, d_out_;
    Tensor<T> saved_x_;
    bool has_saved_ = false;
    bool training_ = true;
};

// ---------------------------------------------------------------------------
// channel norm
// ---------------------------------------------------------------------------

/// Per-position normalization across channels (layer norm over C at each
/// (b, h, w)), then per-channel scale and shift.
template <class T>
class ChannelNorm {
public:
    explicit ChannelNorm(std::int64_t channels, T eps = T(1e-5)) : c_(channels), eps_(eps) {
        if (!(eps > T(0))) {
            throw std::invalid_argument("ChannelNorm: eps must be > 0");
        }
        gamma.assign(static_cast<std::size_t>(channels), T(1));
        beta.assign(static_cast<std::size_t>(channels), T(0));
        grad_gamma.assign(static_cast<std::size_t>(channels), T(0));
        grad_beta.assign(static_cast<std::size_t>(channels), T(0));
    }

    Tensor<T> forward(const Tensor<T>& x) {
        if (x.c() != c_) {
            throw std::invalid_argument("ChannelNorm: channel mismatch, got " + shape_str(x));
        }
        const std::int64_t B = x.b(), C = c_, H = x.h(), W = x.w();
        Tensor<T> y(B, C, H, W);
        Tensor<T> xhat(B, C, H, W);
        Tensor<T> invstd(B, 1, H, W);
        const T invC = T(1) / static_cast<T>(C);
        for (std::int64_t n = 0; n < B; ++n) {
            for (std::int64_t h = 0; h < H; ++h) {
                for (std::int64_t w = 0; w < W; ++w) {
                    T mean = T(0);
                    for (std::int64_t ci = 0; ci < C; ++ci) {
                        mean += x.at(n, ci, h, w);
                    }
                    mean *= invC;
                    T var = T(0);
                    for (std::int64_t ci = 0; ci < C; ++ci) {
                        const T d = x.at(n, ci, h, w) - mean;
                        var += d * d;
                    }
                    var *= invC;
                    const T is = T(1) / std::sqrt(var + eps_);
                    invstd.at(n, 0, h, w) = is;
                    for (std::int64_t ci = 0; ci < C; ++ci) {
                        const T xh = (x.at(n, ci, h, w) - mean) * is;
                        xhat.at(n, ci, h, w) = xh;
                        y.at(n, ci, h, w) = gamma[static_cast<std::size_t>(ci)] * xh +
                                            beta[static_cast<std::size_t>(ci)];
                    }
                }
            }
        }
        if (training_) {
            saved_xhat_ = std::move(xhat);
            saved_invstd_ = std::move(invstd);
            has_saved_ = true;
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& grad_out) {
        if (!has_saved_) {
            throw std::runtime_error("ChannelNorm: backward called without a preceding forward");
        }
        if (!grad_out.same_shape(saved_xhat_)) {
            throw std::invalid_argument("ChannelNorm backward: grad shape mismatch");
        }
        has_saved_ = false;
        const std::int64_t B = grad_out.b(), C = c_, H = grad_out.h(), W = grad_out.w();
        Tensor<T> grad_x(B, C, H, W);
        const T invC = T(1) / static_cast<T>(C);
        for (std::int64_t n = 0; n < B; ++n) {
            for (std::int64_t h = 0; h < H; ++h) {
                for (std::int64_t w = 0; w < W; ++w) {
                    T sum1 = T(0), sum2 = T(0);
                    for (std::int64_t ci = 0; ci < C; ++ci) {
                        const T g = grad_out.at(n, ci, h, w);
                        const T xh = saved_xhat_.at(n, ci, h, w);
                        const T dyhat = g * gamma[static_cast<std::size_t>(ci)];
                        sum1 += dyhat;
                        sum2 += dyhat * xh;
                        grad_gamma[static_cast<std::size_t>(ci)] += g * xh;
                        grad_beta[static_cast<std::size_t>(ci)] += g;
                    }
                    const T is = saved_invstd_.at(n, 0, h, w);
                    for (std::int64_t ci = 0; ci < C; ++ci) {
                        const T dyhat =
                            grad_out.at(n, ci, h, w) * gamma[static_cast<std::size_t>(ci)];
                        const T xh = saved_xhat_.at(n, ci, h, w);
                        grad_x.at(n, ci, h, w) = is * (dyhat - (sum1 + xh * sum2) * invC);
                    }
                }
            }
        }
        return grad_x;
    }

    void zero_grad() {
        std::fill(grad_gamma.begin(), grad_gamma.end(), T(0));
        std::fill(grad_beta.begin(), grad_beta.end(), T(0));
    }
    void set_training(bool on) { training_ = on; }
    void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) {
        out.push_back({prefix + ".gamma", gamma.data(), grad_gamma.data(),
                       static_cast<std::int64_t>(gamma.size())});
        out.push_back({prefix + ".beta", beta.data(), grad_beta.data(),
                       static_cast<std::int64_t>(beta.size())});
    }
    std::vector<ParamRef<T>> parameters() {
        std::vector<ParamRef<T>> out;
        collect_params("norm", out);
        return out;
    }

    std::vector<T> gamma, beta, grad_gamma, grad_beta;

private:
    std::int64_t c_;
    T eps_;
    Tensor<T> saved_xhat_;
    Tensor<T> saved_invstd_;
    bool has_saved_ = false;
    bool training_ = true;
};

/// Stateless functional form of the channel norm (no saved state, no params).
template <class T>
Tensor<T> norm_channels(const Tensor<T>& x, const std::vector<T>& gamma, const std::vector<T>& beta,
                        T eps) {
    if (static_cast<std::int64_t>(gamma.size()) != x.c() ||
        static_cast<std::int64_t>(beta.size()) != x.c()) {
        throw std::invalid_argument("norm_channels: gamma/beta length must equal channel count");
    }
    ChannelNorm<T> norm(x.c(), eps);
    norm.gamma = gamma;
    norm.beta = beta;
    norm.set_training(false);
    return norm.forward(x);
}

// ---------------------------------------------------------------------------
// activation
// ---------------------------------------------------------------------------

/// Gaussian-error activation, exact erf form.
template <class T>
class Gelu {
public:
    Tensor<T> forward(const Tensor<T>& x) {
        Tensor<T> y = x;
        for (auto& v : y.data) {
            v = gelu_value(v);
        }
        if (training_) {
            saved_x_ = x;
            has_saved_ = true;
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& grad_out) {
        if (!has_saved_) {
            throw std::runtime_error("Gelu: backward called without a preceding forward");
        }
        if (!grad_out.same_shape(saved_x_)) {
            throw std::invalid_argument("Gelu backward: grad shape mismatch");
        }
        has_saved_ = false;
        Tensor<T> gx = grad_out;
        for (std::size_t i = 0; i < gx.data.size(); ++i) {
            gx.data[i] *= gelu_derivative(saved_x_.data[i]);
        }
        return gx;
    }

    static T gelu_value(T x) {
        return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865475)));
    }
    static T gelu_derivative(T x) {
        const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475)));
        const T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014327);
        return cdf + x * pdf;
    }

    void zero_grad() {}
    void set_training(bool on) { training_ = on; }
    void collect_params(const std::string&, std::vector<ParamRef<T>>&) {}
    std::vector<ParamRef<T>> parameters() { return {}; }

private:
    Tensor<T> saved_x_;
    bool has_saved_ = false;
    bool training_ = true;
};

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

/// Average pooling, stride 1, same padding, border windows divide by the
/// in-bounds tap count. Parameter-free.
template <class T>
class AvgPoolSame {
public:
    explicit AvgPoolSame(std::int64_t kernel) : k_(kernel), pad_(kernel / 2) {
        if (kernel < 1 || kernel % 2 == 0) {
            throw std::invalid_argument("AvgPoolSame: kernel must be odd and >= 1");
        }
    }

    Tensor<T> forward(const Tensor<T>& x) {
        Tensor<T> y(x.b(), x.c(), x.h(), x.w());
        pool_apply(x, y, /*transpose=*/false);
        if (training_) {
            saved_shape_ = x.shape;
            has_saved_ = true;
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& grad_out) {
        if (!has_saved_) {
            throw std::runtime_error("AvgPoolSame: backward called without a preceding forward");
        }
        if (grad_out.shape != saved_shape_) {
            throw std::invalid_argument("AvgPoolSame backward: grad shape mismatch");
        }
        has_saved_ = false;
        Tensor<T> gx(grad_out.b(), grad_out.c(), grad_out.h(), grad_out.w());
        pool_apply(grad_out, gx, /*transpose=*/true);
        return gx;
    }

    void zero_grad() {}
    void set_training(bool on) { training_ = on; }
    void collect_params(const std::string&, std::vector<ParamRef<T>>&) {}
    std::vector<ParamRef<T>> parameters() { return {}; }

private:
    // Forward: out[p] = mean of in over the window at p.
    // Transpose: out[q] = sum over windows p containing q of in[p] / count(p),
    // which is the adjoint used for the gradient.
    void pool_apply(const Tensor<T>& in, Tensor<T>& out, bool transpose) const {
        const std::int64_t B = in.b(), C = in.c(), H = in.h(), W = in.w();
        for (std::int64_t n = 0; n < B; ++n) {
            for (std::int64_t c = 0; c < C; ++c) {
                for (std::int64_t h = 0; h < H; ++h) {
                    const std::int64_t h0 = std::max<std::int64_t>(0, h - pad_);
                    const std::int64_t h1 = std::min<std::int64_t>(H, h - pad_ + k_);
                    for (std::int64_t w = 0; w < W; ++w) {
                        const std::int64_t w0 = std::max<std::int64_t>(0, w - pad_);
                        const std::int64_t w1 = std::min<std::int64_t>(W, w - pad_ + k_);
                        const T inv_count = T(1) / static_cast<T>((h1 - h0) * (w1 - w0));
                        if (!transpose) {
                            T acc = T(0);
                            for (std::int64_t hh = h0; hh < h1; ++hh) {
                                for (std::int64_t ww = w0; ww < w1; ++ww) {
                                    acc += in.at(n, c, hh, ww);
                                }
                            }
                            out.at(n, c, h, w) = acc * inv_count;
                        } else {
                            const T g = in.at(n, c, h, w) * inv_count;
                            for (std::int64_t hh = h0; hh < h1; ++hh) {
                                for (std::int64_t ww = w0; ww < w1; ++ww) {
                                    out.at(n, c, hh, ww) += g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    std::int64_t k_, pad_;
    std::array<std::int64_t, 4> saved_shape_{};
    bool has_saved_ = false;
    bool training_ = true;
};

/// Mean over all spatial positions: (B, C, H, W) -> (B, C, 1, 1).
template <class T>
class GlobalAvgPool {
public:
    Tensor<T> forward(const Tensor<T>& x) {
        const std::int64_t B = x.b(), C = x.c(), H = x.h(), W = x.w();
        Tensor<T> y(B, C, 1, 1);
        const T inv = T(1) / static_cast<T>(H * W);
        for (std::int64_t n = 0; n < B; ++n) {
            for (std::int64_t c = 0; c < C; ++c) {
                T acc = T(0);
                const T* r = x.data.data() + x.index(n, c, 0, 0);
                for (std::int64_t i = 0; i < H * W; ++i) {
                    acc += r[i];
                }
                y.at(n, c, 0, 0) = acc * inv;
            }
        }
        if (training_) {
            saved_shape_ = x.shape;
            has_saved_ = true;
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& grad_out) {
        if (!has_saved_) {
            throw std::runtime_error("GlobalAvgPool: backward called without a preceding forward");
        }
        has_saved_ = false;
        const std::int64_t B = saved_shape_[0], C = saved_shape_[1], H = saved_shape_[2],
                           W = saved_shape_[3];
        if (grad_out.shape != std::array<std::int64_t, 4>{B, C, 1, 1}) {
            throw std::invalid_argument("GlobalAvgPool backward: grad shape mismatch");
        }
        Tensor<T> gx(B, C, H, W);
        const T inv = T(1) / static_cast<T>(H * W);
        for (std::int64_t n = 0; n < B; ++n) {
            for (std::int64_t c = 0; c < C; ++c) {
                const T g = grad_out.at(n, c, 0, 0) * inv;
                T* r = gx.data.data() + gx.index(n, c, 0, 0);
                for (std::int64_t i = 0; i < H * W; ++i) {
                    r[i] = g;
                }
            }
        }
        return gx;
    }

    void zero_grad() {}
    void set_training(bool on) { training_ = on; }
    void collect_params(const std::string&, std::vector<ParamRef<T>>&) {}
    std::vector<ParamRef<T>> parameters() { return {}; }

private:
    std::array<std::int64_t, 4> saved_shape_{};
    bool has_saved_ = false;
    bool training_ = true;
};

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

/// Row-wise softmax of (B, K, 1, 1) logits, stabilized by max subtraction.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
    if (logits.h() != 1 || logits.w() != 1) {
        throw std::invalid_argument("softmax_rows: expected (B, K, 1, 1) logits");
    }
    const std::int64_t B = logits.b(), K = logits.c();
    Tensor<T> p(B, K, 1, 1);
    for (std::int64_t n = 0; n < B; ++n) {
        const T* lr = logits.data.data() + n * K;
        T* pr = p.data.data() + n * K;
        T m = lr[0];
        for (std::int64_t k = 1; k < K; ++k) {
            m = std::max(m, lr[k]);
        }
        T z = T(0);
        for (std::int64_t k = 0; k < K; ++k) {
            pr[k] = std::exp(lr[k] - m);
            z += pr[k];
        }
        const T invz = T(1) / z;
        for (std::int64_t k = 0; k < K; ++k) {
            pr[k] *= invz;
        }
    }
    return p;
}

template <class T>
struct LossResult {
    T loss;
    Tensor<T> grad_logits;
};

/// Mean negative log-likelihood over the batch; grad = (softmax - onehot) / B.
template <class T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    const std::int64_t B = logits.b(), K = logits.c();
    if (static_cast<std::int64_t>(labels.size()) != B) {
        throw std::invalid_argument("softmax_cross_entropy: one label per batch row required");
    }
    for (int lab : labels) {
        if (lab < 0 || lab >= K) {
            throw std::invalid_argument("softmax_cross_entropy: label out of range");
        }
    }
    Tensor<T> p = softmax_rows(logits);
    T loss = T(0);
    const T invB = T(1) / static_cast<T>(B);
    for (std::int64_t n = 0; n < B; ++n) {
        const T* lr = logits.data.data() + n * K;
        T m = lr[0];
        for (std::int64_t k = 1; k < K; ++k) {
            m = std::max(m, lr[k]);
        }
        T z = T(0);
        for (std::int64_t k = 0; k < K; ++k) {
            z += std::exp(lr[k] - m);
        }
        // -log p = log z - (logit - max)
        loss += std::log(z) - (lr[labels[static_cast<std::size_t>(n)]] - m);
    }
    loss *= invB;

    Tensor<T> grad = p;
    for (std::int64_t n = 0; n < B; ++n) {
        grad.at(n, labels[static_cast<std::size_t>(n)], 0, 0) -= T(1);
    }
    for (auto& g : grad.data) {
        g *= invB;
    }
    return {loss, std::move(grad)};
}

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

/// Truncated normal (std 0.02) weights, zero biases; each parameter gets a
/// stream derived from (seed, name) so shared modules initialize identically
/// regardless of which other parameters exist in the model.
template <class T>
void init_param(const ParamRef<T>& p, std::uint64_t seed, T std_dev = T(0.02)) {
    const bool is_weightlike = p.name.ends_with(".weight");
    const bool is_gamma = p.name.ends_with(".gamma");
    if (is_weightlike) {
        Rng rng(mix_seed(seed, hash_name(p.name)));
        for (std::int64_t i = 0; i < p.size; ++i) {
            p.data[i] = static_cast<T>(rng.truncated_normal(0.0, static_cast<double>(std_dev)));
        }
    } else if (is_gamma) {
        std::fill(p.data, p.data + p.size, T(1));
    } else {
        std::fill(p.data, p.data + p.size, T(0));
    }
}

}  // namespace dff
