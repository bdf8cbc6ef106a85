#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dff {

/// Dense row-major (batch, channel, height, width) tensor.
///
/// Instantiated with float for training and double for gradient checks;
/// both share this one code path.
template <class T>
struct Tensor {
    std::array<std::int64_t, 4> shape{0, 0, 0, 0};
    std::vector<T> data;

    Tensor() = default;

    Tensor(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w)
        : shape{b, c, h, w} {
        if (b < 0 || c < 0 || h < 0 || w < 0) {
            throw std::invalid_argument("Tensor: negative shape entry");
        }
        data.assign(static_cast<std::size_t>(b * c * h * w), T(0));
    }

    Tensor(const std::array<std::int64_t, 4>& s, std::vector<T> d)
        : shape(s), data(std::move(d)) {
        if (static_cast<std::int64_t>(data.size()) != size()) {
            throw std::invalid_argument("Tensor: data length does not match shape");
        }
    }

    std::int64_t b() const { return shape[0]; }
    std::int64_t c() const { return shape[1]; }
    std::int64_t h() const { return shape[2]; }
    std::int64_t w() const { return shape[3]; }

    std::int64_t size() const { return shape[0] * shape[1] * shape[2] * shape[3]; }

    std::int64_t index(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w) const {
        return ((b * shape[1] + c) * shape[2] + h) * shape[3] + w;
    }

    T& at(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w) {
        return data[static_cast<std::size_t>(index(b, c, h, w))];
    }
    const T& at(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w) const {
        return data[static_cast<std::size_t>(index(b, c, h, w))];
    }

    /// Pointer to the start of row (b, c, h).
    T* row(std::int64_t b, std::int64_t c, std::int64_t h) {
        return data.data() + index(b, c, h, 0);
    }
    const T* row(std::int64_t b, std::int64_t c, std::int64_t h) const {
        return data.data() + index(b, c, h, 0);
    }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    static Tensor zeros(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w) {
        return Tensor(b, c, h, w);
    }

    static Tensor full(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w, T v) {
        Tensor t(b, c, h, w);
        t.fill(v);
        return t;
    }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out(shape[0], shape[1], shape[2], shape[3]);
        for (std::size_t i = 0; i < data.size(); ++i) {
            out.data[i] = static_cast<U>(data[i]);
        }
        return out;
    }
};

template <class T>
bool all_finite(const Tensor<T>& t) {
    for (T v : t.data) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

template <class T>
bool all_finite(const std::vector<T>& v) {
    for (T x : v) {
        if (!std::isfinite(x)) {
            return false;
        }
    }
    return true;
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument("tensor add: shape mismatch");
    }
    Tensor<T> out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] += b.data[i];
    }
    return out;
}

template <class T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument("tensor add: shape mismatch");
    }
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        a.data[i] += b.data[i];
    }
}

template <class T>
std::string shape_str(const Tensor<T>& t) {
    return "(" + std::to_string(t.shape[0]) + "," + std::to_string(t.shape[1]) + "," +
           std::to_string(t.shape[2]) + "," + std::to_string(t.shape[3]) + ")";
}

/// Output spatial extent of a convolution along one axis.
inline std::int64_t conv_out_extent(std::int64_t in, std::int64_t kernel, std::int64_t stride,
                                    std::int64_t padding) {
    return (in + 2 * padding - kernel) / stride + 1;
}

}  // namespace dff
