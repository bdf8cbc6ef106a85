#pragma once

#include <memory>
#include <stdexcept>
#include <string>

#include "dfformer/deformable.hpp"
#include "dfformer/layers.hpp"

namespace dff {

/// The sub-layer that mixes information across spatial positions. Everything
/// else in a block is mixer-agnostic, so swapping implementations changes
/// only the mixer's own parameters.
template <class T>
class TokenMixer {
public:
    virtual ~TokenMixer() = default;
    virtual Tensor<T> forward(const Tensor<T>& x) = 0;
    virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
    virtual void zero_grad() {}
    virtual void set_training(bool) {}
    virtual void collect_params(const std::string&, std::vector<ParamRef<T>>&) {}
};

/// Deformable convolution mixer, channel-preserving, stride 1.
template <class T>
class DeformableMixer final : public TokenMixer<T> {
public:
    DeformableMixer(std::int64_t channels, std::int64_t kernel, bool depthwise)
        : conv_(channels, channels, kernel, depthwise) {}

    Tensor<T> forward(const Tensor<T>& x) override { return conv_.forward(x); }
    Tensor<T> backward(const Tensor<T>& grad_out) override { return conv_.backward(grad_out); }
    void zero_grad() override { conv_.zero_grad(); }
    void set_training(bool on) override { conv_.set_training(on); }
    void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
        conv_.collect_params(prefix, out);
    }

    DeformableConv<T>& conv() { return conv_; }

private:
    DeformableConv<T> conv_;
};

/// Subtracted-input average pooling mixer: pool(x) - x. Parameter-free.
template <class T>
class PoolingMixer final : public TokenMixer<T> {
public:
    explicit PoolingMixer(std::int64_t kernel) : pool_(kernel) {}

    Tensor<T> forward(const Tensor<T>& x) override {
        Tensor<T> y = pool_.forward(x);
        for (std::size_t i = 0; i < y.data.size(); ++i) {
            y.data[i] -= x.data[i];
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& grad_out) override {
        Tensor<T> g = pool_.backward(grad_out);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
            g.data[i] -= grad_out.data[i];
        }
        return g;
    }

    void set_training(bool on) override { pool_.set_training(on); }

private:
    AvgPoolSame<T> pool_;
};

/// Pass-through mixer, useful for isolating the rest of the block.
template <class T>
class IdentityMixer final : public TokenMixer<T> {
public:
    Tensor<T> forward(const Tensor<T>& x) override { return x; }
    Tensor<T> backward(const Tensor<T>& grad_out) override { return grad_out; }
};

enum class MixerKind { deformable, pooling, identity };

inline const char* to_string(MixerKind k) {
    switch (k) {
        case MixerKind::deformable: return "deformable";
        case MixerKind::pooling: return "pooling";
        case MixerKind::identity: return "identity";
    }
    return "?";
}

inline MixerKind parse_mixer_kind(const std::string& s) {
    if (s == "deformable") return MixerKind::deformable;
    if (s == "pooling") return MixerKind::pooling;
    if (s == "identity") return MixerKind::identity;
    throw std::invalid_argument("unknown mixer kind: " + s);
}

template <class T>
std::unique_ptr<TokenMixer<T>> make_mixer(MixerKind kind, std::int64_t channels,
                                          std::int64_t kernel, bool depthwise) {
    switch (kind) {
        case MixerKind::deformable:
            return std::make_unique<DeformableMixer<T>>(channels, kernel, depthwise);
        case MixerKind::pooling:
            return std::make_unique<PoolingMixer<T>>(kernel);
        case MixerKind::identity:
            return std::make_unique<IdentityMixer<T>>();
    }
    throw std::invalid_argument("unknown mixer kind");
}

}  // namespace dff
