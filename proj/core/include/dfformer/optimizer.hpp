#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "dfformer/layers.hpp"

namespace dff {

/// In-place parameter update from accumulated gradients. Implementations
/// keep per-parameter state bound to the order of the parameter list passed
/// to the first step; the same list must be used for every step.
template <class T>
class Optimizer {
public:
    virtual ~Optimizer() = default;

    void step(const std::vector<ParamRef<T>>& params) {
        if (state_size_.empty()) {
            for (const auto& p : params) {
                state_size_.push_back(p.size);
            }
            init_state(params);
        } else if (state_size_.size() != params.size()) {
            throw std::invalid_argument("optimizer: parameter list changed between steps");
        }
        ++t_;
        for (std::size_t i = 0; i < params.size(); ++i) {
            const ParamRef<T>& p = params[i];
            if (p.size != state_size_[i]) {
                throw std::invalid_argument("optimizer: parameter size changed between steps");
            }
            update(i, p);
            for (std::int64_t j = 0; j < p.size; ++j) {
                if (!std::isfinite(p.data[j])) {
                    throw std::runtime_error("optimizer: non-finite update in parameter '" +
                                             p.name + "' at step " + std::to_string(t_));
                }
            }
        }
    }

    std::int64_t steps_taken() const { return t_; }

protected:
    virtual void init_state(const std::vector<ParamRef<T>>&) = 0;
    virtual void update(std::size_t index, const ParamRef<T>& p) = 0;

    std::int64_t t_ = 0;

private:
    std::vector<std::int64_t> state_size_;
};

/// v <- mu * v + g;  p <- p - lr * v.
template <class T>
class SgdMomentum final : public Optimizer<T> {
public:
    SgdMomentum(double lr, double momentum = 0.9) : lr_(lr), mu_(momentum) {}

protected:
    void init_state(const std::vector<ParamRef<T>>& params) override {
        for (const auto& p : params) {
            velocity_.emplace_back(static_cast<std::size_t>(p.size), T(0));
        }
    }

    void update(std::size_t i, const ParamRef<T>& p) override {
        T* v = velocity_[i].data();
        const T lr = static_cast<T>(lr_), mu = static_cast<T>(mu_);
        for (std::int64_t j = 0; j < p.size; ++j) {
            v[j] = mu * v[j] + p.grad[j];
            p.data[j] -= lr * v[j];
        }
    }

private:
    double lr_, mu_;
    std::vector<std::vector<T>> velocity_;
};

/// Bias-corrected moment update with decoupled weight decay.
template <class T>
class AdamW final : public Optimizer<T> {
public:
    AdamW(double lr, double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999,
          double eps = 1e-8)
        : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

protected:
    void init_state(const std::vector<ParamRef<T>>& params) override {
        for (const auto& p : params) {
            m_.emplace_back(static_cast<std::size_t>(p.size), T(0));
            v_.emplace_back(static_cast<std::size_t>(p.size), T(0));
        }
    }

    void update(std::size_t i, const ParamRef<T>& p) override {
        T* m = m_[i].data();
        T* v = v_[i].data();
        const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
        const T lr = static_cast<T>(lr_), eps = static_cast<T>(eps_);
        const T wd = static_cast<T>(wd_);
        const T bc1 = T(1) - static_cast<T>(std::pow(beta1_, static_cast<double>(this->t_)));
        const T bc2 = T(1) - static_cast<T>(std::pow(beta2_, static_cast<double>(this->t_)));
        for (std::int64_t j = 0; j < p.size; ++j) {
            const T g = p.grad[j];
            m[j] = b1 * m[j] + (T(1) - b1) * g;
            v[j] = b2 * v[j] + (T(1) - b2) * g * g;
            const T mhat = m[j] / bc1;
            const T vhat = v[j] / bc2;
            p.data[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p.data[j]);
        }
    }

private:
    double lr_, wd_, beta1_, beta2_, eps_;
    std::vector<std::vector<T>> m_, v_;
};

}  // namespace dff
