#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "dfformer/mixer.hpp"

namespace dff {

struct StageConfig {
    std::int64_t patch_kernel = 3;
    std::int64_t patch_stride = 2;
    std::int64_t channels = 64;
    std::int64_t mixer_kernel = 3;
    std::int64_t mlp_ratio = 4;
    std::int64_t depth = 2;

    bool operator==(const StageConfig&) const = default;
};

/// Full architecture description of the hierarchical 4-stage model.
struct ModelConfig {
    std::vector<StageConfig> stages;
    MixerKind mixer_kind = MixerKind::deformable;
    bool mixer_depthwise = false;
    std::int64_t num_classes = 2;
    std::int64_t input_channels = 3;

    /// The default hierarchy: patch embeds 7/s4 then 3/s2, channels
    /// 64/128/320/512, depths 2/2/6/2, 3x3 stride-1 mixers, MLP ratio 4.
    static ModelConfig table1() {
        ModelConfig c;
        c.stages = {
            {7, 4, 64, 3, 4, 2},
            {3, 2, 128, 3, 4, 2},
            {3, 2, 320, 3, 4, 6},
            {3, 2, 512, 3, 4, 2},
        };
        return c;
    }

    /// Two-stage reduced configuration for desk-scale runs on 64x64 inputs.
    static ModelConfig desk() {
        ModelConfig c;
        c.stages = {
            {7, 4, 16, 3, 4, 1},
            {3, 2, 32, 3, 4, 1},
        };
        return c;
    }

    std::int64_t total_stride() const {
        std::int64_t s = 1;
        for (const auto& st : stages) {
            s *= st.patch_stride;
        }
        return s;
    }

    void validate() const {
        if (stages.empty()) {
            throw std::invalid_argument("ModelConfig: at least one stage required");
        }
        for (const auto& st : stages) {
            if (st.patch_kernel < 1 || st.patch_stride < 1 || st.channels < 1 ||
                st.mixer_kernel < 1 || st.mlp_ratio < 1 || st.depth < 1) {
                throw std::invalid_argument("ModelConfig: all stage counts must be >= 1");
            }
            if (st.mixer_kernel % 2 == 0) {
                throw std::invalid_argument("ModelConfig: mixer kernel must be odd");
            }
        }
        if (num_classes < 2 || input_channels < 1) {
            throw std::invalid_argument("ModelConfig: invalid head/input configuration");
        }
    }

    bool operator==(const ModelConfig&) const = default;
};

/// Reads a ModelConfig from a JSON document with keys mirroring the struct
/// field names; omitted keys keep the table1 defaults.
ModelConfig load_model_config(const std::filesystem::path& path);
std::string model_config_to_json(const ModelConfig& config);

struct StageShape {
    std::int64_t channels, h, w;
    bool operator==(const StageShape&) const = default;
};

/// Per-stage output sizes, computed from the shape algebra alone.
inline std::vector<StageShape> stage_output_shapes(const ModelConfig& config, std::int64_t h,
                                                   std::int64_t w) {
    std::vector<StageShape> out;
    for (const auto& st : config.stages) {
        h = conv_out_extent(h, st.patch_kernel, st.patch_stride, st.patch_kernel / 2);
        w = conv_out_extent(w, st.patch_kernel, st.patch_stride, st.patch_kernel / 2);
        out.push_back({st.channels, h, w});
    }
    return out;
}

/// Residual block: x1 = x + Mixer(Norm(x)); out = x1 + MLP(Norm(x1)).
/// The MLP is two 1x1 convolutions with a Gaussian-error activation between,
/// hidden width mlp_ratio * channels.
template <class T>
class Block {
public:
    Block(std::int64_t channels, std::int64_t mixer_kernel, std::int64_t mlp_ratio,
          MixerKind kind, bool depthwise)
        : norm1_(channels), norm2_(channels),
          mixer_(make_mixer<T>(kind, channels, mixer_kernel, depthwise)),
          fc1_(channels, channels * mlp_ratio, 1, 1, 0),
          fc2_(channels * mlp_ratio, channels, 1, 1, 0) {}

    Tensor<T> forward(const Tensor<T>& x) {
        Tensor<T> x1 = x;
        add_inplace(x1, mixer_->forward(norm1_.forward(x)));
        Tensor<T> out = x1;
        add_inplace(out, fc2_.forward(act_.forward(fc1_.forward(norm2_.forward(x1)))));
        return out;
    }

    Tensor<T> backward(const Tensor<T>& grad_out) {
        Tensor<T> gx1 = grad_out;
        add_inplace(gx1, norm2_.backward(fc1_.backward(act_.backward(fc2_.backward(grad_out)))));
        Tensor<T> gx = gx1;
        add_inplace(gx, norm1_.backward(mixer_->backward(gx1)));
        return gx;
    }

    void zero_grad() {
        norm1_.zero_grad();
        norm2_.zero_grad();
        mixer_->zero_grad();
        fc1_.zero_grad();
        fc2_.zero_grad();
    }

    void set_training(bool on) {
        norm1_.set_training(on);
        norm2_.set_training(on);
        mixer_->set_training(on);
        act_.set_training(on);
        fc1_.set_training(on);
        fc2_.set_training(on);
    }

    void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) {
        norm1_.collect_params(prefix + ".norm1", out);
        mixer_->collect_params(prefix + ".mixer", out);
        norm2_.collect_params(prefix + ".norm2", out);
        fc1_.collect_params(prefix + ".mlp.fc1", out);
        fc2_.collect_params(prefix + ".mlp.fc2", out);
    }

    std::vector<ParamRef<T>> parameters() {
        std::vector<ParamRef<T>> out;
        collect_params("block", out);
        return out;
    }

    TokenMixer<T>& mixer() { return *mixer_; }
    Conv2d<T>& mlp_fc1() { return fc1_; }
    Conv2d<T>& mlp_fc2() { return fc2_; }

private:
    ChannelNorm<T> norm1_, norm2_;
    std::unique_ptr<TokenMixer<T>> mixer_;
    Conv2d<T> fc1_, fc2_;
    Gelu<T> act_;
};

/// The assembled hierarchy: per stage a strided patch embedding followed by
/// residual blocks, then channel norm, global average pooling, and a linear
/// classifier.
///
/// Parameter iteration order (the checkpoint contract):
///   stage{i}.patch.{weight,bias}
///   stage{i}.block{j}.norm1.{gamma,beta}
///   stage{i}.block{j}.mixer.*          (deformable: main.{weight,bias},
///                                       offset.{weight,bias}; pooling and
///                                       identity mixers contribute nothing)
///   stage{i}.block{j}.norm2.{gamma,beta}
///   stage{i}.block{j}.mlp.fc1.{weight,bias}
///   stage{i}.block{j}.mlp.fc2.{weight,bias}
///   head.norm.{gamma,beta}
///   head.fc.{weight,bias}
template <class T>
class Model {
public:
    explicit Model(const ModelConfig& config)
        : config_(config), head_norm_(config.stages.empty() ? 1 : config.stages.back().channels),
          head_fc_((config.stages.empty() ? 1 : config.stages.back().channels),
                   config.num_classes) {
        config_.validate();
        std::int64_t c_in = config_.input_channels;
        for (const auto& st : config_.stages) {
            patch_embeds_.emplace_back(c_in, st.channels, st.patch_kernel, st.patch_stride,
                                       st.patch_kernel / 2);
            blocks_.emplace_back();
            for (std::int64_t j = 0; j < st.depth; ++j) {
                blocks_.back().emplace_back(st.channels, st.mixer_kernel, st.mlp_ratio,
                                            config_.mixer_kind, config_.mixer_depthwise);
            }
            c_in = st.channels;
        }
    }

    Tensor<T> forward(const Tensor<T>& x) {
        if (x.c() != config_.input_channels) {
            throw std::invalid_argument("Model: expected " +
                                        std::to_string(config_.input_channels) +
                                        " input channels, got " + shape_str(x));
        }
        const std::int64_t stride = config_.total_stride();
        if (x.h() % stride != 0 || x.w() % stride != 0) {
            throw std::invalid_argument("Model: input spatial size must be divisible by " +
                                        std::to_string(stride) + ", got " + shape_str(x));
        }
        last_stage_shapes_.clear();
        Tensor<T> h = x;
        for (std::size_t i = 0; i < patch_embeds_.size(); ++i) {
            h = patch_embeds_[i].forward(h);
            for (auto& block : blocks_[i]) {
                h = block.forward(h);
            }
            last_stage_shapes_.push_back(h.shape);
        }
        h = head_norm_.forward(h);
        h = head_pool_.forward(h);
        return head_fc_.forward(h);
    }

    /// Chains every block's backward in reverse; returns grad wrt the input.
    Tensor<T> backward(const Tensor<T>& grad_logits) {
        Tensor<T> g = head_fc_.backward(grad_logits);
        g = head_pool_.backward(g);
        g = head_norm_.backward(g);
        for (std::size_t i = patch_embeds_.size(); i-- > 0;) {
            for (std::size_t j = blocks_[i].size(); j-- > 0;) {
                g = blocks_[i][j].backward(g);
            }
            g = patch_embeds_[i].backward(g);
        }
        return g;
    }

    void zero_grad() {
        for (auto& pe : patch_embeds_) {
            pe.zero_grad();
        }
        for (auto& stage : blocks_) {
            for (auto& b : stage) {
                b.zero_grad();
            }
        }
        head_norm_.zero_grad();
        head_fc_.zero_grad();
    }

    void set_training(bool on) {
        for (auto& pe : patch_embeds_) {
            pe.set_training(on);
        }
        for (auto& stage : blocks_) {
            for (auto& b : stage) {
                b.set_training(on);
            }
        }
        head_norm_.set_training(on);
        head_pool_.set_training(on);
        head_fc_.set_training(on);
    }

    std::vector<ParamRef<T>> parameters() {
        std::vector<ParamRef<T>> out;
        for (std::size_t i = 0; i < patch_embeds_.size(); ++i) {
            const std::string sp = "stage" + std::to_string(i);
            patch_embeds_[i].collect_params(sp + ".patch", out);
            for (std::size_t j = 0; j < blocks_[i].size(); ++j) {
                blocks_[i][j].collect_params(sp + ".block" + std::to_string(j), out);
            }
        }
        head_norm_.collect_params("head.norm", out);
        head_fc_.collect_params("head.fc", out);
        return out;
    }

    std::int64_t parameter_count() {
        std::int64_t n = 0;
        for (const auto& p : parameters()) {
            n += p.size;
        }
        return n;
    }

    const ModelConfig& config() const { return config_; }
    const std::vector<std::array<std::int64_t, 4>>& last_stage_shapes() const {
        return last_stage_shapes_;
    }
    Block<T>& block(std::size_t stage, std::size_t index) { return blocks_[stage][index]; }
    Conv2d<T>& patch_embed(std::size_t stage) { return patch_embeds_[stage]; }
    Linear<T>& head_fc() { return head_fc_; }

private:
    ModelConfig config_;
    std::vector<Conv2d<T>> patch_embeds_;
    std::vector<std::vector<Block<T>>> blocks_;
    ChannelNorm<T> head_norm_;
    GlobalAvgPool<T> head_pool_;
    Linear<T> head_fc_;
    std::vector<std::array<std::int64_t, 4>> last_stage_shapes_;
};

/// Deterministic initialization: truncated normal (std 0.02) weights, unit
/// norm scales, zero biases, and exactly-zero offset predictors. Each
/// parameter draws from a stream keyed by (seed, parameter name), so modules
/// shared between mixer kinds initialize byte-identically.
template <class T>
Model<T> build_model(const ModelConfig& config, std::uint64_t seed) {
    Model<T> model(config);
    for (const auto& p : model.parameters()) {
        if (p.name.find(".offset.") != std::string::npos) {
            std::fill(p.data, p.data + p.size, T(0));
        } else {
            init_param(p, seed);
        }
    }
    return model;
}

}  // namespace dff
