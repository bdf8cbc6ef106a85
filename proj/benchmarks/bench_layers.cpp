#include <benchmark/benchmark.h>

#include "dfformer/deformable.hpp"
#include "dfformer/model.hpp"
#include "dfformer/rng.hpp"

namespace {

dff::Tensor<float> random_tensor(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w,
                                 std::uint64_t seed) {
    dff::Rng rng(seed);
    dff::Tensor<float> t(b, c, h, w);
    for (auto& v : t.data) {
        v = static_cast<float>(rng.normal());
    }
    return t;
}

void BM_Conv2dForward(benchmark::State& state) {
    const std::int64_t c = state.range(0), hw = state.range(1);
    dff::Conv2d<float> conv(c, c, 3, 1, 1);
    dff::Rng rng(1);
    for (auto& v : conv.params.weight.data) {
        v = static_cast<float>(rng.normal(0.0, 0.05));
    }
    conv.set_training(false);
    const auto x = random_tensor(1, c, hw, hw, 2);
    for (auto _ : state) {
        benchmark::DoNotOptimize(conv.forward(x));
    }
    state.SetItemsProcessed(state.iterations() * c * c * 9 * hw * hw);
}
BENCHMARK(BM_Conv2dForward)->Args({16, 16})->Args({64, 64})->Args({64, 128});

void BM_DeformableForward(benchmark::State& state) {
    const std::int64_t c = state.range(0), hw = state.range(1);
    dff::DeformableConv<float> conv(c, c, 3);
    dff::Rng rng(1);
    for (auto& v : conv.main.weight.data) {
        v = static_cast<float>(rng.normal(0.0, 0.05));
    }
    for (auto& v : conv.offset_predictor().params.bias) {
        v = 0.3f;
    }
    conv.set_training(false);
    const auto x = random_tensor(1, c, hw, hw, 2);
    for (auto _ : state) {
        benchmark::DoNotOptimize(conv.forward(x));
    }
    state.SetItemsProcessed(state.iterations() * c * c * 9 * hw * hw);
}
BENCHMARK(BM_DeformableForward)->Args({16, 16})->Args({64, 64})->Args({64, 128});

void BM_DeformableBackward(benchmark::State& state) {
    const std::int64_t c = state.range(0), hw = state.range(1);
    dff::DeformableConv<float> conv(c, c, 3);
    dff::Rng rng(1);
    for (auto& v : conv.main.weight.data) {
        v = static_cast<float>(rng.normal(0.0, 0.05));
    }
    const auto x = random_tensor(1, c, hw, hw, 2);
    const auto g = random_tensor(1, c, hw, hw, 3);
    for (auto _ : state) {
        conv.forward(x);
        benchmark::DoNotOptimize(conv.backward(g));
    }
}
BENCHMARK(BM_DeformableBackward)->Args({16, 16})->Args({64, 64});

void BM_BlockForward(benchmark::State& state) {
    const std::int64_t c = state.range(0), hw = state.range(1);
    dff::Block<float> block(c, 3, 4, dff::MixerKind::deformable, false);
    std::vector<dff::ParamRef<float>> params;
    block.collect_params("block", params);
    for (const auto& p : params) {
        dff::init_param(p, 7);
    }
    block.set_training(false);
    const auto x = random_tensor(2, c, hw, hw, 2);
    for (auto _ : state) {
        benchmark::DoNotOptimize(block.forward(x));
    }
}
BENCHMARK(BM_BlockForward)->Args({16, 16})->Args({32, 8});

void BM_DeskModelStep(benchmark::State& state) {
    auto model = dff::build_model<float>(dff::ModelConfig::desk(), 7);
    const auto params = model.parameters();
    const auto x = random_tensor(5, 3, 64, 64, 2);
    const std::vector<int> labels = {0, 1, 0, 1, 0};
    for (auto _ : state) {
        model.zero_grad();
        auto logits = model.forward(x);
        auto loss = dff::softmax_cross_entropy(logits, labels);
        model.backward(loss.grad_logits);
        benchmark::DoNotOptimize(params);
    }
}
BENCHMARK(BM_DeskModelStep);

}  // namespace

BENCHMARK_MAIN();
