#include "ghnq/archspace.hpp"
#include "ghnq/ghn.hpp"
#include "ghnq/qat.hpp"
#include "ghnq/qcnn.hpp"
#include "ghnq/quantsim.hpp"

#include <benchmark/benchmark.h>

using namespace ghnq;

namespace {

std::vector<double> normal_values(std::size_t n, std::uint64_t seed)
{
    Rng rng(seed);
    std::vector<double> x(n);
    for (auto& v : x)
        v = rng.normal();
    return x;
}

GenConfig desk_graphs()
{
    GenConfig cfg;
    cfg.train_min_nodes = 6;
    cfg.train_max_nodes = 12;
    cfg.train_min_width = 4;
    cfg.train_max_width = 16;
    cfg.stem_stride = 2;
    cfg.max_downsamples = 2;
    cfg.num_classes = 4;
    cfg.batchnorm_prob = 1.0;
    cfg.seed = 1;
    return cfg;
}

GhnModel desk_ghn()
{
    GhnConfig cfg;
    cfg.hidden_dim = 32;
    cfg.base = {16, 16, 3, 3};
    Rng rng(4);
    return init_ghn(cfg, rng);
}

Tensor image_batch(int n, std::uint64_t seed)
{
    Tensor x({n, 3, 32, 32});
    x.data = normal_values(x.size(), seed);
    return x;
}

void BM_FakeQuant(benchmark::State& state)
{
    const auto x = normal_values(static_cast<std::size_t>(state.range(0)), 1);
    const int bits = static_cast<int>(state.range(1));
    for (auto _ : state)
        benchmark::DoNotOptimize(fake_quant_ste(x, bits));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_FakeQuant)->ArgsProduct({{1 << 10, 1 << 16}, {2, 4, 8}});

void BM_Conv2d(benchmark::State& state)
{
    const int c = static_cast<int>(state.range(0));
    Tensor x({8, c, 16, 16});
    x.data = normal_values(x.size(), 2);
    Tensor w({c, c, 3, 3});
    w.data = normal_values(w.size(), 3);
    for (auto _ : state) {
        ag::Tape t;
        const ag::Var y = ag::conv2d(t, t.constant(x), t.constant(w), 1, 1, 1);
        benchmark::DoNotOptimize(t.value(y).data.data());
    }
}
BENCHMARK(BM_Conv2d)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_PredictParameters(benchmark::State& state)
{
    const GhnModel ghn = desk_ghn();
    Rng rng(5);
    const ArchGraph g = add_virtual_edges(sample_graph(desk_graphs(), Split::Train, rng), 10);
    for (auto _ : state)
        benchmark::DoNotOptimize(predict_parameters(ghn, g, {3, 32, 32}));
}
BENCHMARK(BM_PredictParameters)->Unit(benchmark::kMicrosecond);

void BM_ForwardCnn(benchmark::State& state)
{
    const GhnModel ghn = desk_ghn();
    Rng rng(6);
    const ArchGraph g = add_virtual_edges(sample_graph(desk_graphs(), Split::Train, rng), 10);
    const ParamSet p = predict_parameters(ghn, g, {3, 32, 32});
    const Tensor x = image_batch(32, 7);
    const QuantScheme scheme{4, 4, QuantMode::SimQuant};
    for (auto _ : state)
        benchmark::DoNotOptimize(forward_cnn(g, p, x, scheme));
}
BENCHMARK(BM_ForwardCnn)->Unit(benchmark::kMillisecond);

void BM_GhnLossAndGrad(benchmark::State& state)
{
    const GhnModel ghn = desk_ghn();
    Rng rng(8);
    const ArchGraph g = add_virtual_edges(sample_graph(desk_graphs(), Split::Train, rng), 10);
    const Tensor x = image_batch(32, 9);
    std::vector<int> labels(32);
    for (std::size_t i = 0; i < labels.size(); ++i)
        labels[i] = static_cast<int>(i % 4);
    const QuantScheme scheme{4, 4, QuantMode::SimQuant};
    for (auto _ : state)
        benchmark::DoNotOptimize(ghn_loss_and_grad(ghn, g, x, labels, scheme, 1));
}
BENCHMARK(BM_GhnLossAndGrad)->Unit(benchmark::kMillisecond);

} // namespace
BENCHMARK_MAIN();
