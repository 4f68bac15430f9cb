#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "circuitforge/kernels.hpp"
#include "circuitforge/tasks.hpp"
#include "circuitforge/train.hpp"

using namespace circuitforge;

namespace {

std::vector<float> noise(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> d(0.0f, 1.0f);
    std::vector<float> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

kernels::Backend backend(const benchmark::State& state) {
    return state.range(0) ? kernels::Backend::parallel : kernels::Backend::serial;
}

void BM_Matmul(benchmark::State& state) {
    const std::size_t m = 1600, k = 64, n = 64;
    const auto a = noise(m * k, 1), b = noise(k * n, 2), bias = noise(n, 3);
    std::vector<float> c(m * n);
    for (auto _ : state) {
        kernels::matmul(backend(state), a, b, bias, c, m, k, n);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * m * k * n));
}

void BM_LayerNorm(benchmark::State& state) {
    const std::size_t rows = 1600, width = 64;
    const auto x = noise(rows * width, 4);
    const std::vector<float> w(width, 1.0f), b(width, 0.0f);
    std::vector<float> out(rows * width);
    for (auto _ : state) {
        kernels::layer_norm(backend(state), x, w, b, out, rows, width, 1e-5f);
        benchmark::DoNotOptimize(out.data());
    }
}

void BM_CausalAttention(benchmark::State& state) {
    const std::size_t batch = 100, seq = 16, d_head = 8;
    const auto q = noise(batch * seq * d_head, 5), k = noise(batch * seq * d_head, 6), v = noise(batch * seq * d_head, 7);
    std::vector<float> pattern(batch * seq * seq), z(batch * seq * d_head);
    for (auto _ : state) {
        kernels::causal_attention(backend(state), q, k, v, pattern, z, batch, seq, d_head);
        benchmark::DoNotOptimize(z.data());
    }
}

void BM_Forward(benchmark::State& state) {
    ModelSpec spec;
    const Model model(train::random_weights(spec, 1), backend(state));
    tasks::GenerateOptions o;
    o.toy_seq = spec.max_seq;
    const auto ds = tasks::generate(tasks::TaskKind::ToyInduction, 100, 0, tasks::Vocab::toy_symbols(spec.vocab_size), o);
    const auto batch = ds.clean_batch();
    for (auto _ : state) benchmark::DoNotOptimize(model.forward(batch).logits.data());
}

}  // namespace

BENCHMARK(BM_Matmul)->ArgName("parallel")->Arg(0)->Arg(1);
BENCHMARK(BM_LayerNorm)->ArgName("parallel")->Arg(0)->Arg(1);
BENCHMARK(BM_CausalAttention)->ArgName("parallel")->Arg(0)->Arg(1);
BENCHMARK(BM_Forward)->ArgName("parallel")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
