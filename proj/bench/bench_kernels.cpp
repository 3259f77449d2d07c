// Serial reference vs OpenMP kernels on layer shapes the model actually uses,
// plus the simulator's trial fan-out. Thread count follows OMP_NUM_THREADS.

#include "mmsqc/nn/kernels.hpp"
#include "mmsqc/sim/plant.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace mmsqc;
namespace k = mmsqc::nn::kernels;

namespace {

nn::Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    nn::Matrix m(r, c);
    for (auto& v : m.values()) v = g(rng);
    return m;
}

// args: rows, in, out
template <auto Kernel>
void affine_forward(benchmark::State& st)
{
    const auto n = std::size_t(st.range(0)), in = std::size_t(st.range(1)), out = std::size_t(st.range(2));
    const auto x = random_matrix(n, in, 1), w = random_matrix(out, in, 2);
    const std::vector<double> b(out, 0.1);
    nn::Matrix y;
    for (auto _ : st) {
        Kernel(x, w, b, y);
        benchmark::DoNotOptimize(y.values().data());
    }
    st.SetItemsProcessed(st.iterations() * std::int64_t(n * in * out));
}

template <auto Kernel>
void affine_weight_grad(benchmark::State& st)
{
    const auto n = std::size_t(st.range(0)), in = std::size_t(st.range(1)), out = std::size_t(st.range(2));
    const auto dy = random_matrix(n, out, 3), x = random_matrix(n, in, 4);
    nn::Matrix dw(out, in);
    for (auto _ : st) {
        Kernel(dy, x, dw);
        benchmark::DoNotOptimize(dw.values().data());
    }
    st.SetItemsProcessed(st.iterations() * std::int64_t(n * in * out));
}

void shapes(benchmark::internal::Benchmark* b)
{
    b->Args({64, 6, 64});      // training batch, encoder input layer
    b->Args({7200, 64, 40});   // full-split prediction, latent heads
    b->Args({7200, 40, 64});   // decoder hidden
    b->Args({2000, 256, 256}); // headroom
}

void generate(benchmark::State& st)
{
    sim::GenerateConfig cfg;
    cfg.n_trials = std::size_t(st.range(0));
    cfg.duration = 20.0;
    cfg.seed = 1;
    for (auto _ : st) benchmark::DoNotOptimize(sim::generate_dataset(cfg).trials.size());
}

} // namespace

BENCHMARK(affine_forward<k::serial::affine>)->Apply(shapes);
BENCHMARK(affine_forward<k::parallel::affine>)->Apply(shapes)->UseRealTime();
BENCHMARK(affine_weight_grad<k::serial::affine_grad_weight>)->Apply(shapes);
BENCHMARK(affine_weight_grad<k::parallel::affine_grad_weight>)->Apply(shapes)->UseRealTime();
BENCHMARK(generate)->Arg(8)->Unit(benchmark::kMillisecond)->UseRealTime();

BENCHMARK_MAIN();
