// Serial reference vs OpenMP paths: dense kernels and a full training batch.
#include <benchmark/benchmark.h>

#include "cmkt/config.hpp"
#include "cmkt/kernels.hpp"
#include "cmkt/rng.hpp"
#include "cmkt/trainer.hpp"

using namespace cmkt;

namespace {

Tensor2D random(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  Tensor2D t(r, c);
  for (auto& v : t.data()) v = rng.uniform(-1, 1);
  return t;
}

template <void (*Gemm)(const Tensor2D&, const Tensor2D&, Tensor2D&)>
void BM_gemm_nn(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random(n, n, 1), b = random(n, n, 2);
  Tensor2D out(n, n);
  for (auto _ : state) {
    Gemm(a, b, out);
    benchmark::DoNotOptimize(out.data().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_gemm_nn<kernels::serial::gemm_nn>)->Name("gemm_nn/serial")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_gemm_nn<kernels::gemm_nn>)->Name("gemm_nn/openmp")->Arg(64)->Arg(128)->Arg(256);

template <void (*Gemm)(const Tensor2D&, const Tensor2D&, Tensor2D&)>
void BM_gemm_nt(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random(n, n, 3), b = random(n, n, 4);
  Tensor2D out(n, n);
  for (auto _ : state) {
    Gemm(a, b, out);
    benchmark::DoNotOptimize(out.data().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_gemm_nt<kernels::serial::gemm_nt>)->Name("gemm_nt/serial")->Arg(128)->Arg(256);
BENCHMARK(BM_gemm_nt<kernels::gemm_nt>)->Name("gemm_nt/openmp")->Arg(128)->Arg(256);

void BM_batch(benchmark::State& state, Execution exec) {
  SynthOptions so;
  so.num_utts = 16;
  so.frames_min = 4;
  so.frames_max = 8;
  const auto data = synth_utterances(so);
  const ModelConfig cfg = desk_preset();
  const Model model = Model::create(cfg, vocabulary_for(data), 1);
  const text::TargetProvider targets(cfg.target, model.vocab.size(), cfg.encoder.d_t, cfg.layer_norm_eps);
  for (auto _ : state) {
    auto r = compute_batch(model, &targets, data, exec);
    benchmark::DoNotOptimize(r.mean.total);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(data.size()));
}
BENCHMARK_CAPTURE(BM_batch, serial, Execution::kSerial)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_batch, openmp, Execution::kParallel)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
