#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "relspray/kernels.hpp"
#include "relspray/parallel.hpp"
#include "relspray/reference.hpp"
#include "relspray/relaxometry.hpp"

using namespace relspray;

namespace {

struct ConvCase {
  ConvGeometry g;
  std::vector<float> x, w, b, gy, out, gin, gw, gb;

  ConvCase(int in_ch, int out_ch, int n, int stride) {
    g = ConvGeometry::same(in_ch, out_ch, {n, n, n}, stride);
    std::mt19937 rng(1);
    std::uniform_real_distribution<float> u(-1.f, 1.f);
    auto fill = [&](std::vector<float>& v, std::size_t size) {
      v.resize(size);
      for (auto& e : v) e = u(rng);
    };
    fill(x, g.in_size());
    fill(w, g.weight_count());
    fill(b, out_ch);
    fill(gy, g.out_size());
    out.resize(g.out_size());
    gin.resize(g.in_size());
    gw.assign(g.weight_count(), 0.f);
    gb.assign(out_ch, 0.f);
  }
};

// Arguments: input channels, output channels, edge length, stride, threads (0: serial reference).
void conv_args(benchmark::internal::Benchmark* b) {
  for (int t : {0, 1, 2, 4}) {
    b->Args({1, 8, 32, 1, t});
    b->Args({8, 8, 32, 2, t});
  }
}

void BM_ConvForward(benchmark::State& st) {
  ConvCase c(st.range(0), st.range(1), st.range(2), st.range(3));
  const int threads = st.range(4);
  if (threads) set_threads(threads);
  for (auto _ : st) {
    if (threads)
      conv3d_forward(c.g, c.x.data(), c.w.data(), c.b.data(), c.out.data());
    else
      ref::conv3d_forward(c.g, c.x.data(), c.w.data(), c.b.data(), c.out.data());
    benchmark::DoNotOptimize(c.out.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<long>(c.g.out_size()));
}

void BM_ConvBackwardData(benchmark::State& st) {
  ConvCase c(st.range(0), st.range(1), st.range(2), st.range(3));
  const int threads = st.range(4);
  if (threads) set_threads(threads);
  for (auto _ : st) {
    if (threads)
      conv3d_backward_data(c.g, c.gy.data(), c.w.data(), c.gin.data());
    else
      ref::conv3d_backward_data(c.g, c.gy.data(), c.w.data(), c.gin.data());
    benchmark::DoNotOptimize(c.gin.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<long>(c.g.in_size()));
}

void BM_ConvBackwardWeights(benchmark::State& st) {
  ConvCase c(st.range(0), st.range(1), st.range(2), st.range(3));
  const int threads = st.range(4);
  if (threads) set_threads(threads);
  for (auto _ : st) {
    if (threads)
      conv3d_backward_weights(c.g, c.x.data(), c.gy.data(), c.gw.data(), c.gb.data());
    else
      ref::conv3d_backward_weights(c.g, c.x.data(), c.gy.data(), c.gw.data(), c.gb.data());
    benchmark::DoNotOptimize(c.gw.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<long>(c.g.weight_count()));
}

void BM_R2StarMap(benchmark::State& st) {
  PhantomSpec spec = PhantomSpec::standard();
  spec.dims = {64, 64, 64};
  spec.brain.radii = {22, 24, 20};
  for (auto& r : spec.rois) {
    for (auto& c : r.center) c *= 2;
    for (auto& x : r.radii) x *= 2;
  }
  const Phantom ph = generate_phantom(spec, ClassLabel::AD, 3);
  const int threads = st.range(0);
  if (threads) set_threads(threads);
  for (auto _ : st) {
    const R2StarMap m = threads ? fit_r2star_map(ph.series) : ref::fit_r2star_map(ph.series);
    benchmark::DoNotOptimize(m.r2star.data.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<long>(ph.series.volumes.front().size()));
}

}  // namespace

BENCHMARK(BM_ConvForward)->Apply(conv_args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvBackwardData)->Apply(conv_args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvBackwardWeights)->Apply(conv_args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_R2StarMap)->Arg(0)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
