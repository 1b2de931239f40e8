#include <benchmark/benchmark.h>

#include <cmath>
#include <vector>

#include "cascade/cnn.hpp"
#include "cascade/eval.hpp"
#include "cascade/rng.hpp"
#include "cascade/views.hpp"
#include "cascade/volume.hpp"
#include "cascade/watershed.hpp"

using namespace cascade;

namespace {

Volume demo_volume(int nx, int ny, int nz) {
  Volume v;
  v.nx = nx;
  v.ny = ny;
  v.nz = nz;
  v.sx = v.sy = 1.0;
  v.sz = 5.0;
  v.data.resize(v.size());
  Rng rng(1);
  for (int k = 0; k < nz; ++k)
    for (int j = 0; j < ny; ++j)
      for (int i = 0; i < nx; ++i) {
        const double cx = i - nx / 2.0, cy = j - ny / 2.0;
        const double bump = 600.0 * std::exp(-(cx * cx + cy * cy) / 80.0);
        v.at(i, j, k) = static_cast<float>(200.0 + bump + 15.0 * rng.normal());
      }
  return v;
}

Tensor random_batch(const NetworkSpec& spec, int n, std::uint64_t seed) {
  Tensor batch;
  batch.resize(n, spec.in_channels, spec.in_px, spec.in_px);
  Rng rng(seed);
  for (auto& x : batch.data) x = static_cast<float>(rng.uniform(0, 1));
  return batch;
}

void BM_ForwardEval64(benchmark::State& state) {
  const NetworkSpec spec = NetworkSpec::reference();
  const ModelParams params = init_params<float>(spec, 2);
  const Tensor batch = random_batch(spec, 64, 3);
  Workspace ws;
  for (auto _ : state) {
    forward(params, batch, Mode::kEval, ws, nullptr);
    benchmark::DoNotOptimize(ws.acts.back().data.data());
  }
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_ForwardEval64)->Unit(benchmark::kMillisecond);

void BM_TrainStep64(benchmark::State& state) {
  const NetworkSpec spec = NetworkSpec::reference();
  ModelParams params = init_params<float>(spec, 2);
  params.dropconnect_keep = 0.5;
  const Tensor batch = random_batch(spec, 64, 3);
  std::vector<int> labels(64);
  for (int i = 0; i < 64; ++i) labels[i] = i & 1;
  Workspace ws;
  ModelParams grads;
  Rng rng(4);
  for (auto _ : state) {
    forward(params, batch, Mode::kTrain, ws, &rng);
    backward(params, labels, ws, grads);
    benchmark::DoNotOptimize(grads.weights.data());
  }
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_TrainStep64)->Unit(benchmark::kMillisecond);

void BM_WatershedSlice(benchmark::State& state) {
  const Volume v = demo_volume(96, 96, 1);
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(v.nx) * v.ny, 1);
  SliceView s;
  s.hu = v.data.data();
  s.mask = mask.data();
  s.nx = v.nx;
  s.ny = v.ny;
  for (auto _ : state) {
    auto segs = watershed_subsegments(s, 0, 1.0);
    benchmark::DoNotOptimize(segs.data());
  }
}
BENCHMARK(BM_WatershedSlice)->Unit(benchmark::kMicrosecond);

void BM_ExtractPatch(benchmark::State& state) {
  const Volume v = demo_volume(64, 64, 8);
  const Vec3 center = v.voxel_center(32, 32, 4);
  for (auto _ : state) {
    Patch p = extract_patch(v, center, 40.0, {1.0, -0.5}, 33.0, 32, 3);
    benchmark::DoNotOptimize(p.data.data());
  }
}
BENCHMARK(BM_ExtractPatch)->Unit(benchmark::kMicrosecond);

void BM_SampleViews100(benchmark::State& state) {
  const Volume v = demo_volume(64, 64, 8);
  const Vec3 center = v.voxel_center(32, 32, 4);
  const ViewSampleConfig cfg;
  for (auto _ : state) {
    auto patches = sample_views(v, center, 0, cfg, 5);
    benchmark::DoNotOptimize(patches.data());
  }
  state.SetItemsProcessed(state.iterations() * 100);
}
BENCHMARK(BM_SampleViews100)->Unit(benchmark::kMillisecond);

void BM_ResampleIsometric(benchmark::State& state) {
  const Volume v = demo_volume(64, 64, 16);
  for (auto _ : state) {
    Volume iso = resample_isometric(v, 1.0);
    benchmark::DoNotOptimize(iso.data.data());
  }
}
BENCHMARK(BM_ResampleIsometric)->Unit(benchmark::kMillisecond);

void BM_AggregateViews(benchmark::State& state) {
  Rng rng(6);
  std::vector<double> probs(100);
  for (auto& p : probs) p = rng.uniform(0, 1);
  for (auto _ : state) {
    const double m = aggregate_views(probs);
    benchmark::DoNotOptimize(m);
  }
}
BENCHMARK(BM_AggregateViews);

}  // namespace

BENCHMARK_MAIN();
