// Serial reference kernels against their OpenMP twins.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "occlumesh/kernels.hpp"

using namespace occlumesh;
using kernels::Point3;

namespace {

std::vector<double> uniform(std::size_t n, double lo, double hi, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

std::vector<Point3> cloud(std::size_t n, std::uint64_t seed) {
  const auto v = uniform(3 * n, -0.1, 0.1, seed);
  std::vector<Point3> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = {v[3 * i], v[3 * i + 1], v[3 * i + 2]};
  return out;
}

template <bool Parallel>
void BM_NeusWeights(benchmark::State& state) {
  const std::int64_t rays = state.range(0), samples = 128;
  const auto sdf = uniform(rays * samples, -0.5, 0.5, 1);
  std::vector<double> w(sdf.size());
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::neus_weights_parallel(sdf, 50.0, rays, samples, w);
    else
      kernels::neus_weights_serial(sdf, 50.0, rays, samples, w);
    benchmark::DoNotOptimize(w.data());
  }
  state.SetItemsProcessed(state.iterations() * rays);
}

template <bool Parallel>
void BM_BilinearGather(benchmark::State& state) {
  const std::int64_t c = 32, h = 64, w = 64;
  const auto map = uniform(c * h * w, 0, 1, 2);
  const auto uv = uniform(2 * state.range(0), 0, 63, 3);
  std::vector<std::array<double, 2>> coords(state.range(0));
  for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = {uv[2 * i], uv[2 * i + 1]};
  std::vector<double> out(coords.size() * c);
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::bilinear_gather_parallel(map, c, h, w, coords, out);
    else
      kernels::bilinear_gather_serial(map, c, h, w, coords, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * coords.size());
}

template <bool Parallel>
void BM_Im2col(benchmark::State& state) {
  const std::int64_t size = state.range(0);
  const kernels::ConvGeometry geo{16, size, size, 3, 2, 1, (size + 1) / 2, (size + 1) / 2};
  const auto x = uniform(geo.cin * size * size, -1, 1, 4);
  tensor::RowMatrix cols;
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::im2col_parallel(x, geo, cols);
    else
      kernels::im2col_serial(x, geo, cols);
    benchmark::DoNotOptimize(cols.data());
  }
}

// The serial twin is the O(n^2) brute force; the parallel one is grid-accelerated.
template <bool Parallel>
void BM_NearestNeighbour(benchmark::State& state) {
  const auto q = cloud(state.range(0), 5), r = cloud(state.range(0), 6);
  for (auto _ : state) {
    auto d = Parallel ? kernels::nearest_sq_dist_parallel(q, r) : kernels::nearest_sq_dist_serial(q, r);
    benchmark::DoNotOptimize(d.data());
  }
  state.SetItemsProcessed(state.iterations() * q.size());
}

template <bool Parallel>
void BM_SsimMap(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto a = uniform(n * n, 0, 1, 7), b = uniform(n * n, 0, 1, 8);
  for (auto _ : state) {
    auto m = Parallel ? kernels::ssim_map_parallel(a, b, n, n) : kernels::ssim_map_serial(a, b, n, n);
    benchmark::DoNotOptimize(m.data());
  }
}

}  // namespace

BENCHMARK(BM_NeusWeights<false>)->Arg(1024)->Arg(8192);
BENCHMARK(BM_NeusWeights<true>)->Arg(1024)->Arg(8192);
BENCHMARK(BM_BilinearGather<false>)->Arg(1 << 14);
BENCHMARK(BM_BilinearGather<true>)->Arg(1 << 14);
BENCHMARK(BM_Im2col<false>)->Arg(64)->Arg(128);
BENCHMARK(BM_Im2col<true>)->Arg(64)->Arg(128);
BENCHMARK(BM_NearestNeighbour<false>)->Arg(2000);
BENCHMARK(BM_NearestNeighbour<true>)->Arg(2000)->Arg(30000);
BENCHMARK(BM_SsimMap<false>)->Arg(128);
BENCHMARK(BM_SsimMap<true>)->Arg(128);

BENCHMARK_MAIN();
