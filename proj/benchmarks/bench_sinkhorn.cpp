#include <benchmark/benchmark.h>

#include "exact/clues.h"
#include "exact/rng.h"

namespace {

Eigen::ArrayXd unit_rows(exact::Rng& rng, std::size_t rows, std::size_t d) {
  Eigen::ArrayXd a(static_cast<Eigen::Index>(rows * d));
  for (std::size_t r = 0; r < rows; ++r) {
    double n2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double v = rng.normal();
      a[static_cast<Eigen::Index>(r * d + j)] = v;
      n2 += v * v;
    }
    for (std::size_t j = 0; j < d; ++j) a[static_cast<Eigen::Index>(r * d + j)] /= std::sqrt(n2);
  }
  return a;
}

void BM_SinkhornAssign(benchmark::State& state) {
  std::size_t Np = static_cast<std::size_t>(state.range(0));
  std::size_t Nk = static_cast<std::size_t>(state.range(1));
  std::size_t d = 32;
  exact::Rng rng(1, "bench.sinkhorn");
  Eigen::ArrayXd protos = unit_rows(rng, Np, d);
  Eigen::ArrayXd emb = unit_rows(rng, Nk, d);
  for (auto _ : state) {
    auto am = exact::sinkhorn_assign(protos, Np, emb, Nk, d, 0.05, 50, 1e-4);
    benchmark::DoNotOptimize(am);
  }
}
BENCHMARK(BM_SinkhornAssign)->Args({2, 64})->Args({2, 512})->Args({4, 512});

}  // namespace
