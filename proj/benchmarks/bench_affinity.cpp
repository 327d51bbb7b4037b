#include <benchmark/benchmark.h>

#include "exact/affinity.h"
#include "exact/rng.h"

namespace {

void BM_PairwiseAffinity(benchmark::State& state) {
  std::size_t gh = 8, gw = 8, d = 32;
  exact::Rng rng(1, "bench.affinity");
  Eigen::ArrayXd v(static_cast<Eigen::Index>(gh * gw * d));
  for (auto& x : v) x = rng.normal();
  for (auto _ : state) {
    exact::LocalAffinity aff = exact::pairwise_affinity(v, gh, gw, d);
    benchmark::DoNotOptimize(aff.weights.data());
  }
}
BENCHMARK(BM_PairwiseAffinity);

void BM_Propagate(benchmark::State& state) {
  std::size_t gh = 8, gw = 8, P = gh * gw, K = 4, d = 32;
  exact::Rng rng(1, "bench.propagate");
  Eigen::ArrayXd v(static_cast<Eigen::Index>(P * d));
  for (auto& x : v) x = rng.normal();
  std::vector<exact::LocalAffinity> aff(K, exact::pairwise_affinity(v, gh, gw, d));
  Eigen::ArrayXd cam(static_cast<Eigen::Index>(P * K));
  for (auto& x : cam) x = rng.uniform(0.0, 1.0);
  for (auto _ : state) {
    Eigen::ArrayXd out = exact::propagate(cam, P, K, aff, 3);
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_Propagate);

}  // namespace
