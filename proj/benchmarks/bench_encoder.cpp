#include <benchmark/benchmark.h>

#include "exact/train.h"

namespace {

exact::ModelConfig desk_model() {
  exact::Config c = exact::desk_preset();
  return exact::ModelConfig::from_config(c);
}

void BM_ForwardSingle(benchmark::State& state) {
  exact::ModelConfig mc = desk_model();
  exact::Rng init(1, "bench.init");
  exact::TSViT model(mc, init);
  exact::Tensor series({mc.T, mc.C, mc.input_h, mc.input_w});
  exact::Rng rng(2, "bench.series");
  for (auto& v : series.data) v = rng.uniform(0.0, 1.0);
  for (auto _ : state) {
    exact::EncoderOutputs out = model.forward(series);
    benchmark::DoNotOptimize(out.logits.data());
  }
}
BENCHMARK(BM_ForwardSingle);

void BM_ForwardBatchWithBackward(benchmark::State& state) {
  exact::ModelConfig mc = desk_model();
  exact::Rng init(1, "bench.init");
  exact::TSViT model(mc, init);
  std::size_t B = static_cast<std::size_t>(state.range(0));
  std::vector<exact::Tensor> series(B, exact::Tensor({mc.T, mc.C, mc.input_h, mc.input_w}));
  exact::Rng rng(2, "bench.series");
  std::vector<const exact::Tensor*> ptrs;
  for (auto& s : series) {
    for (auto& v : s.data) v = rng.uniform(0.0, 1.0);
    ptrs.push_back(&s);
  }
  std::vector<double> targets(B * mc.K, 1.0);
  for (auto _ : state) {
    auto out = model.forward_batch(ptrs);
    exact::ad::Value loss = exact::ad::bce_with_logits(out.logits, targets);
    model.params().zero_grad();
    exact::ad::backward(loss);
    benchmark::DoNotOptimize(loss.scalar());
  }
}
BENCHMARK(BM_ForwardBatchWithBackward)->Arg(4)->Arg(8);

}  // namespace
