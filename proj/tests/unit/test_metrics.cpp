#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "exact/error.h"
#include "exact/metrics.h"
#include "exact/rng.h"

using namespace exact;

namespace {

MaskTensor mask_of(std::initializer_list<std::uint16_t> vals, std::size_t h, std::size_t w) {
  MaskTensor m(h, w);
  std::size_t i = 0;
  for (auto v : vals) m.data[i++] = v;
  return m;
}

}  // namespace

TEST_CASE("accumulate counts per (gt, pred) cell") {
  ConfusionMatrix cm(4);
  MaskTensor gt = mask_of({2, 2, 2, 2}, 2, 2);
  cm.accumulate(gt, gt);
  CHECK(cm.at(2, 2) == 4);
  CHECK(cm.total() == 4);

  // Empty pair leaves the matrix unchanged.
  MaskTensor empty(0, 0);
  cm.accumulate(empty, empty);
  CHECK(cm.total() == 4);

  // One error: gt 1 predicted as 0.
  ConfusionMatrix cm2(4);
  cm2.accumulate(mask_of({0, 0, 0, 1}, 2, 2), mask_of({0, 0, 1, 1}, 2, 2));
  CHECK(cm2.at(1, 0) == 1);
  CHECK(cm2.at(0, 0) == 2);
  CHECK(cm2.at(1, 1) == 1);
}

TEST_CASE("accumulate contract errors") {
  ConfusionMatrix cm(3);
  MaskTensor a(2, 2), b(2, 3);
  CHECK_THROWS_AS(cm.accumulate(a, b), ContractError);
  MaskTensor bad(2, 2);
  bad.data[0] = 7;
  CHECK_THROWS_AS(cm.accumulate(bad, a), ContractError);
}

TEST_CASE("finalize derives the supplement FDR formula") {
  // FP=1, TP=3 -> FDR = 0.25.
  ConfusionMatrix cm(2);
  cm.at(1, 1) = 3;
  cm.at(0, 1) = 1;
  cm.at(0, 0) = 6;
  EvalReport r = finalize(cm);
  CHECK(r.fdr[1] == doctest::Approx(0.25));
  CHECK(r.precision[1] == doctest::Approx(0.75));
}

TEST_CASE("perfect prediction gives OA = mIoU = 1 and FDR = 0") {
  ConfusionMatrix cm(3);
  cm.at(0, 0) = 10;
  cm.at(1, 1) = 5;
  cm.at(2, 2) = 7;
  EvalReport r = finalize(cm);
  CHECK(r.oa == 1.0);
  CHECK(r.miou == 1.0);
  for (double f : r.fdr) CHECK(f == 0.0);
}

TEST_CASE("hand-counted 2x2 example: one flipped class-1 pixel") {
  // Classes {0,1}; gt has two class-1 pixels; prediction flips one to 0.
  ConfusionMatrix cm(2);
  cm.accumulate(mask_of({0, 0, 1, 0}, 2, 2), mask_of({0, 0, 1, 1}, 2, 2));
  EvalReport r = finalize(cm);
  CHECK(r.oa == doctest::Approx(0.75));
  CHECK(r.iou[1] == doctest::Approx(0.5));
}

TEST_CASE("FDR is zero when TP+FP is zero") {
  ConfusionMatrix cm(3);
  cm.at(0, 0) = 4;
  cm.at(2, 0) = 1;  // class 1 never predicted
  EvalReport r = finalize(cm);
  CHECK(r.fdr[1] == 0.0);
}

TEST_CASE("empty confusion is an evaluation error; zero full mIoU is a ratio error") {
  ConfusionMatrix cm(3);
  CHECK_THROWS_AS(finalize(cm), EvalError);
  CHECK_THROWS_AS(supervision_ratio(0.5, 0.0), EvalError);
}

TEST_CASE("supervision ratio reproduces the reported proportion") {
  CHECK(supervision_ratio(62.0, 65.4) == doctest::Approx(0.948).epsilon(1e-3));
  CHECK(supervision_ratio(0.7, 0.7) == 1.0);
  CHECK(supervision_ratio(0.0, 0.5) == 0.0);
}

TEST_CASE("merging accumulators equals accumulating the concatenated stream (property)") {
  Rng rng(5, "metrics");
  for (int trial = 0; trial < 20; ++trial) {
    ConfusionMatrix whole(4), part1(4), part2(4);
    MaskTensor gt1(4, 4), pred1(4, 4), gt2(4, 4), pred2(4, 4);
    for (std::size_t i = 0; i < 16; ++i) {
      gt1.data[i] = static_cast<std::uint16_t>(rng.uniform_index(4));
      pred1.data[i] = static_cast<std::uint16_t>(rng.uniform_index(4));
      gt2.data[i] = static_cast<std::uint16_t>(rng.uniform_index(4));
      pred2.data[i] = static_cast<std::uint16_t>(rng.uniform_index(4));
    }
    whole.accumulate(pred1, gt1);
    whole.accumulate(pred2, gt2);
    part1.accumulate(pred1, gt1);
    part2.accumulate(pred2, gt2);
    part1.merge(part2);
    for (std::size_t g = 0; g < 4; ++g)
      for (std::size_t p = 0; p < 4; ++p) CHECK(whole.at(g, p) == part1.at(g, p));
  }
}

TEST_CASE("pixel order does not matter (property)") {
  Rng rng(6, "metrics");
  MaskTensor gt(6, 6), pred(6, 6);
  for (std::size_t i = 0; i < 36; ++i) {
    gt.data[i] = static_cast<std::uint16_t>(rng.uniform_index(3));
    pred.data[i] = static_cast<std::uint16_t>(rng.uniform_index(3));
  }
  ConfusionMatrix a(3);
  a.accumulate(pred, gt);
  // Shuffle both with the same permutation.
  std::vector<std::size_t> perm(36);
  for (std::size_t i = 0; i < 36; ++i) perm[i] = i;
  rng.shuffle(perm);
  MaskTensor gt2(6, 6), pred2(6, 6);
  for (std::size_t i = 0; i < 36; ++i) {
    gt2.data[i] = gt.data[perm[i]];
    pred2.data[i] = pred.data[perm[i]];
  }
  ConfusionMatrix b(3);
  b.accumulate(pred2, gt2);
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t p = 0; p < 3; ++p) CHECK(a.at(g, p) == b.at(g, p));
}

TEST_CASE("ignored prediction pixels count as their ground-truth class") {
  ConfusionMatrix cm(3);
  MaskTensor gt = mask_of({1, 2, 0, 1}, 2, 2);
  MaskTensor pred = mask_of({1, kIgnoreLabel, 0, 2}, 2, 2);
  cm.accumulate(pred, gt);
  CHECK(cm.at(2, 2) == 1);  // the ignored pixel
  CHECK(cm.at(1, 2) == 1);
}

TEST_CASE("background flag controls the mIoU average") {
  ConfusionMatrix cm(2);
  cm.at(0, 0) = 8;
  cm.at(1, 1) = 1;
  cm.at(1, 0) = 1;  // class-1 IoU = 0.5, class-0 IoU = 8/9
  EvalReport with_bg = finalize(cm, true);
  EvalReport without_bg = finalize(cm, false);
  CHECK(with_bg.miou == doctest::Approx((8.0 / 9.0 + 0.5) / 2.0));
  CHECK(without_bg.miou == doctest::Approx(0.5));
}

TEST_CASE("report files round-trip the key metrics") {
  namespace fs = std::filesystem;
  ConfusionMatrix cm(2);
  cm.at(0, 0) = 3;
  cm.at(1, 1) = 2;
  cm.at(1, 0) = 1;
  EvalReport r = finalize(cm);
  fs::path dir = fs::temp_directory_path() / "exact_test_metrics";
  fs::create_directories(dir);
  write_report(r, (dir / "report").string());
  EvalReport back = read_report_kv((dir / "report.kv").string());
  CHECK(back.oa == r.oa);
  CHECK(back.miou == r.miou);
  CHECK(back.confusion == r.confusion);
  std::string text = report_text(r);
  CHECK(text.find("oa ") == 0);
  CHECK(text.find("fdr") != std::string::npos);
}
