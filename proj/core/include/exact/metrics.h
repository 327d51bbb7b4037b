#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "exact/tensor.h"

namespace exact {

// Confusion accumulator over (K+1)-way masks, rows = ground truth,
// cols = prediction. Accumulators merge by addition.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t n_classes);

  // Prediction pixels carrying kIgnoreLabel count as their ground-truth
  // class (they were excluded from the loss, not wrong).
  void accumulate(const MaskTensor& pred, const MaskTensor& gt);
  void merge(const ConfusionMatrix& other);

  std::size_t n_classes() const { return n_; }
  std::int64_t at(std::size_t gt, std::size_t pred) const { return counts_[gt * n_ + pred]; }
  std::int64_t& at(std::size_t gt, std::size_t pred) { return counts_[gt * n_ + pred]; }
  std::int64_t total() const;

 private:
  std::size_t n_;
  std::vector<std::int64_t> counts_;
};

struct EvalReport {
  std::size_t n_classes = 0;  // K+1 including background
  std::vector<std::int64_t> confusion;
  double oa = 0.0;
  double miou = 0.0;
  std::vector<double> recall, precision, iou, fdr;  // length K+1
  bool background_in_miou = true;
};

// OA = trace/total; IoU_k = TP/(TP+FP+FN) over classes with a nonzero
// denominator; FDR_k = FP/(FP+TP), 0 when TP+FP = 0.
EvalReport finalize(const ConfusionMatrix& cm, bool background_in_miou = true);

// weak mIoU / full mIoU (the Tab. 1b-style ratio).
double supervision_ratio(double weak_miou, double full_miou);

std::string report_text(const EvalReport& r);
// Writes <base>.txt (one metric per line) and <base>.kv (machine-readable).
void write_report(const EvalReport& r, const std::string& base_path);
EvalReport read_report_kv(const std::string& kv_path);

}  // namespace exact
