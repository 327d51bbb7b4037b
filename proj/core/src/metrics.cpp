#include "exact/metrics.h"

#include <fstream>
#include <numeric>
#include <sstream>

#include "exact/config.h"
#include "exact/error.h"

namespace exact {

ConfusionMatrix::ConfusionMatrix(std::size_t n_classes) : n_(n_classes), counts_(n_ * n_, 0) {
  if (n_ < 1) throw ContractError("confusion: need at least one class");
}

void ConfusionMatrix::accumulate(const MaskTensor& pred, const MaskTensor& gt) {
  if (pred.dims != gt.dims) throw ContractError("confusion: mask shape mismatch");
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    std::uint16_t g = gt.data[i];
    std::uint16_t p = pred.data[i];
    if (g >= n_) throw ContractError("confusion: ground-truth value out of range");
    if (p == kIgnoreLabel) p = g;
    if (p >= n_) throw ContractError("confusion: prediction value out of range");
    ++counts_[g * n_ + p];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw ContractError("confusion: class count mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::int64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0});
}

EvalReport finalize(const ConfusionMatrix& cm, bool background_in_miou) {
  std::int64_t total = cm.total();
  if (total == 0) throw EvalError("finalize: empty confusion matrix");
  std::size_t n = cm.n_classes();

  EvalReport r;
  r.n_classes = n;
  r.background_in_miou = background_in_miou;
  r.confusion.resize(n * n);
  for (std::size_t g = 0; g < n; ++g)
    for (std::size_t p = 0; p < n; ++p) r.confusion[g * n + p] = cm.at(g, p);

  std::int64_t trace = 0;
  for (std::size_t k = 0; k < n; ++k) trace += cm.at(k, k);
  r.oa = static_cast<double>(trace) / static_cast<double>(total);

  r.recall.assign(n, 0.0);
  r.precision.assign(n, 0.0);
  r.iou.assign(n, 0.0);
  r.fdr.assign(n, 0.0);
  double iou_sum = 0.0;
  std::size_t iou_count = 0;
  for (std::size_t k = 0; k < n; ++k) {
    std::int64_t tp = cm.at(k, k);
    std::int64_t fp = 0, fn = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == k) continue;
      fp += cm.at(j, k);
      fn += cm.at(k, j);
    }
    r.recall[k] = (tp + fn) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    r.precision[k] = (tp + fp) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    r.fdr[k] = (tp + fp) > 0 ? static_cast<double>(fp) / static_cast<double>(tp + fp) : 0.0;
    if (tp + fp + fn > 0) {
      r.iou[k] = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
      if (background_in_miou || k != 0) {
        iou_sum += r.iou[k];
        ++iou_count;
      }
    }
  }
  r.miou = iou_count > 0 ? iou_sum / static_cast<double>(iou_count) : 0.0;
  return r;
}

double supervision_ratio(double weak_miou, double full_miou) {
  if (full_miou <= 0.0) throw EvalError("ratio: fully supervised mIoU must be > 0");
  return weak_miou / full_miou;
}

std::string report_text(const EvalReport& r) {
  std::ostringstream out;
  out << "oa " << format_double(r.oa) << "\n";
  out << "miou " << format_double(r.miou) << "\n";
  out << "miou_includes_background " << (r.background_in_miou ? "true" : "false") << "\n";
  for (std::size_t k = 0; k < r.n_classes; ++k) {
    out << "class " << k << " recall " << format_double(r.recall[k]) << " precision "
        << format_double(r.precision[k]) << " iou " << format_double(r.iou[k]) << " fdr "
        << format_double(r.fdr[k]) << "\n";
  }
  out << "confusion_rows_gt_cols_pred\n";
  for (std::size_t g = 0; g < r.n_classes; ++g) {
    out << "row " << g;
    for (std::size_t p = 0; p < r.n_classes; ++p) out << " " << r.confusion[g * r.n_classes + p];
    out << "\n";
  }
  return out.str();
}

void write_report(const EvalReport& r, const std::string& base_path) {
  {
    std::ofstream out(base_path + ".txt", std::ios::binary);
    if (!out) throw FormatError("report: cannot write " + base_path + ".txt");
    out << report_text(r);
  }
  Config kv;
  kv.set_int("report.n_classes", static_cast<std::int64_t>(r.n_classes));
  kv.set_double("report.oa", r.oa);
  kv.set_double("report.miou", r.miou);
  kv.set_bool("report.miou_includes_background", r.background_in_miou);
  for (std::size_t k = 0; k < r.n_classes; ++k) {
    std::string base = "report.class" + std::to_string(k);
    kv.set_double(base + ".recall", r.recall[k]);
    kv.set_double(base + ".precision", r.precision[k]);
    kv.set_double(base + ".iou", r.iou[k]);
    kv.set_double(base + ".fdr", r.fdr[k]);
  }
  for (std::size_t g = 0; g < r.n_classes; ++g)
    for (std::size_t p = 0; p < r.n_classes; ++p)
      kv.set_int("report.confusion." + std::to_string(g) + "." + std::to_string(p),
                 r.confusion[g * r.n_classes + p]);
  kv.write_file(base_path + ".kv");
}

EvalReport read_report_kv(const std::string& kv_path) {
  Config kv = Config::from_file(kv_path);
  EvalReport r;
  r.n_classes = static_cast<std::size_t>(kv.get_int("report.n_classes", 0));
  if (r.n_classes == 0) throw FormatError("report: missing class count in " + kv_path);
  r.oa = kv.get_double("report.oa", 0.0);
  r.miou = kv.get_double("report.miou", 0.0);
  r.background_in_miou = kv.get_bool("report.miou_includes_background", true);
  r.recall.resize(r.n_classes);
  r.precision.resize(r.n_classes);
  r.iou.resize(r.n_classes);
  r.fdr.resize(r.n_classes);
  for (std::size_t k = 0; k < r.n_classes; ++k) {
    std::string base = "report.class" + std::to_string(k);
    r.recall[k] = kv.get_double(base + ".recall", 0.0);
    r.precision[k] = kv.get_double(base + ".precision", 0.0);
    r.iou[k] = kv.get_double(base + ".iou", 0.0);
    r.fdr[k] = kv.get_double(base + ".fdr", 0.0);
  }
  r.confusion.assign(r.n_classes * r.n_classes, 0);
  for (std::size_t g = 0; g < r.n_classes; ++g)
    for (std::size_t p = 0; p < r.n_classes; ++p)
      r.confusion[g * r.n_classes + p] =
          kv.get_int("report.confusion." + std::to_string(g) + "." + std::to_string(p), 0);
  return r;
}

}  // namespace exact
