#pragma once

#include <string>
#include <vector>

#include "exact/affinity.h"
#include "exact/cam.h"
#include "exact/clues.h"
#include "exact/config.h"
#include "exact/metrics.h"
#include "exact/sits_data.h"
#include "exact/tsvit.h"

namespace exact {

enum class AffinitySource { TemporalAware, LowLevel };
enum class PseudoMode { RawCam, CbCam };

struct TrainConfig {
  std::size_t total_iters = 400;
  std::size_t warmup_iters = 108;  // 27% of total, mirroring 4k of 15k
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double lambda1 = 0.01;   // clue-based contrastive weight
  double lambda2 = 0.015;  // temporal-aware alignment weight
  double eta = 0.05;       // entropic regularization
  double tau = 0.1;        // similarity temperature
  double alpha = 0.95;     // prototype momentum (paper preset: 0.999)
  std::size_t np = 2;      // prototypes per class and polarity
  double mu_low = 0.2, mu_high = 0.4;
  double theta_bg = 0.3;
  std::uint64_t seed = 0;
  std::size_t sinkhorn_iters = 50;
  double sinkhorn_tol = 1e-4;
  std::size_t propagate_iters = 3;
  // Ablation axes.
  bool disable_cbl = false;
  bool disable_tap = false;
  CamSource cam_source = CamSource::Fused;
  AffinitySource affinity_source = AffinitySource::TemporalAware;
  // Recorded interpretation switches.
  bool include_positive_in_denominator = false;
  bool renormalize_after_fusion = true;
  AttentionLayerMode attention_layer_mode = AttentionLayerMode::Last;
  SigmaMode sigma_mode = SigmaMode::VectorStd;
  bool cbcam_class_agnostic = false;

  void validate() const;
  static TrainConfig from_config(const Config& c);
  void to_config(Config& c) const;
};

struct SegConfig {
  std::size_t total_iters = 300;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;

  static SegConfig from_config(const Config& c);
  void to_config(Config& c) const;
};

// L = L_cls + L_cls_aux + lambda1 L_cbl [iter >= warmup] + lambda2 L_tap,
// with the ablation flags zeroing their terms.
ad::Value total_loss(const ad::Value& l_cls, const ad::Value& l_cls_aux, const ad::Value& l_cbl,
                     const ad::Value& l_tap, const TrainConfig& cfg, std::size_t iter);

double cosine_lr(double base_lr, std::size_t iter, std::size_t total_iters);

struct ClassifierArtifacts {
  std::string checkpoint_dir;
  std::string bank_dir;
  std::string log_path;
  double final_loss = 0.0;
  double train_f1 = 0.0;
};

// Full training pipeline per iteration: forward, raw CAMs, filtering,
// Sinkhorn clustering and bank momentum update, contrastive and alignment
// losses, one optimizer step. Deterministic given the seed.
ClassifierArtifacts train_classifier(const DatasetManifest& manifest, const TrainConfig& tcfg,
                                     const ModelConfig& mcfg, const std::string& out_dir,
                                     bool quiet = true);

struct PseudoArtifacts {
  std::string mask_dir;
  EvalReport report;  // against ground truth on the given split
};

// bank_dir may be empty in raw-CAM mode; CB-CAM mode requires it.
PseudoArtifacts generate_pseudo_labels(const std::string& checkpoint_dir,
                                       const std::string& bank_dir,
                                       const DatasetManifest& manifest, PseudoMode mode,
                                       const TrainConfig& cfg, const std::string& out_dir);

struct SegArtifacts {
  std::string checkpoint_dir;
  EvalReport test_report;
};

// pseudo_mask_dir empty => supervise with ground-truth masks (the fully
// supervised reference point for the ratio metric).
SegArtifacts train_segmentation(const DatasetManifest& train_manifest,
                                const std::string& pseudo_mask_dir,
                                const DatasetManifest& test_manifest, const ModelConfig& mcfg,
                                const SegConfig& scfg, const std::string& out_dir,
                                bool quiet = true);

// Config presets selected by the CLI --preset flag.
Config desk_preset();
Config paper_preset();

}  // namespace exact
