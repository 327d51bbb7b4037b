#pragma once

#include <cstdint>
#include <vector>

#include "exact/ad.h"
#include "exact/tensor.h"

namespace exact {

struct FilterThresholds {
  double mu_low = 0.2;
  double mu_high = 0.4;
  void validate() const;
};

// Tri-state values of the filtered CAM.
inline constexpr std::uint8_t kFilterBackground = 0;
inline constexpr std::uint8_t kFilterForeground = 1;
inline constexpr std::uint8_t kFilterIgnore = 2;

enum class CamSource { Fused, TemporalOnly, SpatialOnly };

// Per-sample CAM products, kept as plain data for export and plotting.
// Dense maps are [P x K] row-major over the patch grid.
struct CamStack {
  std::size_t grid_h = 0, grid_w = 0, K = 0;
  Eigen::ArrayXd cam_temporal;
  Eigen::ArrayXd cam_spatial;
  Eigen::ArrayXd cam_fused;
  std::vector<std::uint8_t> cam_filtered;  // tri-state
  Eigen::ArrayXd cam_propagated;
  Eigen::ArrayXd cb_cam;
};

// score(i,k) = ReLU(w_k . token(i,k)); same weights as the global classifier.
// tokens must be [P, K, d].
ad::Value dense_cam(const ad::Value& tokens, const ad::Value& classifier_weights);

// Per-class per-image min-max to [0,1]; constant channels map to zeros.
// groups > 1 normalizes per image inside a folded batch.
ad::Value normalize_cam(const ad::Value& raw, std::size_t groups = 1);

// Element-wise mean then optional per-class renormalization; the source flag
// reproduces the temporal-only / spatial-only ablation rows.
ad::Value fuse_cams(const ad::Value& cam_temporal, const ad::Value& cam_spatial,
                    CamSource source = CamSource::Fused, bool renormalize = true,
                    std::size_t groups = 1);

// Reliable-region split of a normalized CAM. Absent classes are entirely
// IGNORE.
std::vector<std::uint8_t> filter_cam(const Eigen::ArrayXd& cam_fused, std::size_t positions,
                                     std::size_t K, const FilterThresholds& thresholds,
                                     const std::vector<double>& image_labels);

// Zeroes channels of absent classes (CAM maps are modified in place).
void mask_absent_classes(Eigen::ArrayXd& cam, std::size_t positions, std::size_t K,
                         const std::vector<double>& image_labels);

// Patch-level argmax with a global background threshold; ties resolve to the
// lowest class index. cam must be >= 0 with absent classes zeroed.
MaskTensor pseudo_mask(const Eigen::ArrayXd& cam, std::size_t grid_h, std::size_t grid_w,
                       std::size_t K, double theta_bg, const std::vector<double>& image_labels);

// Nearest upsampling of a patch-level mask to pixels.
MaskTensor upsample_mask(const MaskTensor& patch_mask, std::size_t patch_h, std::size_t patch_w);

// Position-pooled multilabel BCE over the pre-activation dense scores,
// summed over the temporal and spatial sources.
ad::Value aux_cls_loss(const ad::Value& scores_temporal, const ad::Value& scores_spatial,
                       const std::vector<double>& image_labels);

}  // namespace exact
