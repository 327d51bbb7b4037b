#include "exact/cam.h"

#include "exact/error.h"

namespace exact {

void FilterThresholds::validate() const {
  if (!(0.0 <= mu_low && mu_low < mu_high && mu_high <= 1.0))
    throw ConfigError("filter: thresholds must satisfy 0 <= mu_low < mu_high <= 1");
}

ad::Value dense_cam(const ad::Value& tokens, const ad::Value& classifier_weights) {
  return ad::relu(ad::dense_scores(tokens, classifier_weights));
}

ad::Value normalize_cam(const ad::Value& raw, std::size_t groups) {
  return ad::minmax_norm_cols_grouped(raw, groups);
}

ad::Value fuse_cams(const ad::Value& cam_temporal, const ad::Value& cam_spatial, CamSource source,
                    bool renormalize, std::size_t groups) {
  if (source == CamSource::TemporalOnly) return cam_temporal;
  if (source == CamSource::SpatialOnly) return cam_spatial;
  if (cam_temporal.shape() != cam_spatial.shape())
    throw ContractError("fuse: CAM shape mismatch");
  ad::Value mean = ad::scale(ad::add(cam_temporal, cam_spatial), 0.5);
  return renormalize ? ad::minmax_norm_cols_grouped(mean, groups) : mean;
}

std::vector<std::uint8_t> filter_cam(const Eigen::ArrayXd& cam_fused, std::size_t positions,
                                     std::size_t K, const FilterThresholds& thresholds,
                                     const std::vector<double>& image_labels) {
  thresholds.validate();
  if (static_cast<std::size_t>(cam_fused.size()) != positions * K)
    throw ContractError("filter: CAM size mismatch");
  if (image_labels.size() != K) throw ContractError("filter: label vector size mismatch");
  std::vector<std::uint8_t> out(positions * K, kFilterIgnore);
  for (std::size_t k = 0; k < K; ++k) {
    if (image_labels[k] <= 0.5) continue;  // absent classes stay IGNORE
    for (std::size_t p = 0; p < positions; ++p) {
      double m = cam_fused[static_cast<Eigen::Index>(p * K + k)];
      if (m <= thresholds.mu_low)
        out[p * K + k] = kFilterBackground;
      else if (m >= thresholds.mu_high)
        out[p * K + k] = kFilterForeground;
    }
  }
  return out;
}

void mask_absent_classes(Eigen::ArrayXd& cam, std::size_t positions, std::size_t K,
                         const std::vector<double>& image_labels) {
  if (static_cast<std::size_t>(cam.size()) != positions * K)
    throw ContractError("cam: size mismatch");
  for (std::size_t k = 0; k < K; ++k) {
    if (image_labels[k] > 0.5) continue;
    for (std::size_t p = 0; p < positions; ++p) cam[static_cast<Eigen::Index>(p * K + k)] = 0.0;
  }
}

MaskTensor pseudo_mask(const Eigen::ArrayXd& cam, std::size_t grid_h, std::size_t grid_w,
                       std::size_t K, double theta_bg, const std::vector<double>& image_labels) {
  std::size_t P = grid_h * grid_w;
  if (static_cast<std::size_t>(cam.size()) != P * K) throw ContractError("pseudo_mask: size mismatch");
  if (image_labels.size() != K) throw ContractError("pseudo_mask: label vector size mismatch");
  MaskTensor out(grid_h, grid_w);
  for (std::size_t p = 0; p < P; ++p) {
    double best = -1.0;
    std::size_t best_k = 0;
    for (std::size_t k = 0; k < K; ++k) {
      if (image_labels[k] <= 0.5) continue;
      double v = cam[static_cast<Eigen::Index>(p * K + k)];
      if (v > best) {
        best = v;
        best_k = k + 1;
      }
    }
    out.data[p] = (best > theta_bg) ? static_cast<std::uint16_t>(best_k) : 0;
  }
  return out;
}

MaskTensor upsample_mask(const MaskTensor& patch_mask, std::size_t patch_h, std::size_t patch_w) {
  std::size_t gh = patch_mask.dims[0], gw = patch_mask.dims[1];
  MaskTensor out(gh * patch_h, gw * patch_w);
  for (std::size_t y = 0; y < gh * patch_h; ++y)
    for (std::size_t x = 0; x < gw * patch_w; ++x)
      out.data[y * gw * patch_w + x] = patch_mask.data[(y / patch_h) * gw + (x / patch_w)];
  return out;
}

ad::Value aux_cls_loss(const ad::Value& scores_temporal, const ad::Value& scores_spatial,
                       const std::vector<double>& image_labels) {
  ad::Value lt = ad::bce_with_logits(ad::mean_axis0(scores_temporal), image_labels);
  ad::Value ls = ad::bce_with_logits(ad::mean_axis0(scores_spatial), image_labels);
  return ad::add(lt, ls);
}

}  // namespace exact
