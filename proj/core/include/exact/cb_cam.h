#pragma once

#include <vector>

#include "exact/clues.h"

namespace exact {

// Clue-based CAM: per pixel, the best positive-prototype similarity minus the
// best negative-prototype similarity, rectified. Scores use the class-k slice
// of the temporal dense embeddings (or the class mean with class_agnostic).
// Absent classes are all-zero; present classes require an initialized
// positive set. Output is per-class min-max normalized when normalize is set
// so the same theta_bg scale applies as for raw CAMs.
Eigen::ArrayXd cb_cam(const Eigen::ArrayXd& z_t_dense, std::size_t positions, std::size_t K,
                      std::size_t d, const PrototypeBank& bank, double tau,
                      const std::vector<double>& image_labels, bool class_agnostic = false,
                      bool normalize = true);

}  // namespace exact
