#include "exact/cb_cam.h"

#include <cmath>

#include "exact/error.h"

namespace exact {

namespace {

double max_similarity(const Eigen::ArrayXd& z, const Eigen::ArrayXd& protos,
                      const std::vector<bool>& flags, std::size_t Np, std::size_t d, double tau,
                      bool* any) {
  double nz = std::sqrt(z.square().sum());
  double best = -1e300;
  *any = false;
  for (std::size_t i = 0; i < Np; ++i) {
    if (!flags[i]) continue;
    auto p = protos.segment(static_cast<Eigen::Index>(i * d), static_cast<Eigen::Index>(d));
    double np = std::sqrt(p.square().sum());
    double cos = (nz == 0.0 || np == 0.0) ? 0.0 : (z * p).sum() / (nz * np);
    best = std::max(best, cos / tau);
    *any = true;
  }
  return best;
}

}  // namespace

Eigen::ArrayXd cb_cam(const Eigen::ArrayXd& z_t_dense, std::size_t positions, std::size_t K,
                      std::size_t d, const PrototypeBank& bank, double tau,
                      const std::vector<double>& image_labels, bool class_agnostic,
                      bool normalize) {
  if (static_cast<std::size_t>(z_t_dense.size()) != positions * K * d)
    throw ContractError("cb_cam: embedding size mismatch");
  if (image_labels.size() != K) throw ContractError("cb_cam: label vector size mismatch");
  if (K != bank.K || d != bank.d) throw ContractError("cb_cam: bank shape mismatch");
  if (tau <= 0.0) throw ConfigError("cb_cam: tau must be > 0");
  if (!z_t_dense.isFinite().all()) throw NumericError("cb_cam: non-finite embeddings");

  for (std::size_t k = 0; k < K; ++k)
    if (image_labels[k] > 0.5 && bank.initialized_count(k, Polarity::Positive) == 0)
      throw GenerationError("cb_cam: no initialized positive prototypes for class " +
                            std::to_string(k + 1));

  Eigen::ArrayXd y = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(positions * K));
  Eigen::ArrayXd z_mean(static_cast<Eigen::Index>(d));
  for (std::size_t p = 0; p < positions; ++p) {
    if (class_agnostic) {
      z_mean.setZero();
      for (std::size_t k = 0; k < K; ++k)
        z_mean += z_t_dense.segment(static_cast<Eigen::Index>((p * K + k) * d),
                                    static_cast<Eigen::Index>(d));
      z_mean /= static_cast<double>(K);
    }
    for (std::size_t k = 0; k < K; ++k) {
      if (image_labels[k] <= 0.5) continue;
      Eigen::ArrayXd z =
          class_agnostic ? z_mean
                         : z_t_dense.segment(static_cast<Eigen::Index>((p * K + k) * d),
                                             static_cast<Eigen::Index>(d))
                               .eval();
      bool any_pos = false, any_neg = false;
      double s_pos =
          max_similarity(z, bank.positive[k], bank.positive_init[k], bank.Np, d, tau, &any_pos);
      double s_neg =
          max_similarity(z, bank.negative[k], bank.negative_init[k], bank.Np, d, tau, &any_neg);
      if (!any_neg) s_neg = 0.0;  // empty negative set contributes nothing
      y[static_cast<Eigen::Index>(p * K + k)] = std::max(0.0, s_pos - s_neg);
    }
  }

  if (normalize) {
    for (std::size_t k = 0; k < K; ++k) {
      if (image_labels[k] <= 0.5) continue;
      double mn = 1e300, mx = -1e300;
      for (std::size_t p = 0; p < positions; ++p) {
        double v = y[static_cast<Eigen::Index>(p * K + k)];
        mn = std::min(mn, v);
        mx = std::max(mx, v);
      }
      double range = mx - mn;
      for (std::size_t p = 0; p < positions; ++p) {
        auto& v = y[static_cast<Eigen::Index>(p * K + k)];
        v = range > 0.0 ? (v - mn) / range : 0.0;
      }
    }
  }
  return y;
}

}  // namespace exact
