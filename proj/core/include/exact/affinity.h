#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "exact/ad.h"

namespace exact {

enum class AttentionLayerMode { Last, Mean };
enum class SigmaMode { VectorStd, NeighborStd };

// Temporal-to-class attention, softmax-normalized over timesteps: [T x K]
// with each class column summing to 1.
struct TemporalClassAttention {
  std::size_t T = 0, K = 0;
  Eigen::ArrayXd a_tilde;  // [T x K]
};

// attention_stack: per temporal layer, [P*heads, S, S] with S = K+T.
TemporalClassAttention extract_t2c_attention(const std::vector<Eigen::ArrayXd>& attention_stack,
                                             std::size_t positions, std::size_t heads,
                                             std::size_t K, std::size_t T,
                                             AttentionLayerMode mode = AttentionLayerMode::Last);

// v^k = sum_t A~(t,k) z_t_seq[:,t,:]; output [K x P x d]. Plain data: the
// affinity path is a detached, self-supervised target.
Eigen::ArrayXd reweight(const Eigen::ArrayXd& z_t_seq, std::size_t positions, std::size_t T,
                        std::size_t d, const TemporalClassAttention& a_tilde);

// 8-way local affinity over the patch grid for one class.
struct LocalAffinity {
  std::size_t grid_h = 0, grid_w = 0;
  // Per position: neighbor flat indices (-1 past the end) and weights.
  std::vector<std::array<int, 8>> neighbors;
  std::vector<std::array<double, 8>> weights;
};

LocalAffinity pairwise_affinity(const Eigen::ArrayXd& v_k, std::size_t grid_h, std::size_t grid_w,
                                std::size_t d, SigmaMode sigma_mode = SigmaMode::VectorStd);

// Iterated neighborhood-weighted averaging of the per-class CAM; the
// neighborhood excludes the center, so values stay within the input range.
Eigen::ArrayXd propagate(const Eigen::ArrayXd& cam, std::size_t positions, std::size_t K,
                         const std::vector<LocalAffinity>& per_class, std::size_t iters);

// Mean absolute alignment against the detached propagated target, summed
// over present classes. No gradient flows into m_tilde.
ad::Value tap_loss(const ad::Value& m, const ad::Value& m_tilde,
                   const std::vector<double>& image_labels);
ad::Value tap_loss(const ad::Value& m, const Eigen::ArrayXd& m_tilde,
                   const std::vector<double>& image_labels);

}  // namespace exact
