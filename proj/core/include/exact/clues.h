#pragma once

#include <optional>
#include <string>
#include <vector>

#include "exact/ad.h"
#include "exact/tensor.h"

namespace exact {

enum class Polarity { Positive, Negative };

// Class-wise positive/negative prototype sets (the space-time perceptive
// clues). Prototypes are unit-norm, momentum-updated from reliable pixels,
// and never receive gradients.
struct PrototypeBank {
  std::size_t K = 0, Np = 0, d = 0;
  double alpha = 0.999;
  double tau = 0.1;
  std::vector<Eigen::ArrayXd> positive;            // per class, [Np x d]
  std::vector<Eigen::ArrayXd> negative;            // per class, [Np x d]
  std::vector<std::vector<bool>> positive_init;    // per (class, index)
  std::vector<std::vector<bool>> negative_init;

  PrototypeBank() = default;
  PrototypeBank(std::size_t K, std::size_t Np, std::size_t d, double alpha, double tau);

  Eigen::ArrayXd& protos(std::size_t k, Polarity pol) {
    return pol == Polarity::Positive ? positive[k] : negative[k];
  }
  const Eigen::ArrayXd& protos(std::size_t k, Polarity pol) const {
    return pol == Polarity::Positive ? positive[k] : negative[k];
  }
  std::vector<bool>& init_flags(std::size_t k, Polarity pol) {
    return pol == Polarity::Positive ? positive_init[k] : negative_init[k];
  }
  const std::vector<bool>& init_flags(std::size_t k, Polarity pol) const {
    return pol == Polarity::Positive ? positive_init[k] : negative_init[k];
  }
  std::size_t initialized_count(std::size_t k, Polarity pol) const;
  bool class_ready(std::size_t k) const { return initialized_count(k, Polarity::Positive) > 0; }

  void save(const std::string& dir) const;
  static PrototypeBank load(const std::string& dir);
};

// Pixel-to-prototype transport plan with uniform marginals.
struct AssignmentMatrix {
  Eigen::ArrayXd C;             // [Np x Nk] row-major, nonnegative
  Eigen::ArrayXd row_marginal;  // u, length Np
  Eigen::ArrayXd col_marginal;  // r, length Nk
  double residual = 0.0;        // max marginal violation at exit
  std::size_t iterations = 0;
};

// Entropy-regularized assignment via alternating Sinkhorn-Knopp scalings.
// Inputs are L2-normalized before scoring. Returns nullopt when Nk == 0
// (callers drop the class for the batch).
std::optional<AssignmentMatrix> sinkhorn_assign(const Eigen::ArrayXd& prototypes, std::size_t Np,
                                                const Eigen::ArrayXd& embeddings, std::size_t Nk,
                                                std::size_t d, double eta, std::size_t iters,
                                                double tol = 1e-4);

// p <- alpha p + ((1-alpha)/||C_row||_1) (C_row . Z), then renormalized.
// First touch sets the prototype directly to the weighted mean; all-zero
// rows leave their prototype unchanged.
void momentum_update(PrototypeBank& bank, std::size_t k, Polarity polarity,
                     const AssignmentMatrix& assignment, const Eigen::ArrayXd& embeddings,
                     std::size_t d);

// Temperature-scaled cosine similarity.
double similarity(const Eigen::ArrayXd& z, const Eigen::ArrayXd& p, double tau);

struct CblResult {
  ad::Value loss;           // scalar
  std::size_t pixel_count = 0;
  bool skipped = false;     // no participating pixels this batch
};

// Contrastive term over one class: embeddings z [N x d] on the tape,
// prototypes [Pk x d] detached inside (clues receive no gradient). The first
// n_positive prototype rows are the positive set; each pixel is assigned its
// best-similarity positive prototype.
CblResult cbl_loss_with_prototypes(const ad::Value& z, const ad::Value& prototypes,
                                   std::size_t n_positive, double tau,
                                   bool include_positive_in_denominator);

// Full clue-based contrastive loss: pixels with class-k filtered label 1
// participate for class k with the class-k token slice of z_t_dense.
CblResult cbl_loss(const ad::Value& z_t_dense, const std::vector<std::uint8_t>& cam_filtered,
                   const PrototypeBank& bank, const std::vector<double>& image_labels, double tau,
                   bool include_positive_in_denominator = false);

}  // namespace exact
