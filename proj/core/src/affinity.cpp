#include "exact/affinity.h"

#include <array>
#include <cmath>

#include "exact/error.h"

namespace exact {

TemporalClassAttention extract_t2c_attention(const std::vector<Eigen::ArrayXd>& attention_stack,
                                             std::size_t positions, std::size_t heads,
                                             std::size_t K, std::size_t T,
                                             AttentionLayerMode mode) {
  if (attention_stack.empty()) throw ContractError("t2c: empty attention stack");
  std::size_t S = K + T;
  for (const auto& layer : attention_stack)
    if (static_cast<std::size_t>(layer.size()) != positions * heads * S * S)
      throw ContractError("t2c: attention stack layer size mismatch");

  // Class-token queries attending to temporal-token keys, averaged over
  // heads and patch sequences.
  Eigen::ArrayXd block = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(K * T));
  std::size_t first = mode == AttentionLayerMode::Last ? attention_stack.size() - 1 : 0;
  std::size_t n_layers = mode == AttentionLayerMode::Last ? 1 : attention_stack.size();
  for (std::size_t l = first; l < first + n_layers; ++l) {
    const Eigen::ArrayXd& a = attention_stack[l];
    for (std::size_t p = 0; p < positions; ++p)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t t = 0; t < T; ++t)
            block[static_cast<Eigen::Index>(k * T + t)] +=
                a[static_cast<Eigen::Index>(((p * heads + h) * S + k) * S + (K + t))];
  }
  block /= static_cast<double>(positions * heads * n_layers);

  TemporalClassAttention out;
  out.T = T;
  out.K = K;
  out.a_tilde.resize(static_cast<Eigen::Index>(T * K));
  for (std::size_t k = 0; k < K; ++k) {
    double mx = -1e300;
    for (std::size_t t = 0; t < T; ++t)
      mx = std::max(mx, block[static_cast<Eigen::Index>(k * T + t)]);
    double denom = 0.0;
    for (std::size_t t = 0; t < T; ++t)
      denom += std::exp(block[static_cast<Eigen::Index>(k * T + t)] - mx);
    for (std::size_t t = 0; t < T; ++t)
      out.a_tilde[static_cast<Eigen::Index>(t * K + k)] =
          std::exp(block[static_cast<Eigen::Index>(k * T + t)] - mx) / denom;
  }
  return out;
}

Eigen::ArrayXd reweight(const Eigen::ArrayXd& z_t_seq, std::size_t positions, std::size_t T,
                        std::size_t d, const TemporalClassAttention& a_tilde) {
  if (static_cast<std::size_t>(z_t_seq.size()) != positions * T * d)
    throw ContractError("reweight: sequence embedding size mismatch");
  if (a_tilde.T != T) throw ContractError("reweight: attention length mismatch");
  std::size_t K = a_tilde.K;
  Eigen::ArrayXd v = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(K * positions * d));
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t p = 0; p < positions; ++p) {
      auto dst = v.segment(static_cast<Eigen::Index>((k * positions + p) * d),
                           static_cast<Eigen::Index>(d));
      for (std::size_t t = 0; t < T; ++t)
        dst += a_tilde.a_tilde[static_cast<Eigen::Index>(t * K + k)] *
               z_t_seq.segment(static_cast<Eigen::Index>((p * T + t) * d),
                               static_cast<Eigen::Index>(d));
    }
  return v;
}

namespace {

double cosine(const Eigen::ArrayXd& v, std::size_t i, std::size_t j, std::size_t d) {
  auto a = v.segment(static_cast<Eigen::Index>(i * d), static_cast<Eigen::Index>(d));
  auto b = v.segment(static_cast<Eigen::Index>(j * d), static_cast<Eigen::Index>(d));
  double na = std::sqrt(a.square().sum());
  double nb = std::sqrt(b.square().sum());
  if (na == 0.0 || nb == 0.0) return 0.0;
  return (a * b).sum() / (na * nb);
}

}  // namespace

LocalAffinity pairwise_affinity(const Eigen::ArrayXd& v_k, std::size_t grid_h, std::size_t grid_w,
                                std::size_t d, SigmaMode sigma_mode) {
  std::size_t P = grid_h * grid_w;
  if (static_cast<std::size_t>(v_k.size()) != P * d)
    throw ContractError("affinity: representation size mismatch");
  LocalAffinity out;
  out.grid_h = grid_h;
  out.grid_w = grid_w;
  out.neighbors.assign(P, {});
  out.weights.assign(P, {});

  constexpr int dy[8] = {-1, -1, -1, 0, 0, 1, 1, 1};
  constexpr int dx[8] = {-1, 0, 1, -1, 1, -1, 0, 1};

  for (std::size_t y = 0; y < grid_h; ++y)
    for (std::size_t x = 0; x < grid_w; ++x) {
      std::size_t i = y * grid_w + x;
      out.neighbors[i].fill(-1);
      out.weights[i].fill(0.0);

      std::size_t count = 0;
      std::array<double, 8> cos{};
      for (int n = 0; n < 8; ++n) {
        int ny = static_cast<int>(y) + dy[n];
        int nx = static_cast<int>(x) + dx[n];
        if (ny < 0 || nx < 0 || ny >= static_cast<int>(grid_h) || nx >= static_cast<int>(grid_w))
          continue;
        std::size_t j = static_cast<std::size_t>(ny) * grid_w + static_cast<std::size_t>(nx);
        out.neighbors[i][count] = static_cast<int>(j);
        cos[count] = cosine(v_k, i, j, d);
        ++count;
      }

      double sigma;
      if (sigma_mode == SigmaMode::VectorStd) {
        // Standard deviation of the entries of v_i (population form).
        auto vi = v_k.segment(static_cast<Eigen::Index>(i * d), static_cast<Eigen::Index>(d));
        double mu = vi.mean();
        sigma = std::sqrt((vi - mu).square().mean());
      } else {
        double mu = 0.0;
        for (std::size_t n = 0; n < count; ++n) mu += cos[n];
        mu /= std::max<std::size_t>(count, 1);
        double var = 0.0;
        for (std::size_t n = 0; n < count; ++n) var += (cos[n] - mu) * (cos[n] - mu);
        sigma = std::sqrt(var / std::max<std::size_t>(count, 1));
      }
      sigma = std::max(sigma, 1e-6);

      for (std::size_t n = 0; n < count; ++n) out.weights[i][n] = std::exp(cos[n] / sigma);
    }
  return out;
}

Eigen::ArrayXd propagate(const Eigen::ArrayXd& cam, std::size_t positions, std::size_t K,
                         const std::vector<LocalAffinity>& per_class, std::size_t iters) {
  if (static_cast<std::size_t>(cam.size()) != positions * K)
    throw ContractError("propagate: CAM size mismatch");
  if (per_class.size() != K) throw ContractError("propagate: one affinity per class required");
  if (iters < 1) throw ConfigError("propagate: iters must be >= 1");

  Eigen::ArrayXd current = cam;
  Eigen::ArrayXd next(cam.size());
  for (std::size_t it = 0; it < iters; ++it) {
    for (std::size_t k = 0; k < K; ++k) {
      const LocalAffinity& aff = per_class[k];
      if (aff.grid_h * aff.grid_w != positions)
        throw ContractError("propagate: affinity grid mismatch");
      for (std::size_t i = 0; i < positions; ++i) {
        double num = 0.0, den = 0.0;
        for (int n = 0; n < 8; ++n) {
          int j = aff.neighbors[i][n];
          if (j < 0) break;
          double w = aff.weights[i][n];
          num += w * current[static_cast<Eigen::Index>(static_cast<std::size_t>(j) * K + k)];
          den += w;
        }
        next[static_cast<Eigen::Index>(i * K + k)] =
            den > 0.0 ? num / den : current[static_cast<Eigen::Index>(i * K + k)];
      }
    }
    std::swap(current, next);
  }
  return current;
}

ad::Value tap_loss(const ad::Value& m, const ad::Value& m_tilde,
                   const std::vector<double>& image_labels) {
  return tap_loss(m, m_tilde.data(), image_labels);
}

ad::Value tap_loss(const ad::Value& m, const Eigen::ArrayXd& m_tilde,
                   const std::vector<double>& image_labels) {
  if (m.shape().size() != 2) throw ContractError("tap: rank-2 CAM required");
  std::size_t K = m.shape()[1];
  if (image_labels.size() != K) throw ContractError("tap: label vector size mismatch");
  std::vector<std::uint8_t> present(K);
  for (std::size_t k = 0; k < K; ++k) present[k] = image_labels[k] > 0.5 ? 1 : 0;
  return ad::l1_alignment(m, m_tilde, present);
}

}  // namespace exact
