#pragma once

#include <string>
#include <vector>

#include "exact/ad.h"
#include "exact/config.h"
#include "exact/tensor.h"

namespace exact {

struct ModelConfig {
  std::size_t d = 128;
  std::size_t temporal_layers = 8;
  std::size_t spatial_layers = 4;
  std::size_t heads = 4;
  std::size_t patch_h = 2, patch_w = 2;
  std::size_t K = 4;
  std::size_t T = 12, C = 4;
  std::size_t input_h = 16, input_w = 16;
  double dropout = 0.0;

  std::size_t grid_h() const { return input_h / patch_h; }
  std::size_t grid_w() const { return input_w / patch_w; }
  std::size_t positions() const { return grid_h() * grid_w(); }

  void validate() const;
  static ModelConfig from_config(const Config& c);
  void to_config(Config& c) const;
};

// Dense tokens and attention exposed by a forward pass. The attention stack
// is plain data (no gradient path): one entry per temporal layer shaped
// [P, heads, K+T, K+T], row-stochastic in the last dim.
struct EncoderOutputs {
  ad::Value z_t_dense;   // [P, K, d]
  ad::Value z_t_seq;     // [P, T, d]
  ad::Value z_s_dense;   // [K, P, d]
  ad::Value z_s_global;  // [K, d]
  ad::Value logits;      // [K]
  std::vector<Eigen::ArrayXd> attention_stack;
  Eigen::ArrayXd t2c_raw;  // [P, K, T], last layer, head-averaged
  std::size_t grid_h = 0, grid_w = 0;
};

// Temporal-then-spatial transformer with per-class tokens. Pre-norm blocks,
// GELU MLP with expansion 4, shared classifier weights for the global and
// dense scores.
class TSViT {
 public:
  TSViT(const ModelConfig& cfg, Rng& init_rng);
  TSViT(const ModelConfig& cfg, ad::ParamStore&& params);

  const ModelConfig& config() const { return cfg_; }
  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }
  ad::Value classifier_weights() const { return params_.get("classifier.weight"); }

  // Patch embedding: [P, T, d] tokens from a [T, C, H, W] series.
  ad::Value patchify(const Tensor& series) const;

  struct TemporalResult {
    ad::Value z_t_dense;  // [P, K, d]
    ad::Value z_t_seq;    // [P, T, d]
    std::vector<Eigen::ArrayXd> attention_stack;
  };
  // Input per patch sequence is [cls tokens ; tokens + P_T] of length K+T.
  TemporalResult temporal_forward(const ad::Value& tokens, bool training = false,
                                  Rng* dropout_rng = nullptr) const;

  struct SpatialResult {
    ad::Value z_s_global;  // [K, d]
    ad::Value z_s_dense;   // [K, P, d]
  };
  // One sequence per class of length 1+P (class token first).
  SpatialResult spatial_forward(const ad::Value& z_t_dense, bool training = false,
                                Rng* dropout_rng = nullptr) const;

  // logit_k = w_k . z_s_global_k with the bias-free classifier weights.
  ad::Value classify_global(const ad::Value& z_s_global) const;

  EncoderOutputs forward(const Tensor& series, bool training = false,
                         Rng* dropout_rng = nullptr) const;

  // Folded-batch forward: one graph for the whole batch, sequences stacked
  // along the leading dim. Identical math to per-sample forwards.
  struct BatchOutputs {
    std::size_t batch = 0;
    ad::Value z_t_dense;   // [B*P, K, d]
    ad::Value z_t_seq;     // [B*P, T, d]
    ad::Value z_s_dense;   // [B*K, P, d]
    ad::Value z_s_global;  // [B*K, d]
    ad::Value logits;      // [B*K]
    std::vector<Eigen::ArrayXd> attention_stack;  // per layer [B*P*heads, S, S]
  };
  BatchOutputs forward_batch(const std::vector<const Tensor*>& series, bool training = false,
                             Rng* dropout_rng = nullptr) const;

  void save(const std::string& dir) const;
  static TSViT load(const std::string& dir);

 private:
  ModelConfig cfg_;
  ad::ParamStore params_;

  ad::Value encoder_block(const std::string& prefix, ad::Value x, bool training, Rng* dropout_rng,
                          std::vector<Eigen::ArrayXd>* attn_sink) const;
};

// Named-tensor container shared by model, bank, and optimizer-free state.
// Layout: <dir>/manifest.txt plus one F64 tensor file per entry.
void save_named_tensors(const std::string& dir, const Config& meta,
                        const std::vector<std::pair<std::string, ad::Value>>& items);
struct NamedTensors {
  Config meta;
  std::vector<std::pair<std::string, Tensor>> tensors;
};
NamedTensors load_named_tensors(const std::string& dir);

// Provenance hash over the container (manifest plus payload bytes).
std::uint64_t named_tensors_hash(const std::string& dir);

}  // namespace exact
