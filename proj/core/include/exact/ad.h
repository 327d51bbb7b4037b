#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "exact/rng.h"

namespace exact::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node {
  Shape shape;
  Eigen::ArrayXd value;
  Eigen::ArrayXd grad;  // allocated lazily
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != value.size()) grad = Eigen::ArrayXd::Zero(value.size());
  }
};

using NodePtr = std::shared_ptr<Node>;

// Handle to a tape node. Graphs are built per forward pass; nodes die with
// the last handle, parameters persist across iterations as leaves.
class Value {
 public:
  Value() = default;
  explicit Value(NodePtr n) : node_(std::move(n)) {}

  bool valid() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return static_cast<std::size_t>(node_->value.size()); }
  const Eigen::ArrayXd& data() const { return node_->value; }
  Eigen::ArrayXd& mutable_data() { return node_->value; }
  const Eigen::ArrayXd& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  double scalar() const;
  double operator()(std::size_t i) const { return node_->value[static_cast<Eigen::Index>(i)]; }

  NodePtr node() const { return node_; }

 private:
  NodePtr node_;
};

// Leaves.
Value constant(Shape shape, Eigen::ArrayXd data);
Value constant(Shape shape, const std::vector<double>& data);
Value scalar_constant(double v);
Value param(Shape shape, Eigen::ArrayXd data);
Value zeros(Shape shape, bool requires_grad = false);

// Detached copy: same values, no gradient path into the argument.
Value detach(const Value& v);

// Elementwise.
Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value scale(const Value& a, double c);
Value add_scalar(const Value& a, double c);
Value relu(const Value& a);
Value gelu(const Value& a);
// Inverted dropout; identity when p == 0.
Value dropout(const Value& a, double p, Rng& rng);

// Linear algebra. x has rank >= 2 with last dim k; leading dims are folded
// into rows. w is [k x m]; optional bias [m].
Value linear(const Value& x, const Value& w, const Value* bias = nullptr);
// Batched products over rank-3 operands.
Value bmm(const Value& a, const Value& b);             // [B,n,k]x[B,k,m]
Value bmm_nt(const Value& a, const Value& b);          // [B,n,k]x[B,m,k]^T
Value transpose2(const Value& a);                      // [n,m] -> [m,n]

// Shape movement.
Value reshape(const Value& a, Shape shape);
Value permute_102(const Value& a);                     // [A,B,d] -> [B,A,d]
// Per-group transpose of the two leading logical dims: [G*A,B,d] -> [G*B,A,d].
Value permute_102_grouped(const Value& a, std::size_t groups);
Value slice_rows(const Value& a, std::size_t start, std::size_t len);  // dim 0 of rank-2
Value slice_seq(const Value& a, std::size_t start, std::size_t len);  // along dim 1 of rank-3
Value concat_seq(const Value& a, const Value& b);      // along dim 1 of rank-3
Value split_heads(const Value& a, std::size_t heads);  // [B,S,d] -> [B*h,S,d/h]
Value merge_heads(const Value& a, std::size_t heads);  // [B*h,S,dh] -> [B,S,h*dh]

// Broadcasts used by the encoders.
Value add_broadcast_seq(const Value& x, const Value& pos);   // [B,S,d] + [S,d]
Value repeat_to_batch(const Value& table, std::size_t b);    // [K,d] -> [B,K,d]
Value add_bias(const Value& x, const Value& b);              // [R,C] + [C]
Value concat_cols(const Value& a, const Value& b);           // [R,C1]|[R,C2]

// Normalizations and activations over the last dim.
Value softmax_last(const Value& a);
Value layernorm(const Value& a, const Value& gamma, const Value& beta, double eps = 1e-5);
Value l2_normalize_rows(const Value& a, double eps = 1e-12);

// Reductions.
Value mean_all(const Value& a);
Value sum_all(const Value& a);
Value mean_axis0(const Value& a);      // [R,C] -> [C]
Value mean_axis1_of3(const Value& a);  // [A,B,d] -> [A,d]

// Task-specific fused ops.
// logits_k = sum_d x(k,d) * w(k,d); per-class weight row applied to the
// per-class token.
Value rowwise_dot(const Value& x, const Value& w);
// score(p,k) = sum_d tokens(p,k,d) * w(k,d)  (pre-activation dense scores).
Value dense_scores(const Value& tokens, const Value& w);
// Per-column min-max to [0,1]; constant columns map to zeros. Subgradients
// route through the first argmin/argmax entries. The grouped form normalizes
// within each block of rows (one block per image in a folded batch).
Value minmax_norm_cols(const Value& a);
Value minmax_norm_cols_grouped(const Value& a, std::size_t groups);
// Mean binary cross entropy with logits against constant targets in {0,1}.
Value bce_with_logits(const Value& logits, const std::vector<double>& targets);
// Row picks: out[i] = s(i, idx[i]).
Value gather_cols(const Value& s, const std::vector<std::size_t>& idx);
// Rowwise log-sum-exp over entries with mask != 0.
Value masked_lse_rows(const Value& s, const std::vector<std::uint8_t>& mask);
// Gather rows (p,k) from a [P,K,d] tensor into [N,d].
Value gather_pk(const Value& x, const std::vector<std::pair<std::size_t, std::size_t>>& pairs);
// Sum over present classes of mean_i |m(i,k) - target(i,k)|; target constant.
Value l1_alignment(const Value& m, const Eigen::ArrayXd& target,
                   const std::vector<std::uint8_t>& present);
// Pixel-level cross entropy of patch logits [P,C] against a label map whose
// pixels map to patches by integer division; ignore_label pixels excluded.
Value ce_patch_upsampled(const Value& logits, const std::vector<std::uint16_t>& labels,
                         std::size_t grid_h, std::size_t grid_w, std::size_t patch_h,
                         std::size_t patch_w, std::uint16_t ignore_label);

// Reverse-mode sweep from a scalar root. Accumulates into leaf grads.
void backward(const Value& root);

// Named parameter collection with deterministic iteration order.
class ParamStore {
 public:
  Value create(const std::string& name, Shape shape, Eigen::ArrayXd data);
  Value get(const std::string& name) const;
  bool has(const std::string& name) const;
  void zero_grad();
  const std::vector<std::pair<std::string, Value>>& items() const { return items_; }

 private:
  std::vector<std::pair<std::string, Value>> items_;
};

// Decoupled weight decay Adam over a ParamStore.
class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.01)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  void step(ParamStore& params, double lr);

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
  std::vector<Eigen::ArrayXd> m_, v_;
};

}  // namespace exact::ad
