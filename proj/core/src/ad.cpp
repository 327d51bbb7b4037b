#include "exact/ad.h"

#include <unsupported/Eigen/SpecialFunctions>

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "exact/error.h"

namespace exact::ad {

std::size_t g_node_count = 0;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

NodePtr make_node(Shape shape, Eigen::ArrayXd value, std::vector<NodePtr> parents) {
  ++g_node_count;
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  return n;
}

void check(bool cond, const std::string& msg) {
  if (!cond) throw ContractError("ad: " + msg);
}

std::size_t last_dim(const Shape& s) {
  check(!s.empty(), "rank-0 tensor");
  return s.back();
}

}  // namespace

std::size_t shape_numel(const Shape& s) {
  if (s.empty()) return 0;
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

double Value::scalar() const {
  if (numel() != 1) throw ContractError("ad: scalar() on tensor " + shape_str(shape()));
  return node_->value[0];
}

Value constant(Shape shape, Eigen::ArrayXd data) {
  check(shape_numel(shape) == static_cast<std::size_t>(data.size()), "constant size mismatch");
  return Value(make_node(std::move(shape), std::move(data), {}));
}

Value constant(Shape shape, const std::vector<double>& data) {
  Eigen::ArrayXd a = Eigen::Map<const Eigen::ArrayXd>(data.data(), static_cast<Eigen::Index>(data.size()));
  return constant(std::move(shape), std::move(a));
}

Value scalar_constant(double v) {
  Eigen::ArrayXd a(1);
  a[0] = v;
  return constant({1}, std::move(a));
}

Value param(Shape shape, Eigen::ArrayXd data) {
  Value v = constant(std::move(shape), std::move(data));
  v.node()->requires_grad = true;
  return v;
}

Value zeros(Shape shape, bool requires_grad) {
  Eigen::ArrayXd a = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(shape_numel(shape)));
  Value v = constant(std::move(shape), std::move(a));
  v.node()->requires_grad = requires_grad;
  return v;
}

Value detach(const Value& v) {
  return constant(v.shape(), v.data());
}

Value add(const Value& a, const Value& b) {
  check(a.shape() == b.shape(), "add shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto n = make_node(a.shape(), a.data() + b.data(), {a.node(), b.node()});
  n->backward_fn = [](Node& self) {
    for (int i = 0; i < 2; ++i) {
      auto& p = self.parents[i];
      if (!p->requires_grad) continue;
      p->ensure_grad();
      p->grad += self.grad;
    }
  };
  return Value(n);
}

Value sub(const Value& a, const Value& b) {
  check(a.shape() == b.shape(), "sub shape mismatch");
  auto n = make_node(a.shape(), a.data() - b.data(), {a.node(), b.node()});
  n->backward_fn = [](Node& self) {
    if (self.parents[0]->requires_grad) {
      self.parents[0]->ensure_grad();
      self.parents[0]->grad += self.grad;
    }
    if (self.parents[1]->requires_grad) {
      self.parents[1]->ensure_grad();
      self.parents[1]->grad -= self.grad;
    }
  };
  return Value(n);
}

Value mul(const Value& a, const Value& b) {
  check(a.shape() == b.shape(), "mul shape mismatch");
  auto n = make_node(a.shape(), a.data() * b.data(), {a.node(), b.node()});
  n->backward_fn = [](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      pa->grad += self.grad * pb->value;
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      pb->grad += self.grad * pa->value;
    }
  };
  return Value(n);
}

Value scale(const Value& a, double c) {
  auto n = make_node(a.shape(), a.data() * c, {a.node()});
  n->backward_fn = [c](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    p->grad += self.grad * c;
  };
  return Value(n);
}

Value add_scalar(const Value& a, double c) {
  auto n = make_node(a.shape(), a.data() + c, {a.node()});
  n->backward_fn = [](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    p->grad += self.grad;
  };
  return Value(n);
}

Value relu(const Value& a) {
  auto n = make_node(a.shape(), a.data().max(0.0), {a.node()});
  n->backward_fn = [](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    p->grad += self.grad * (p->value > 0.0).cast<double>();
  };
  return Value(n);
}

Value gelu(const Value& a) {
  const double inv_sqrt2 = 0.7071067811865475244;
  // The Gaussian CDF is cached for the backward pass; erf has no vectorized
  // double path, so it is the single most expensive activation here.
  Eigen::ArrayXd phi(a.data().size());
  for (Eigen::Index i = 0; i < phi.size(); ++i)
    phi[i] = 0.5 * (1.0 + std::erf(a.data()[i] * inv_sqrt2));
  Eigen::ArrayXd y = a.data() * phi;
  auto n = make_node(a.shape(), std::move(y), {a.node()});
  n->backward_fn = [phi = std::move(phi)](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    const double inv_sqrt2pi = 0.3989422804014326779;
    Eigen::ArrayXd pdf = inv_sqrt2pi * (-0.5 * p->value.square()).exp();
    p->grad += self.grad * (phi + p->value * pdf);
  };
  return Value(n);
}

Value dropout(const Value& a, double p, Rng& rng) {
  if (p <= 0.0) return a;
  check(p < 1.0, "dropout rate must be < 1");
  Eigen::ArrayXd mask(a.data().size());
  double keep = 1.0 - p;
  for (Eigen::Index i = 0; i < mask.size(); ++i)
    mask[i] = rng.uniform() >= p ? 1.0 / keep : 0.0;
  auto n = make_node(a.shape(), a.data() * mask, {a.node()});
  n->backward_fn = [mask = std::move(mask)](Node& self) {
    auto& pa = self.parents[0];
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    pa->grad += self.grad * mask;
  };
  return Value(n);
}

Value linear(const Value& x, const Value& w, const Value* bias) {
  check(x.shape().size() >= 2, "linear: x rank < 2");
  check(w.shape().size() == 2, "linear: w must be rank 2");
  std::size_t k = last_dim(x.shape());
  check(w.shape()[0] == k, "linear: inner dims " + std::to_string(k) + " vs " + std::to_string(w.shape()[0]));
  std::size_t m = w.shape()[1];
  std::size_t rows = x.numel() / k;
  if (bias) check(bias->shape() == Shape{m}, "linear: bias shape");

  MapConstMat X(x.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(k));
  MapConstMat W(w.data().data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(m));
  Eigen::ArrayXd out(rows * m);
  MapMat Y(out.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(m));
  Y.noalias() = X * W;
  if (bias) {
    Eigen::Map<const Eigen::RowVectorXd> b(bias->data().data(), static_cast<Eigen::Index>(m));
    Y.rowwise() += b;
  }

  Shape out_shape = x.shape();
  out_shape.back() = m;
  std::vector<NodePtr> parents{x.node(), w.node()};
  if (bias) parents.push_back(bias->node());
  auto n = make_node(std::move(out_shape), std::move(out), std::move(parents));
  n->backward_fn = [rows, k, m](Node& self) {
    MapConstMat G(self.grad.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(m));
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    if (px->requires_grad) {
      px->ensure_grad();
      MapConstMat W(pw->value.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(m));
      MapMat dX(px->grad.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(k));
      dX.noalias() += G * W.transpose();
    }
    if (pw->requires_grad) {
      pw->ensure_grad();
      MapConstMat X(px->value.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(k));
      MapMat dW(pw->grad.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(m));
      dW.noalias() += X.transpose() * G;
    }
    if (self.parents.size() == 3 && self.parents[2]->requires_grad) {
      auto& pb = self.parents[2];
      pb->ensure_grad();
      Eigen::Map<Eigen::RowVectorXd> db(pb->grad.data(), static_cast<Eigen::Index>(m));
      db += G.colwise().sum();
    }
  };
  return Value(n);
}

namespace {

void check_rank3(const Value& v, const char* who) {
  check(v.shape().size() == 3, std::string(who) + ": rank-3 operand required");
}

}  // namespace

Value bmm(const Value& a, const Value& b) {
  check_rank3(a, "bmm");
  check_rank3(b, "bmm");
  std::size_t B = a.shape()[0], n_ = a.shape()[1], k = a.shape()[2];
  check(b.shape()[0] == B && b.shape()[1] == k, "bmm: shape mismatch");
  std::size_t m = b.shape()[2];
  Eigen::ArrayXd out(B * n_ * m);
  for (std::size_t i = 0; i < B; ++i) {
    MapConstMat A(a.data().data() + i * n_ * k, static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(k));
    MapConstMat Bm(b.data().data() + i * k * m, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(m));
    MapMat Y(out.data() + i * n_ * m, static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(m));
    Y.noalias() = A * Bm;
  }
  auto n = make_node({B, n_, m}, std::move(out), {a.node(), b.node()});
  n->backward_fn = [B, n_, k, m](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    for (std::size_t i = 0; i < B; ++i) {
      MapConstMat G(self.grad.data() + i * n_ * m, static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(m));
      if (pa->requires_grad) {
        pa->ensure_grad();
        MapConstMat Bm(pb->value.data() + i * k * m, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(m));
        MapMat dA(pa->grad.data() + i * n_ * k, static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(k));
        dA.noalias() += G * Bm.transpose();
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        MapConstMat A(pa->value.data() + i * n_ * k, static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(k));
        MapMat dB(pb->grad.data() + i * k * m, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(m));
        dB.noalias() += A.transpose() * G;
      }
    }
  };
  return Value(n);
}

Value bmm_nt(const Value& a, const Value& b) {
  check_rank3(a, "bmm_nt");
  check_rank3(b, "bmm_nt");
  std::size_t B = a.shape()[0], n_ = a.shape()[1], k = a.shape()[2];
  check(b.shape()[0] == B && b.shape()[2] == k, "bmm_nt: shape mismatch");
  std::size_t m = b.shape()[1];
  Eigen::ArrayXd out(B * n_ * m);
  for (std::size_t i = 0; i < B; ++i) {
    MapConstMat A(a.data().data() + i * n_ * k, static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(k));
    MapConstMat Bm(b.data().data() + i * m * k, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
    MapMat Y(out.data() + i * n_ * m, static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(m));
    Y.noalias() = A * Bm.transpose();
  }
  auto n = make_node({B, n_, m}, std::move(out), {a.node(), b.node()});
  n->backward_fn = [B, n_, k, m](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    for (std::size_t i = 0; i < B; ++i) {
      MapConstMat G(self.grad.data() + i * n_ * m, static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(m));
      if (pa->requires_grad) {
        pa->ensure_grad();
        MapConstMat Bm(pb->value.data() + i * m * k, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
        MapMat dA(pa->grad.data() + i * n_ * k, static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(k));
        dA.noalias() += G * Bm;
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        MapConstMat A(pa->value.data() + i * n_ * k, static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(k));
        MapMat dB(pb->grad.data() + i * m * k, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
        dB.noalias() += G.transpose() * A;
      }
    }
  };
  return Value(n);
}

Value transpose2(const Value& a) {
  check(a.shape().size() == 2, "transpose2: rank-2 required");
  std::size_t r = a.shape()[0], c = a.shape()[1];
  Eigen::ArrayXd out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.data()[i * c + j];
  auto n = make_node({c, r}, std::move(out), {a.node()});
  n->backward_fn = [r, c](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) p->grad[i * c + j] += self.grad[j * r + i];
  };
  return Value(n);
}

Value reshape(const Value& a, Shape shape) {
  check(shape_numel(shape) == a.numel(), "reshape: numel mismatch");
  auto n = make_node(std::move(shape), a.data(), {a.node()});
  n->backward_fn = [](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    p->grad += self.grad;
  };
  return Value(n);
}

Value permute_102_grouped(const Value& a, std::size_t groups) {
  check_rank3(a, "permute_102_grouped");
  check(groups >= 1 && a.shape()[0] % groups == 0, "permute_102_grouped: bad group count");
  std::size_t A = a.shape()[0] / groups, B = a.shape()[1], d = a.shape()[2];
  Eigen::ArrayXd out(static_cast<Eigen::Index>(groups * A * B * d));
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t i = 0; i < A; ++i)
      for (std::size_t j = 0; j < B; ++j)
        std::copy_n(a.data().data() + ((g * A + i) * B + j) * d, d,
                    out.data() + ((g * B + j) * A + i) * d);
  auto n = make_node({groups * B, A, d}, std::move(out), {a.node()});
  n->backward_fn = [groups, A, B, d](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t i = 0; i < A; ++i)
        for (std::size_t j = 0; j < B; ++j) {
          const double* src = self.grad.data() + ((g * B + j) * A + i) * d;
          double* dst = p->grad.data() + ((g * A + i) * B + j) * d;
          for (std::size_t t = 0; t < d; ++t) dst[t] += src[t];
        }
  };
  return Value(n);
}

Value permute_102(const Value& a) { return permute_102_grouped(a, 1); }

Value slice_rows(const Value& a, std::size_t start, std::size_t len) {
  check(a.shape().size() == 2, "slice_rows: rank-2 required");
  std::size_t R = a.shape()[0], C = a.shape()[1];
  check(start + len <= R, "slice_rows: out of range");
  Eigen::ArrayXd out(static_cast<Eigen::Index>(len * C));
  std::copy_n(a.data().data() + start * C, len * C, out.data());
  auto n = make_node({len, C}, std::move(out), {a.node()});
  n->backward_fn = [start, C, len](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    p->grad.segment(static_cast<Eigen::Index>(start * C), static_cast<Eigen::Index>(len * C)) +=
        self.grad;
  };
  return Value(n);
}

Value slice_seq(const Value& a, std::size_t start, std::size_t len) {
  check_rank3(a, "slice_seq");
  std::size_t B = a.shape()[0], S = a.shape()[1], d = a.shape()[2];
  check(start + len <= S, "slice_seq: out of range");
  Eigen::ArrayXd out(B * len * d);
  for (std::size_t b = 0; b < B; ++b)
    std::copy_n(a.data().data() + (b * S + start) * d, len * d, out.data() + b * len * d);
  auto n = make_node({B, len, d}, std::move(out), {a.node()});
  n->backward_fn = [B, S, d, start, len](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t b = 0; b < B; ++b) {
      const double* g = self.grad.data() + b * len * d;
      double* dst = p->grad.data() + (b * S + start) * d;
      for (std::size_t i = 0; i < len * d; ++i) dst[i] += g[i];
    }
  };
  return Value(n);
}

Value concat_seq(const Value& a, const Value& b) {
  check_rank3(a, "concat_seq");
  check_rank3(b, "concat_seq");
  std::size_t B = a.shape()[0], S1 = a.shape()[1], d = a.shape()[2];
  check(b.shape()[0] == B && b.shape()[2] == d, "concat_seq: shape mismatch");
  std::size_t S2 = b.shape()[1];
  Eigen::ArrayXd out(B * (S1 + S2) * d);
  for (std::size_t i = 0; i < B; ++i) {
    std::copy_n(a.data().data() + i * S1 * d, S1 * d, out.data() + i * (S1 + S2) * d);
    std::copy_n(b.data().data() + i * S2 * d, S2 * d, out.data() + i * (S1 + S2) * d + S1 * d);
  }
  auto n = make_node({B, S1 + S2, d}, std::move(out), {a.node(), b.node()});
  n->backward_fn = [B, S1, S2, d](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    for (std::size_t i = 0; i < B; ++i) {
      const double* g = self.grad.data() + i * (S1 + S2) * d;
      if (pa->requires_grad) {
        pa->ensure_grad();
        double* dst = pa->grad.data() + i * S1 * d;
        for (std::size_t j = 0; j < S1 * d; ++j) dst[j] += g[j];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        double* dst = pb->grad.data() + i * S2 * d;
        for (std::size_t j = 0; j < S2 * d; ++j) dst[j] += g[S1 * d + j];
      }
    }
  };
  return Value(n);
}

Value split_heads(const Value& a, std::size_t heads) {
  check_rank3(a, "split_heads");
  std::size_t B = a.shape()[0], S = a.shape()[1], d = a.shape()[2];
  check(d % heads == 0, "split_heads: d not divisible by heads");
  std::size_t dh = d / heads;
  Eigen::ArrayXd out(B * heads * S * dh);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(a.data().data() + (b * S + s) * d + h * dh, dh,
                    out.data() + ((b * heads + h) * S + s) * dh);
  auto n = make_node({B * heads, S, dh}, std::move(out), {a.node()});
  n->backward_fn = [B, S, d, heads, dh](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t h = 0; h < heads; ++h) {
          const double* g = self.grad.data() + ((b * heads + h) * S + s) * dh;
          double* dst = p->grad.data() + (b * S + s) * d + h * dh;
          for (std::size_t j = 0; j < dh; ++j) dst[j] += g[j];
        }
  };
  return Value(n);
}

Value merge_heads(const Value& a, std::size_t heads) {
  check_rank3(a, "merge_heads");
  std::size_t Bh = a.shape()[0], S = a.shape()[1], dh = a.shape()[2];
  check(Bh % heads == 0, "merge_heads: batch not divisible by heads");
  std::size_t B = Bh / heads, d = dh * heads;
  Eigen::ArrayXd out(B * S * d);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(a.data().data() + ((b * heads + h) * S + s) * dh, dh,
                    out.data() + (b * S + s) * d + h * dh);
  auto n = make_node({B, S, d}, std::move(out), {a.node()});
  n->backward_fn = [B, S, d, heads, dh](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t h = 0; h < heads; ++h) {
          const double* g = self.grad.data() + (b * S + s) * d + h * dh;
          double* dst = p->grad.data() + ((b * heads + h) * S + s) * dh;
          for (std::size_t j = 0; j < dh; ++j) dst[j] += g[j];
        }
  };
  return Value(n);
}

Value add_broadcast_seq(const Value& x, const Value& pos) {
  check_rank3(x, "add_broadcast_seq");
  check(pos.shape().size() == 2, "add_broadcast_seq: pos rank 2 required");
  std::size_t B = x.shape()[0], S = x.shape()[1], d = x.shape()[2];
  check(pos.shape()[0] == S && pos.shape()[1] == d, "add_broadcast_seq: pos shape mismatch");
  Eigen::ArrayXd out = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < S * d; ++i) out[b * S * d + i] += pos.data()[i];
  auto n = make_node(x.shape(), std::move(out), {x.node(), pos.node()});
  n->backward_fn = [B, S, d](Node& self) {
    auto& px = self.parents[0];
    auto& pp = self.parents[1];
    if (px->requires_grad) {
      px->ensure_grad();
      px->grad += self.grad;
    }
    if (pp->requires_grad) {
      pp->ensure_grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < S * d; ++i) pp->grad[i] += self.grad[b * S * d + i];
    }
  };
  return Value(n);
}

Value repeat_to_batch(const Value& table, std::size_t b) {
  check(table.shape().size() == 2, "repeat_to_batch: rank-2 table required");
  std::size_t K = table.shape()[0], d = table.shape()[1];
  Eigen::ArrayXd out(b * K * d);
  for (std::size_t i = 0; i < b; ++i)
    std::copy_n(table.data().data(), K * d, out.data() + i * K * d);
  auto n = make_node({b, K, d}, std::move(out), {table.node()});
  n->backward_fn = [b, K, d](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < K * d; ++j) p->grad[j] += self.grad[i * K * d + j];
  };
  return Value(n);
}

Value add_bias(const Value& x, const Value& b) {
  check(x.shape().size() == 2, "add_bias: rank-2 required");
  std::size_t R = x.shape()[0], C = x.shape()[1];
  check(b.shape() == Shape{C}, "add_bias: bias shape mismatch");
  Eigen::ArrayXd out = x.data();
  for (std::size_t r = 0; r < R; ++r)
    out.segment(static_cast<Eigen::Index>(r * C), static_cast<Eigen::Index>(C)) += b.data();
  auto n = make_node(x.shape(), std::move(out), {x.node(), b.node()});
  n->backward_fn = [R, C](Node& self) {
    auto& px = self.parents[0];
    auto& pb = self.parents[1];
    if (px->requires_grad) {
      px->ensure_grad();
      px->grad += self.grad;
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t r = 0; r < R; ++r)
        pb->grad += self.grad.segment(static_cast<Eigen::Index>(r * C), static_cast<Eigen::Index>(C));
    }
  };
  return Value(n);
}

Value concat_cols(const Value& a, const Value& b) {
  check(a.shape().size() == 2 && b.shape().size() == 2, "concat_cols: rank-2 required");
  std::size_t R = a.shape()[0], C1 = a.shape()[1], C2 = b.shape()[1];
  check(b.shape()[0] == R, "concat_cols: row mismatch");
  Eigen::ArrayXd out(static_cast<Eigen::Index>(R * (C1 + C2)));
  for (std::size_t r = 0; r < R; ++r) {
    out.segment(static_cast<Eigen::Index>(r * (C1 + C2)), static_cast<Eigen::Index>(C1)) =
        a.data().segment(static_cast<Eigen::Index>(r * C1), static_cast<Eigen::Index>(C1));
    out.segment(static_cast<Eigen::Index>(r * (C1 + C2) + C1), static_cast<Eigen::Index>(C2)) =
        b.data().segment(static_cast<Eigen::Index>(r * C2), static_cast<Eigen::Index>(C2));
  }
  auto n = make_node({R, C1 + C2}, std::move(out), {a.node(), b.node()});
  n->backward_fn = [R, C1, C2](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    for (std::size_t r = 0; r < R; ++r) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        pa->grad.segment(static_cast<Eigen::Index>(r * C1), static_cast<Eigen::Index>(C1)) +=
            self.grad.segment(static_cast<Eigen::Index>(r * (C1 + C2)), static_cast<Eigen::Index>(C1));
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        pb->grad.segment(static_cast<Eigen::Index>(r * C2), static_cast<Eigen::Index>(C2)) +=
            self.grad.segment(static_cast<Eigen::Index>(r * (C1 + C2) + C1), static_cast<Eigen::Index>(C2));
      }
    }
  };
  return Value(n);
}

Value softmax_last(const Value& a) {
  std::size_t d = last_dim(a.shape());
  std::size_t rows = a.numel() / d;
  Eigen::ArrayXd out(a.data().size());
  {
    for (std::size_t r = 0; r < rows; ++r) {
      auto row = a.data().segment(static_cast<Eigen::Index>(r * d), static_cast<Eigen::Index>(d));
      out.segment(static_cast<Eigen::Index>(r * d), static_cast<Eigen::Index>(d)) =
          row - row.maxCoeff();
    }
    out = out.exp();  // one flat vectorized pass
    for (std::size_t r = 0; r < rows; ++r) {
      auto row = out.segment(static_cast<Eigen::Index>(r * d), static_cast<Eigen::Index>(d));
      row /= row.sum();
    }
  }
  auto n = make_node(a.shape(), std::move(out), {a.node()});
  n->backward_fn = [rows, d](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    MapConstMat Y(self.value.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(d));
    MapConstMat G(self.grad.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(d));
    MapMat dX(p->grad.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(d));
    Eigen::VectorXd dots = (G.array() * Y.array()).rowwise().sum().matrix();
    dX.array() += Y.array() * (G.array().colwise() - dots.array());
  };
  return Value(n);
}

Value layernorm(const Value& a, const Value& gamma, const Value& beta, double eps) {
  std::size_t d = last_dim(a.shape());
  check(gamma.shape() == Shape{d} && beta.shape() == Shape{d}, "layernorm: affine shape mismatch");
  std::size_t rows = a.numel() / d;
  Eigen::ArrayXd out(a.data().size());
  Eigen::ArrayXd xhat(a.data().size());
  Eigen::ArrayXd inv_std(static_cast<Eigen::Index>(rows));
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = a.data().segment(static_cast<Eigen::Index>(r * d), static_cast<Eigen::Index>(d));
    double mu = row.mean();
    double var = (row - mu).square().mean();
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<Eigen::Index>(r)] = is;
    auto xh = (row - mu) * is;
    xhat.segment(static_cast<Eigen::Index>(r * d), static_cast<Eigen::Index>(d)) = xh;
    out.segment(static_cast<Eigen::Index>(r * d), static_cast<Eigen::Index>(d)) =
        xh * gamma.data() + beta.data();
  }
  auto n = make_node(a.shape(), std::move(out), {a.node(), gamma.node(), beta.node()});
  n->backward_fn = [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
    auto& px = self.parents[0];
    auto& pg = self.parents[1];
    auto& pb = self.parents[2];
    for (std::size_t r = 0; r < rows; ++r) {
      auto g = self.grad.segment(static_cast<Eigen::Index>(r * d), static_cast<Eigen::Index>(d));
      auto xh = xhat.segment(static_cast<Eigen::Index>(r * d), static_cast<Eigen::Index>(d));
      if (pg->requires_grad) {
        pg->ensure_grad();
        pg->grad += g * xh;
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        pb->grad += g;
      }
      if (px->requires_grad) {
        px->ensure_grad();
        Eigen::ArrayXd dxh = g * pg->value;
        double mean_dxh = dxh.mean();
        double mean_dxh_xh = (dxh * xh).mean();
        px->grad.segment(static_cast<Eigen::Index>(r * d), static_cast<Eigen::Index>(d)) +=
            (dxh - mean_dxh - xh * mean_dxh_xh) * inv_std[static_cast<Eigen::Index>(r)];
      }
    }
  };
  return Value(n);
}

Value l2_normalize_rows(const Value& a, double eps) {
  check(a.shape().size() == 2, "l2_normalize_rows: rank-2 required");
  std::size_t rows = a.shape()[0], d = a.shape()[1];
  Eigen::ArrayXd out(a.data().size());
  Eigen::ArrayXd norms(static_cast<Eigen::Index>(rows));
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = a.data().segment(static_cast<Eigen::Index>(r * d), static_cast<Eigen::Index>(d));
    double nrm = std::sqrt(row.square().sum());
    double neff = std::max(nrm, eps);
    norms[static_cast<Eigen::Index>(r)] = neff;
    out.segment(static_cast<Eigen::Index>(r * d), static_cast<Eigen::Index>(d)) = row / neff;
  }
  auto n = make_node(a.shape(), std::move(out), {a.node()});
  n->backward_fn = [rows, d, norms = std::move(norms), eps](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      auto x = p->value.segment(static_cast<Eigen::Index>(r * d), static_cast<Eigen::Index>(d));
      auto g = self.grad.segment(static_cast<Eigen::Index>(r * d), static_cast<Eigen::Index>(d));
      double neff = norms[static_cast<Eigen::Index>(r)];
      double raw = std::sqrt(x.square().sum());
      if (raw > eps) {
        double dot = (g * x).sum();
        p->grad.segment(static_cast<Eigen::Index>(r * d), static_cast<Eigen::Index>(d)) +=
            g / neff - x * (dot / (neff * neff * neff));
      } else {
        p->grad.segment(static_cast<Eigen::Index>(r * d), static_cast<Eigen::Index>(d)) += g / neff;
      }
    }
  };
  return Value(n);
}

Value mean_all(const Value& a) {
  std::size_t n_el = a.numel();
  Eigen::ArrayXd out(1);
  out[0] = a.data().mean();
  auto n = make_node({1}, std::move(out), {a.node()});
  n->backward_fn = [n_el](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    p->grad += self.grad[0] / static_cast<double>(n_el);
  };
  return Value(n);
}

Value sum_all(const Value& a) {
  Eigen::ArrayXd out(1);
  out[0] = a.data().sum();
  auto n = make_node({1}, std::move(out), {a.node()});
  n->backward_fn = [](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    p->grad += self.grad[0];
  };
  return Value(n);
}

Value mean_axis0(const Value& a) {
  check(a.shape().size() == 2, "mean_axis0: rank-2 required");
  std::size_t R = a.shape()[0], C = a.shape()[1];
  Eigen::ArrayXd out = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(C));
  for (std::size_t r = 0; r < R; ++r)
    out += a.data().segment(static_cast<Eigen::Index>(r * C), static_cast<Eigen::Index>(C));
  out /= static_cast<double>(R);
  auto n = make_node({C}, std::move(out), {a.node()});
  n->backward_fn = [R, C](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t r = 0; r < R; ++r)
      p->grad.segment(static_cast<Eigen::Index>(r * C), static_cast<Eigen::Index>(C)) +=
          self.grad / static_cast<double>(R);
  };
  return Value(n);
}

Value mean_axis1_of3(const Value& a) {
  check_rank3(a, "mean_axis1_of3");
  std::size_t A = a.shape()[0], B = a.shape()[1], d = a.shape()[2];
  Eigen::ArrayXd out = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(A * d));
  for (std::size_t i = 0; i < A; ++i)
    for (std::size_t j = 0; j < B; ++j)
      out.segment(static_cast<Eigen::Index>(i * d), static_cast<Eigen::Index>(d)) +=
          a.data().segment(static_cast<Eigen::Index>((i * B + j) * d), static_cast<Eigen::Index>(d));
  out /= static_cast<double>(B);
  auto n = make_node({A, d}, std::move(out), {a.node()});
  n->backward_fn = [A, B, d](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < A; ++i)
      for (std::size_t j = 0; j < B; ++j)
        p->grad.segment(static_cast<Eigen::Index>((i * B + j) * d), static_cast<Eigen::Index>(d)) +=
            self.grad.segment(static_cast<Eigen::Index>(i * d), static_cast<Eigen::Index>(d)) /
            static_cast<double>(B);
  };
  return Value(n);
}

Value rowwise_dot(const Value& x, const Value& w) {
  check(x.shape().size() == 2 && x.shape() == w.shape(), "rowwise_dot: shape mismatch");
  std::size_t K = x.shape()[0], d = x.shape()[1];
  Eigen::ArrayXd out(static_cast<Eigen::Index>(K));
  for (std::size_t k = 0; k < K; ++k)
    out[static_cast<Eigen::Index>(k)] =
        (x.data().segment(static_cast<Eigen::Index>(k * d), static_cast<Eigen::Index>(d)) *
         w.data().segment(static_cast<Eigen::Index>(k * d), static_cast<Eigen::Index>(d)))
            .sum();
  auto n = make_node({K}, std::move(out), {x.node(), w.node()});
  n->backward_fn = [K, d](Node& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    for (std::size_t k = 0; k < K; ++k) {
      double g = self.grad[static_cast<Eigen::Index>(k)];
      if (px->requires_grad) {
        px->ensure_grad();
        px->grad.segment(static_cast<Eigen::Index>(k * d), static_cast<Eigen::Index>(d)) +=
            g * pw->value.segment(static_cast<Eigen::Index>(k * d), static_cast<Eigen::Index>(d));
      }
      if (pw->requires_grad) {
        pw->ensure_grad();
        pw->grad.segment(static_cast<Eigen::Index>(k * d), static_cast<Eigen::Index>(d)) +=
            g * px->value.segment(static_cast<Eigen::Index>(k * d), static_cast<Eigen::Index>(d));
      }
    }
  };
  return Value(n);
}

Value dense_scores(const Value& tokens, const Value& w) {
  check_rank3(tokens, "dense_scores");
  check(w.shape().size() == 2, "dense_scores: w rank-2 required");
  std::size_t P = tokens.shape()[0], K = tokens.shape()[1], d = tokens.shape()[2];
  check(w.shape()[0] == K && w.shape()[1] == d, "dense_scores: weight shape mismatch");
  Eigen::ArrayXd out(static_cast<Eigen::Index>(P * K));
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t k = 0; k < K; ++k)
      out[static_cast<Eigen::Index>(p * K + k)] =
          (tokens.data().segment(static_cast<Eigen::Index>((p * K + k) * d), static_cast<Eigen::Index>(d)) *
           w.data().segment(static_cast<Eigen::Index>(k * d), static_cast<Eigen::Index>(d)))
              .sum();
  auto n = make_node({P, K}, std::move(out), {tokens.node(), w.node()});
  n->backward_fn = [P, K, d](Node& self) {
    auto& pt = self.parents[0];
    auto& pw = self.parents[1];
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t k = 0; k < K; ++k) {
        double g = self.grad[static_cast<Eigen::Index>(p * K + k)];
        if (g == 0.0) continue;
        if (pt->requires_grad) {
          pt->ensure_grad();
          pt->grad.segment(static_cast<Eigen::Index>((p * K + k) * d), static_cast<Eigen::Index>(d)) +=
              g * pw->value.segment(static_cast<Eigen::Index>(k * d), static_cast<Eigen::Index>(d));
        }
        if (pw->requires_grad) {
          pw->ensure_grad();
          pw->grad.segment(static_cast<Eigen::Index>(k * d), static_cast<Eigen::Index>(d)) +=
              g * pt->value.segment(static_cast<Eigen::Index>((p * K + k) * d), static_cast<Eigen::Index>(d));
        }
      }
  };
  return Value(n);
}

Value minmax_norm_cols_grouped(const Value& a, std::size_t groups) {
  check(a.shape().size() == 2, "minmax_norm_cols: rank-2 required");
  check(groups >= 1 && a.shape()[0] % groups == 0, "minmax_norm_cols: bad group count");
  std::size_t P = a.shape()[0] / groups, K = a.shape()[1];
  Eigen::ArrayXd out(static_cast<Eigen::Index>(groups * P * K));
  std::vector<std::size_t> imin(groups * K), imax(groups * K);
  std::vector<double> range(groups * K);
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t k = 0; k < K; ++k) {
      std::size_t base = g * P;
      double mn = a.data()[static_cast<Eigen::Index>(base * K + k)], mx = mn;
      std::size_t am = base, aM = base;
      for (std::size_t p = 1; p < P; ++p) {
        double v = a.data()[static_cast<Eigen::Index>((base + p) * K + k)];
        if (v < mn) {
          mn = v;
          am = base + p;
        }
        if (v > mx) {
          mx = v;
          aM = base + p;
        }
      }
      double R = mx - mn;
      imin[g * K + k] = am;
      imax[g * K + k] = aM;
      range[g * K + k] = R;
      for (std::size_t p = 0; p < P; ++p)
        out[static_cast<Eigen::Index>((base + p) * K + k)] =
            R > 0.0 ? (a.data()[static_cast<Eigen::Index>((base + p) * K + k)] - mn) / R : 0.0;
    }
  auto n = make_node(a.shape(), std::move(out), {a.node()});
  n->backward_fn = [groups, P, K, imin = std::move(imin), imax = std::move(imax),
                    range = std::move(range)](Node& self) {
    auto& p0 = self.parents[0];
    if (!p0->requires_grad) return;
    p0->ensure_grad();
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t k = 0; k < K; ++k) {
        double R = range[g * K + k];
        if (R <= 0.0) continue;
        std::size_t base = g * P;
        double gsum = 0.0, gysum = 0.0;
        for (std::size_t p = 0; p < P; ++p) {
          double gg = self.grad[static_cast<Eigen::Index>((base + p) * K + k)];
          gsum += gg;
          gysum += gg * self.value[static_cast<Eigen::Index>((base + p) * K + k)];
        }
        for (std::size_t p = 0; p < P; ++p)
          p0->grad[static_cast<Eigen::Index>((base + p) * K + k)] +=
              self.grad[static_cast<Eigen::Index>((base + p) * K + k)] / R;
        p0->grad[static_cast<Eigen::Index>(imin[g * K + k] * K + k)] += (-gsum + gysum) / R;
        p0->grad[static_cast<Eigen::Index>(imax[g * K + k] * K + k)] += -gysum / R;
      }
  };
  return Value(n);
}

Value minmax_norm_cols(const Value& a) { return minmax_norm_cols_grouped(a, 1); }

Value bce_with_logits(const Value& logits, const std::vector<double>& targets) {
  check(logits.shape().size() == 1, "bce_with_logits: rank-1 logits required");
  std::size_t K = logits.shape()[0];
  check(targets.size() == K, "bce_with_logits: target size mismatch");
  double loss = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    double z = logits.data()[static_cast<Eigen::Index>(k)];
    double y = targets[k];
    loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  Eigen::ArrayXd out(1);
  out[0] = loss / static_cast<double>(K);
  auto n = make_node({1}, std::move(out), {logits.node()});
  n->backward_fn = [K, targets](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    double g = self.grad[0] / static_cast<double>(K);
    for (std::size_t k = 0; k < K; ++k) {
      double z = p->value[static_cast<Eigen::Index>(k)];
      double sig = 1.0 / (1.0 + std::exp(-z));
      p->grad[static_cast<Eigen::Index>(k)] += g * (sig - targets[k]);
    }
  };
  return Value(n);
}

Value gather_cols(const Value& s, const std::vector<std::size_t>& idx) {
  check(s.shape().size() == 2, "gather_cols: rank-2 required");
  std::size_t N = s.shape()[0], P = s.shape()[1];
  check(idx.size() == N, "gather_cols: index count mismatch");
  Eigen::ArrayXd out(static_cast<Eigen::Index>(N));
  for (std::size_t i = 0; i < N; ++i) {
    check(idx[i] < P, "gather_cols: index out of range");
    out[static_cast<Eigen::Index>(i)] = s.data()[static_cast<Eigen::Index>(i * P + idx[i])];
  }
  auto n = make_node({N}, std::move(out), {s.node()});
  n->backward_fn = [N, P, idx](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < N; ++i)
      p->grad[static_cast<Eigen::Index>(i * P + idx[i])] += self.grad[static_cast<Eigen::Index>(i)];
  };
  return Value(n);
}

Value masked_lse_rows(const Value& s, const std::vector<std::uint8_t>& mask) {
  check(s.shape().size() == 2, "masked_lse_rows: rank-2 required");
  std::size_t N = s.shape()[0], P = s.shape()[1];
  check(mask.size() == N * P, "masked_lse_rows: mask size mismatch");
  Eigen::ArrayXd out(static_cast<Eigen::Index>(N));
  for (std::size_t i = 0; i < N; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < P; ++j)
      if (mask[i * P + j]) m = std::max(m, s.data()[static_cast<Eigen::Index>(i * P + j)]);
    check(std::isfinite(m), "masked_lse_rows: empty row mask");
    double acc = 0.0;
    for (std::size_t j = 0; j < P; ++j)
      if (mask[i * P + j]) acc += std::exp(s.data()[static_cast<Eigen::Index>(i * P + j)] - m);
    out[static_cast<Eigen::Index>(i)] = m + std::log(acc);
  }
  auto n = make_node({N}, std::move(out), {s.node()});
  n->backward_fn = [N, P, mask](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < N; ++i) {
      double lse = self.value[static_cast<Eigen::Index>(i)];
      double g = self.grad[static_cast<Eigen::Index>(i)];
      if (g == 0.0) continue;
      for (std::size_t j = 0; j < P; ++j)
        if (mask[i * P + j])
          p->grad[static_cast<Eigen::Index>(i * P + j)] +=
              g * std::exp(p->value[static_cast<Eigen::Index>(i * P + j)] - lse);
    }
  };
  return Value(n);
}

Value gather_pk(const Value& x, const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  check_rank3(x, "gather_pk");
  std::size_t P = x.shape()[0], K = x.shape()[1], d = x.shape()[2];
  std::size_t N = pairs.size();
  Eigen::ArrayXd out(static_cast<Eigen::Index>(N * d));
  for (std::size_t i = 0; i < N; ++i) {
    auto [p, k] = pairs[i];
    check(p < P && k < K, "gather_pk: index out of range");
    out.segment(static_cast<Eigen::Index>(i * d), static_cast<Eigen::Index>(d)) =
        x.data().segment(static_cast<Eigen::Index>((p * K + k) * d), static_cast<Eigen::Index>(d));
  }
  auto n = make_node({N, d}, std::move(out), {x.node()});
  n->backward_fn = [K, d, pairs](Node& self) {
    auto& px = self.parents[0];
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      auto [p, k] = pairs[i];
      px->grad.segment(static_cast<Eigen::Index>((p * K + k) * d), static_cast<Eigen::Index>(d)) +=
          self.grad.segment(static_cast<Eigen::Index>(i * d), static_cast<Eigen::Index>(d));
    }
  };
  return Value(n);
}

Value l1_alignment(const Value& m, const Eigen::ArrayXd& target,
                   const std::vector<std::uint8_t>& present) {
  check(m.shape().size() == 2, "l1_alignment: rank-2 required");
  std::size_t P = m.shape()[0], K = m.shape()[1];
  check(static_cast<std::size_t>(target.size()) == P * K, "l1_alignment: target size mismatch");
  check(present.size() == K, "l1_alignment: labels size mismatch");
  double loss = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    if (!present[k]) continue;
    double acc = 0.0;
    for (std::size_t p = 0; p < P; ++p)
      acc += std::abs(m.data()[static_cast<Eigen::Index>(p * K + k)] -
                      target[static_cast<Eigen::Index>(p * K + k)]);
    loss += acc / static_cast<double>(P);
  }
  Eigen::ArrayXd out(1);
  out[0] = loss;
  auto n = make_node({1}, std::move(out), {m.node()});
  n->backward_fn = [P, K, target, present](Node& self) {
    auto& p0 = self.parents[0];
    if (!p0->requires_grad) return;
    p0->ensure_grad();
    double g = self.grad[0] / static_cast<double>(P);
    for (std::size_t k = 0; k < K; ++k) {
      if (!present[k]) continue;
      for (std::size_t p = 0; p < P; ++p) {
        double diff = p0->value[static_cast<Eigen::Index>(p * K + k)] -
                      target[static_cast<Eigen::Index>(p * K + k)];
        double s = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
        p0->grad[static_cast<Eigen::Index>(p * K + k)] += g * s;
      }
    }
  };
  return Value(n);
}

Value ce_patch_upsampled(const Value& logits, const std::vector<std::uint16_t>& labels,
                         std::size_t grid_h, std::size_t grid_w, std::size_t patch_h,
                         std::size_t patch_w, std::uint16_t ignore_label) {
  check(logits.shape().size() == 2, "ce_patch_upsampled: rank-2 logits required");
  std::size_t P = logits.shape()[0], C = logits.shape()[1];
  check(P == grid_h * grid_w, "ce_patch_upsampled: grid mismatch");
  std::size_t H = grid_h * patch_h, W = grid_w * patch_w;
  check(labels.size() == H * W, "ce_patch_upsampled: label map size mismatch");

  // Per-patch class counts over the labelled pixels it covers.
  std::vector<double> counts(P * C, 0.0);
  std::size_t n_pix = 0;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      std::uint16_t lab = labels[y * W + x];
      if (lab == ignore_label) continue;
      check(lab < C, "ce_patch_upsampled: label out of range");
      std::size_t p = (y / patch_h) * grid_w + (x / patch_w);
      counts[p * C + lab] += 1.0;
      ++n_pix;
    }

  Eigen::ArrayXd logp(static_cast<Eigen::Index>(P * C));
  for (std::size_t p = 0; p < P; ++p) {
    auto row = logits.data().segment(static_cast<Eigen::Index>(p * C), static_cast<Eigen::Index>(C));
    double m = row.maxCoeff();
    double lse = m + std::log((row - m).exp().sum());
    logp.segment(static_cast<Eigen::Index>(p * C), static_cast<Eigen::Index>(C)) = row - lse;
  }

  double loss = 0.0;
  if (n_pix > 0) {
    for (std::size_t i = 0; i < P * C; ++i)
      loss -= counts[i] * logp[static_cast<Eigen::Index>(i)];
    loss /= static_cast<double>(n_pix);
  }
  Eigen::ArrayXd out(1);
  out[0] = loss;
  auto n = make_node({1}, std::move(out), {logits.node()});
  n->backward_fn = [P, C, counts = std::move(counts), n_pix, logp = std::move(logp)](Node& self) {
    auto& p0 = self.parents[0];
    if (!p0->requires_grad || n_pix == 0) return;
    p0->ensure_grad();
    double g = self.grad[0] / static_cast<double>(n_pix);
    for (std::size_t p = 0; p < P; ++p) {
      double np = 0.0;
      for (std::size_t c = 0; c < C; ++c) np += counts[p * C + c];
      if (np == 0.0) continue;
      for (std::size_t c = 0; c < C; ++c) {
        double soft = std::exp(logp[static_cast<Eigen::Index>(p * C + c)]);
        p0->grad[static_cast<Eigen::Index>(p * C + c)] += g * (np * soft - counts[p * C + c]);
      }
    }
  };
  return Value(n);
}

void backward(const Value& root) {
  if (root.numel() != 1) throw ContractError("ad: backward root must be scalar");
  if (!root.node()->requires_grad) return;

  // Post-order DFS restricted to the grad-requiring subgraph.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    bool descended = false;
    while (next < node->parents.size()) {
      Node* parent = node->parents[next].get();
      ++next;
      if (!parent->requires_grad || visited.count(parent)) continue;
      visited.insert(parent);
      stack.emplace_back(parent, 0);
      descended = true;
      break;
    }
    if (!descended && (stack.back().second >= stack.back().first->parents.size())) {
      order.push_back(stack.back().first);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad();
  root.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && node->grad.size() == node->value.size()) node->backward_fn(*node);
  }
}

Value ParamStore::create(const std::string& name, Shape shape, Eigen::ArrayXd data) {
  if (has(name)) throw ContractError("params: duplicate name " + name);
  Value v = param(std::move(shape), std::move(data));
  items_.emplace_back(name, v);
  return v;
}

Value ParamStore::get(const std::string& name) const {
  for (const auto& [n, v] : items_)
    if (n == name) return v;
  throw ContractError("params: missing name " + name);
}

bool ParamStore::has(const std::string& name) const {
  for (const auto& [n, v] : items_)
    if (n == name) return true;
  return false;
}

void ParamStore::zero_grad() {
  for (auto& [n, v] : items_) {
    v.node()->ensure_grad();
    v.node()->grad.setZero();
  }
}

void AdamW::step(ParamStore& params, double lr) {
  auto& items = params.items();
  if (m_.empty()) {
    m_.resize(items.size());
    v_.resize(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
      m_[i] = Eigen::ArrayXd::Zero(items[i].second.data().size());
      v_[i] = Eigen::ArrayXd::Zero(items[i].second.data().size());
    }
  }
  if (m_.size() != items.size()) throw ContractError("adamw: parameter set changed");
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto node = items[i].second.node();
    node->ensure_grad();
    const Eigen::ArrayXd& g = node->grad;
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.square();
    Eigen::ArrayXd mhat = m_[i] / bc1;
    Eigen::ArrayXd vhat = v_[i] / bc2;
    node->value -= lr * (mhat / (vhat.sqrt() + eps_) + weight_decay_ * node->value);
  }
}

}  // namespace exact::ad
