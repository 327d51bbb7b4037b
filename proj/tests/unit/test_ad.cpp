#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "exact/ad.h"
#include "exact/error.h"
#include "exact/tensor.h"
#include "test_util.h"

using namespace exact;
using testutil::grad_check;
using testutil::random_array;

namespace {

// Runs fn on a leaf built from x, backpropagates, and FD-checks the leaf
// gradient.
double check_op(const ad::Shape& shape, const Eigen::ArrayXd& x,
                const std::function<ad::Value(const ad::Value&)>& fn) {
  ad::Value leaf = ad::param(shape, x);
  ad::Value out = fn(leaf);
  ad::backward(out);
  Eigen::ArrayXd analytic = leaf.grad();
  auto eval = [&](const Eigen::ArrayXd& xv) {
    ad::Value l = ad::constant(shape, xv);
    return fn(l).scalar();
  };
  return grad_check(eval, x, analytic);
}

}  // namespace

TEST_CASE("elementwise op gradients") {
  Rng rng(1, "ad");
  Eigen::ArrayXd x = random_array(rng, 24);
  CHECK(check_op({4, 6}, x, [](const ad::Value& v) { return ad::mean_all(ad::gelu(v)); }) < 1e-4);
  CHECK(check_op({4, 6}, x, [](const ad::Value& v) {
          return ad::sum_all(ad::mul(v, ad::scale(v, 0.5)));
        }) < 1e-4);
  Eigen::ArrayXd shifted = x + 2.0;  // keep relu away from the kink
  CHECK(check_op({4, 6}, shifted, [](const ad::Value& v) {
          return ad::mean_all(ad::relu(v));
        }) < 1e-4);
}

TEST_CASE("linear and bias gradients") {
  Rng rng(2, "ad");
  Eigen::ArrayXd x = random_array(rng, 3 * 5);
  Eigen::ArrayXd w = random_array(rng, 5 * 4);
  Eigen::ArrayXd b = random_array(rng, 4);

  ad::Value xv = ad::param({3, 5}, x);
  ad::Value wv = ad::param({5, 4}, w);
  ad::Value bv = ad::param({4}, b);
  ad::Value out = ad::mean_all(ad::linear(xv, wv, &bv));
  ad::backward(out);

  auto eval_x = [&](const Eigen::ArrayXd& v) {
    ad::Value b2 = ad::constant({4}, b);
    return ad::mean_all(ad::linear(ad::constant({3, 5}, v), ad::constant({5, 4}, w), &b2)).scalar();
  };
  CHECK(grad_check(eval_x, x, xv.grad()) < 1e-4);
  auto eval_w = [&](const Eigen::ArrayXd& v) {
    ad::Value b2 = ad::constant({4}, b);
    return ad::mean_all(ad::linear(ad::constant({3, 5}, x), ad::constant({5, 4}, v), &b2)).scalar();
  };
  CHECK(grad_check(eval_w, w, wv.grad()) < 1e-4);
  auto eval_b = [&](const Eigen::ArrayXd& v) {
    ad::Value b2 = ad::constant({4}, v);
    return ad::mean_all(ad::linear(ad::constant({3, 5}, x), ad::constant({5, 4}, w), &b2)).scalar();
  };
  CHECK(grad_check(eval_b, b, bv.grad()) < 1e-4);
}

TEST_CASE("bmm variants") {
  Rng rng(3, "ad");
  Eigen::ArrayXd a = random_array(rng, 2 * 3 * 4);
  Eigen::ArrayXd b = random_array(rng, 2 * 4 * 5);
  ad::Value av = ad::param({2, 3, 4}, a);
  ad::Value bv = ad::param({2, 4, 5}, b);
  ad::Value out = ad::mean_all(ad::bmm(av, bv));
  ad::backward(out);
  auto eval_a = [&](const Eigen::ArrayXd& v) {
    return ad::mean_all(ad::bmm(ad::constant({2, 3, 4}, v), ad::constant({2, 4, 5}, b))).scalar();
  };
  CHECK(grad_check(eval_a, a, av.grad()) < 1e-4);

  Eigen::ArrayXd c = random_array(rng, 2 * 5 * 4);
  ad::Value av2 = ad::param({2, 3, 4}, a);
  ad::Value cv = ad::param({2, 5, 4}, c);
  ad::Value out2 = ad::mean_all(ad::bmm_nt(av2, cv));
  ad::backward(out2);
  auto eval_c = [&](const Eigen::ArrayXd& v) {
    return ad::mean_all(ad::bmm_nt(ad::constant({2, 3, 4}, a), ad::constant({2, 5, 4}, v))).scalar();
  };
  CHECK(grad_check(eval_c, c, cv.grad()) < 1e-4);
}

TEST_CASE("softmax rows sum to one and gradient matches") {
  Rng rng(4, "ad");
  Eigen::ArrayXd x = random_array(rng, 3 * 7);
  ad::Value xv = ad::param({3, 7}, x);
  ad::Value sm = ad::softmax_last(xv);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 7; ++c) s += sm.data()[r * 7 + c];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  Eigen::ArrayXd w = random_array(rng, 3 * 7);
  ad::Value out = ad::sum_all(ad::mul(sm, ad::constant({3, 7}, w)));
  ad::backward(out);
  auto eval = [&](const Eigen::ArrayXd& v) {
    return ad::sum_all(ad::mul(ad::softmax_last(ad::constant({3, 7}, v)), ad::constant({3, 7}, w)))
        .scalar();
  };
  CHECK(grad_check(eval, x, xv.grad()) < 1e-4);
}

TEST_CASE("layernorm gradient for input and affine params") {
  Rng rng(5, "ad");
  Eigen::ArrayXd x = random_array(rng, 4 * 6);
  Eigen::ArrayXd g = random_array(rng, 6, 0.5, 1.5);
  Eigen::ArrayXd b = random_array(rng, 6);
  Eigen::ArrayXd w = random_array(rng, 4 * 6);

  ad::Value xv = ad::param({4, 6}, x);
  ad::Value gv = ad::param({6}, g);
  ad::Value bv = ad::param({6}, b);
  ad::Value out = ad::sum_all(ad::mul(ad::layernorm(xv, gv, bv), ad::constant({4, 6}, w)));
  ad::backward(out);

  auto eval_x = [&](const Eigen::ArrayXd& v) {
    return ad::sum_all(ad::mul(ad::layernorm(ad::constant({4, 6}, v), ad::constant({6}, g),
                                             ad::constant({6}, b)),
                               ad::constant({4, 6}, w)))
        .scalar();
  };
  CHECK(grad_check(eval_x, x, xv.grad()) < 1e-4);
  auto eval_g = [&](const Eigen::ArrayXd& v) {
    return ad::sum_all(ad::mul(ad::layernorm(ad::constant({4, 6}, x), ad::constant({6}, v),
                                             ad::constant({6}, b)),
                               ad::constant({4, 6}, w)))
        .scalar();
  };
  CHECK(grad_check(eval_g, g, gv.grad()) < 1e-4);
}

TEST_CASE("shape movement ops preserve exact values and gradients") {
  Rng rng(6, "ad");
  Eigen::ArrayXd x = random_array(rng, 2 * 5 * 6);
  ad::Value xv = ad::param({2, 5, 6}, x);

  // split/merge heads are inverse permutations
  ad::Value split = ad::split_heads(xv, 3);
  CHECK(split.shape() == ad::Shape{6, 5, 2});
  ad::Value merged = ad::merge_heads(split, 3);
  for (Eigen::Index i = 0; i < merged.data().size(); ++i) CHECK(merged.data()[i] == x[i]);

  ad::Value perm = ad::permute_102(xv);
  CHECK(perm.shape() == ad::Shape{5, 2, 6});
  CHECK(perm.data()[(3 * 2 + 1) * 6 + 4] == x[(1 * 5 + 3) * 6 + 4]);

  Eigen::ArrayXd w = random_array(rng, 2 * 2 * 6);
  ad::Value slice = ad::slice_seq(xv, 1, 2);
  ad::Value out = ad::sum_all(ad::mul(slice, ad::constant({2, 2, 6}, w)));
  ad::backward(out);
  auto eval = [&](const Eigen::ArrayXd& v) {
    return ad::sum_all(
               ad::mul(ad::slice_seq(ad::constant({2, 5, 6}, v), 1, 2), ad::constant({2, 2, 6}, w)))
        .scalar();
  };
  CHECK(grad_check(eval, x, xv.grad()) < 1e-4);
}

TEST_CASE("concat and broadcast gradients") {
  Rng rng(7, "ad");
  Eigen::ArrayXd a = random_array(rng, 2 * 3 * 4);
  Eigen::ArrayXd b = random_array(rng, 2 * 2 * 4);
  Eigen::ArrayXd pos = random_array(rng, 5 * 4);
  Eigen::ArrayXd w = random_array(rng, 2 * 5 * 4);

  ad::Value av = ad::param({2, 3, 4}, a);
  ad::Value pv = ad::param({5, 4}, pos);
  ad::Value cat = ad::concat_seq(av, ad::constant({2, 2, 4}, b));
  ad::Value out = ad::sum_all(ad::mul(ad::add_broadcast_seq(cat, pv), ad::constant({2, 5, 4}, w)));
  ad::backward(out);

  auto eval_a = [&](const Eigen::ArrayXd& v) {
    ad::Value cat2 = ad::concat_seq(ad::constant({2, 3, 4}, v), ad::constant({2, 2, 4}, b));
    return ad::sum_all(
               ad::mul(ad::add_broadcast_seq(cat2, ad::constant({5, 4}, pos)), ad::constant({2, 5, 4}, w)))
        .scalar();
  };
  CHECK(grad_check(eval_a, a, av.grad()) < 1e-4);
  auto eval_p = [&](const Eigen::ArrayXd& v) {
    ad::Value cat2 = ad::concat_seq(ad::constant({2, 3, 4}, a), ad::constant({2, 2, 4}, b));
    return ad::sum_all(
               ad::mul(ad::add_broadcast_seq(cat2, ad::constant({5, 4}, v)), ad::constant({2, 5, 4}, w)))
        .scalar();
  };
  CHECK(grad_check(eval_p, pos, pv.grad()) < 1e-4);

  ad::Value table = ad::param({3, 4}, random_array(rng, 12));
  ad::Value rep = ad::repeat_to_batch(table, 5);
  CHECK(rep.shape() == ad::Shape{5, 3, 4});
  ad::Value out2 = ad::sum_all(rep);
  ad::backward(out2);
  for (Eigen::Index i = 0; i < 12; ++i) CHECK(table.grad()[i] == doctest::Approx(5.0));
}

TEST_CASE("reduction and fused op gradients") {
  Rng rng(8, "ad");
  Eigen::ArrayXd x = random_array(rng, 6 * 3);
  CHECK(check_op({6, 3}, x, [](const ad::Value& v) {
          return ad::sum_all(ad::mul(ad::mean_axis0(v), ad::mean_axis0(v)));
        }) < 1e-4);

  Eigen::ArrayXd t = random_array(rng, 4 * 3 * 5);
  CHECK(check_op({4, 3, 5}, t, [](const ad::Value& v) {
          return ad::sum_all(ad::mul(ad::mean_axis1_of3(v), ad::mean_axis1_of3(v)));
        }) < 1e-4);

  Eigen::ArrayXd w = random_array(rng, 3 * 5);
  CHECK(check_op({4, 3, 5}, t, [&](const ad::Value& v) {
          return ad::mean_all(ad::dense_scores(v, ad::constant({3, 5}, w)));
        }) < 1e-4);

  Eigen::ArrayXd z = random_array(rng, 3 * 5);
  CHECK(check_op({3, 5}, z, [&](const ad::Value& v) {
          return ad::mean_all(ad::rowwise_dot(v, ad::constant({3, 5}, w)));
        }) < 1e-4);
}

TEST_CASE("minmax normalization value and gradient") {
  ad::Value v = ad::param({3, 1}, Eigen::ArrayXd{{0.0, 2.0, 4.0}});
  ad::Value n = ad::minmax_norm_cols(v);
  CHECK(n.data()[0] == 0.0);
  CHECK(n.data()[1] == 0.5);
  CHECK(n.data()[2] == 1.0);

  Rng rng(9, "ad");
  Eigen::ArrayXd x = random_array(rng, 7 * 2);
  Eigen::ArrayXd w = random_array(rng, 7 * 2);
  ad::Value xv = ad::param({7, 2}, x);
  ad::Value out = ad::sum_all(ad::mul(ad::minmax_norm_cols(xv), ad::constant({7, 2}, w)));
  ad::backward(out);
  auto eval = [&](const Eigen::ArrayXd& vv) {
    return ad::sum_all(ad::mul(ad::minmax_norm_cols(ad::constant({7, 2}, vv)), ad::constant({7, 2}, w)))
        .scalar();
  };
  CHECK(grad_check(eval, x, xv.grad()) < 1e-4);
}

TEST_CASE("l2 row normalization gradient") {
  Rng rng(10, "ad");
  Eigen::ArrayXd x = random_array(rng, 4 * 6, 0.2, 1.0);
  Eigen::ArrayXd w = random_array(rng, 4 * 6);
  CHECK(check_op({4, 6}, x, [&](const ad::Value& v) {
          return ad::sum_all(ad::mul(ad::l2_normalize_rows(v), ad::constant({4, 6}, w)));
        }) < 1e-4);
}

TEST_CASE("bce with logits values and gradient") {
  ad::Value z = ad::param({2}, Eigen::ArrayXd{{0.0, 0.0}});
  ad::Value loss = ad::bce_with_logits(z, {1.0, 0.0});
  CHECK(loss.scalar() == doctest::Approx(std::log(2.0)));

  Rng rng(11, "ad");
  Eigen::ArrayXd x = random_array(rng, 5, -3.0, 3.0);
  std::vector<double> targets = {1.0, 0.0, 1.0, 1.0, 0.0};
  CHECK(check_op({5}, x, [&](const ad::Value& v) { return ad::bce_with_logits(v, targets); }) <
        1e-4);
}

TEST_CASE("masked lse and gather gradients") {
  Rng rng(12, "ad");
  Eigen::ArrayXd s = random_array(rng, 3 * 4);
  std::vector<std::uint8_t> mask = {1, 1, 0, 1, 0, 1, 1, 1, 1, 1, 1, 0};
  std::vector<std::size_t> idx = {2, 0, 3};
  CHECK(check_op({3, 4}, s, [&](const ad::Value& v) {
          return ad::sum_all(ad::sub(ad::masked_lse_rows(v, mask), ad::gather_cols(v, idx)));
        }) < 1e-4);

  CHECK_THROWS_AS(ad::masked_lse_rows(ad::param({1, 2}, Eigen::ArrayXd{{1.0, 2.0}}), {0, 0}),
                  ContractError);
}

TEST_CASE("gather_pk routes gradients to the right slices") {
  Rng rng(13, "ad");
  Eigen::ArrayXd x = random_array(rng, 4 * 3 * 2);
  std::vector<std::pair<std::size_t, std::size_t>> pairs = {{0, 1}, {3, 2}, {0, 1}};
  Eigen::ArrayXd w = random_array(rng, 3 * 2);
  CHECK(check_op({4, 3, 2}, x, [&](const ad::Value& v) {
          return ad::sum_all(ad::mul(ad::gather_pk(v, pairs), ad::constant({3, 2}, w)));
        }) < 1e-4);
}

TEST_CASE("l1 alignment matches hand value and gradient") {
  Eigen::ArrayXd m(6);
  m << 0.1, 0.5, 0.3, 0.9, 0.0, 1.0;
  Eigen::ArrayXd target(6);
  target << 0.3, 0.5, 0.4, 0.4, 0.2, 0.8;
  std::vector<std::uint8_t> present = {1, 0};
  // Column 0 participates: |0.1-0.3| + |0.3-0.4| + |0.0-0.2| over 3 positions.
  ad::Value mv = ad::param({3, 2}, m);
  ad::Value loss = ad::l1_alignment(mv, target, present);
  CHECK(loss.scalar() == doctest::Approx((0.2 + 0.1 + 0.2) / 3.0));
  ad::backward(loss);
  CHECK(mv.grad()[1] == 0.0);  // absent class contributes nothing
  CHECK(mv.grad()[0] == doctest::Approx(-1.0 / 3.0));
}

TEST_CASE("ce over upsampled patches matches direct computation") {
  Rng rng(14, "ad");
  // 2x2 grid of patches, patch 2x2 -> 4x4 pixels, 3 classes.
  Eigen::ArrayXd logits = random_array(rng, 4 * 3);
  std::vector<std::uint16_t> labels(16);
  for (std::size_t i = 0; i < 16; ++i) labels[i] = static_cast<std::uint16_t>(i % 3);
  labels[5] = kIgnoreLabel;

  auto direct = [&](const Eigen::ArrayXd& lg) {
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) {
        std::uint16_t lab = labels[y * 4 + x];
        if (lab == kIgnoreLabel) continue;
        std::size_t p = (y / 2) * 2 + (x / 2);
        double mx = std::max({lg[p * 3], lg[p * 3 + 1], lg[p * 3 + 2]});
        double lse = mx + std::log(std::exp(lg[p * 3] - mx) + std::exp(lg[p * 3 + 1] - mx) +
                                   std::exp(lg[p * 3 + 2] - mx));
        total += lse - lg[p * 3 + lab];
        ++n;
      }
    return total / static_cast<double>(n);
  };

  ad::Value lv = ad::param({4, 3}, logits);
  ad::Value loss = ad::ce_patch_upsampled(lv, labels, 2, 2, 2, 2, kIgnoreLabel);
  CHECK(loss.scalar() == doctest::Approx(direct(logits)).epsilon(1e-12));
  ad::backward(loss);
  CHECK(grad_check(direct, logits, lv.grad()) < 1e-4);
}

TEST_CASE("detach stops gradients") {
  ad::Value x = ad::param({2}, Eigen::ArrayXd{{1.0, 2.0}});
  ad::Value y = ad::sum_all(ad::mul(ad::detach(x), x));
  ad::backward(y);
  CHECK(x.grad()[0] == doctest::Approx(1.0));  // only the live path
  CHECK(x.grad()[1] == doctest::Approx(2.0));
}

TEST_CASE("dropout identity at p=0 and mask consistency") {
  Rng rng(15, "drop");
  ad::Value x = ad::param({8}, Eigen::ArrayXd::Ones(8));
  ad::Value same = ad::dropout(x, 0.0, rng);
  CHECK(same.node().get() == x.node().get());
  ad::Value dropped = ad::dropout(x, 0.5, rng);
  for (Eigen::Index i = 0; i < 8; ++i) {
    bool zero = dropped.data()[i] == 0.0;
    bool scaled = dropped.data()[i] == doctest::Approx(2.0);
    CHECK((zero || scaled));
  }
}

TEST_CASE("shape mismatches raise contract errors") {
  ad::Value a = ad::param({2, 3}, Eigen::ArrayXd::Zero(6));
  ad::Value b = ad::param({3, 2}, Eigen::ArrayXd::Zero(6));
  CHECK_THROWS_AS(ad::add(a, b), ContractError);
  ad::Value w_bad = ad::param({2, 2}, Eigen::ArrayXd::Zero(4));
  CHECK_THROWS_AS(ad::linear(a, w_bad), ContractError);
  CHECK_THROWS_AS(ad::backward(a), ContractError);  // non-scalar root
}

TEST_CASE("adamw steps and weight decay move parameters deterministically") {
  ad::ParamStore ps;
  ad::Value p = ps.create("w", {2}, Eigen::ArrayXd{{1.0, -1.0}});
  ad::AdamW opt(0.9, 0.999, 1e-8, 0.1);
  ps.zero_grad();
  ad::Value loss = ad::sum_all(ad::mul(p, p));
  ad::backward(loss);
  opt.step(ps, 0.01);
  // grad = 2p -> normalized first step is lr*(1 + wd*|p|) in magnitude
  CHECK(p.data()[0] < 1.0);
  CHECK(p.data()[1] > -1.0);
  CHECK(p.data()[0] == doctest::Approx(-p.data()[1]));
}
