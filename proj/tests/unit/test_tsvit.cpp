#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "exact/error.h"
#include "exact/tsvit.h"
#include "test_util.h"

using namespace exact;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
  ModelConfig m;
  m.d = 16;
  m.temporal_layers = 2;
  m.spatial_layers = 1;
  m.heads = 4;
  m.patch_h = 2;
  m.patch_w = 2;
  m.K = 3;
  m.T = 5;
  m.C = 2;
  m.input_h = 8;
  m.input_w = 8;
  return m;
}

Tensor random_series(const ModelConfig& m, std::uint64_t seed) {
  Tensor s({m.T, m.C, m.input_h, m.input_w});
  Rng rng(seed, "series");
  for (auto& v : s.data) v = rng.uniform(0.0, 1.0);
  return s;
}

}  // namespace

TEST_CASE("patchify shapes: 16x16 with 2x2 patches gives 64 positions") {
  ModelConfig m = tiny_config();
  m.input_h = 16;
  m.input_w = 16;
  Rng init(1, "init");
  TSViT model(m, init);
  Tensor s = random_series(m, 2);
  ad::Value tokens = model.patchify(s);
  CHECK(tokens.shape() == ad::Shape{64, m.T, m.d});
}

TEST_CASE("patchify with T=1 keeps a singleton middle dim") {
  ModelConfig m = tiny_config();
  m.T = 1;
  Rng init(1, "init");
  TSViT model(m, init);
  Tensor s = random_series(m, 3);
  CHECK(model.patchify(s).shape() == ad::Shape{16, 1, m.d});
}

TEST_CASE("patchify is linear: zero input and zero bias give zero tokens") {
  ModelConfig m = tiny_config();
  Rng init(4, "init");
  TSViT model(m, init);
  model.params().get("patch_embed.bias").mutable_data().setZero();
  Tensor s({m.T, m.C, m.input_h, m.input_w});  // zeros
  ad::Value tokens = model.patchify(s);
  for (Eigen::Index i = 0; i < tokens.data().size(); ++i) CHECK(tokens.data()[i] == 0.0);
}

TEST_CASE("patchify rejects indivisible dims") {
  ModelConfig m = tiny_config();
  m.input_h = 9;
  CHECK_THROWS_AS(m.validate(), ConfigError);
}

TEST_CASE("temporal sequence length is K+T and attention rows are stochastic") {
  ModelConfig m = tiny_config();  // K=3, T=5 -> S=8
  Rng init(5, "init");
  TSViT model(m, init);
  Tensor s = random_series(m, 6);
  EncoderOutputs out = model.forward(s);
  REQUIRE(out.attention_stack.size() == m.temporal_layers);
  std::size_t S = m.K + m.T;
  std::size_t P = m.positions();
  for (const auto& layer : out.attention_stack) {
    REQUIRE(static_cast<std::size_t>(layer.size()) == P * m.heads * S * S);
    for (std::size_t row = 0; row < P * m.heads * S; ++row) {
      double sum = 0.0;
      for (std::size_t c = 0; c < S; ++c) sum += layer[static_cast<Eigen::Index>(row * S + c)];
      CHECK(std::abs(sum - 1.0) < 1e-5);
    }
  }
}

TEST_CASE("output shapes follow the spatial stage contract") {
  ModelConfig m = tiny_config();
  Rng init(7, "init");
  TSViT model(m, init);
  EncoderOutputs out = model.forward(random_series(m, 8));
  std::size_t P = m.positions();
  CHECK(out.z_t_dense.shape() == ad::Shape{P, m.K, m.d});
  CHECK(out.z_t_seq.shape() == ad::Shape{P, m.T, m.d});
  CHECK(out.z_s_dense.shape() == ad::Shape{m.K, P, m.d});
  CHECK(out.z_s_global.shape() == ad::Shape{m.K, m.d});
  CHECK(out.logits.shape() == ad::Shape{m.K});
  CHECK(out.t2c_raw.size() == static_cast<Eigen::Index>(P * m.K * m.T));
}

TEST_CASE("temporal encoder treats patches independently (permutation equivariance)") {
  ModelConfig m = tiny_config();
  Rng init(9, "init");
  TSViT model(m, init);
  Tensor s = random_series(m, 10);
  EncoderOutputs out = model.forward(s);

  // Permute the patch grid by permuting whole patch columns of the input.
  std::size_t nh = m.grid_h(), nw = m.grid_w(), P = nh * nw;
  std::vector<std::size_t> perm(P);
  for (std::size_t i = 0; i < P; ++i) perm[i] = (i * 7 + 3) % P;
  Tensor sp({m.T, m.C, m.input_h, m.input_w});
  for (std::size_t p = 0; p < P; ++p) {
    std::size_t q = perm[p];
    std::size_t py = p / nw, px = p % nw, qy = q / nw, qx = q % nw;
    for (std::size_t t = 0; t < m.T; ++t)
      for (std::size_t c = 0; c < m.C; ++c)
        for (std::size_t dy = 0; dy < m.patch_h; ++dy)
          for (std::size_t dx = 0; dx < m.patch_w; ++dx)
            sp.data[((t * m.C + c) * m.input_h + py * m.patch_h + dy) * m.input_w + px * m.patch_w +
                    dx] = s.data[((t * m.C + c) * m.input_h + qy * m.patch_h + dy) * m.input_w +
                                 qx * m.patch_w + dx];
  }
  EncoderOutputs outp = model.forward(sp);
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t k = 0; k < m.K; ++k)
      for (std::size_t j = 0; j < m.d; ++j) {
        double a = outp.z_t_dense.data()[static_cast<Eigen::Index>((p * m.K + k) * m.d + j)];
        double b = out.z_t_dense.data()[static_cast<Eigen::Index>((perm[p] * m.K + k) * m.d + j)];
        CHECK(std::abs(a - b) < 1e-12);
      }
}

TEST_CASE("spatial sequence length is 1+P and class-k output ignores other classes") {
  ModelConfig m = tiny_config();
  Rng init(11, "init");
  TSViT model(m, init);
  Tensor s = random_series(m, 12);
  EncoderOutputs base = model.forward(s);
  std::size_t P = m.positions();
  CHECK(base.z_s_dense.shape() == ad::Shape{m.K, P, m.d});
  CHECK(base.z_s_global.shape() == ad::Shape{m.K, m.d});

  // Zero every class slice except k in z_t_dense; the class-k spatial
  // outputs must be unchanged (classes run as independent sequences).
  const std::size_t k = 1;
  Eigen::ArrayXd zeroed = base.z_t_dense.data();
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t j = 0; j < m.K; ++j) {
      if (j == k) continue;
      for (std::size_t c = 0; c < m.d; ++c)
        zeroed[static_cast<Eigen::Index>((p * m.K + j) * m.d + c)] = 0.0;
    }
  TSViT::SpatialResult modified =
      model.spatial_forward(ad::constant({P, m.K, m.d}, zeroed));
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t c = 0; c < m.d; ++c) {
      double a = modified.z_s_dense.data()[static_cast<Eigen::Index>((k * P + p) * m.d + c)];
      double b = base.z_s_dense.data()[static_cast<Eigen::Index>((k * P + p) * m.d + c)];
      CHECK(a == b);
    }
  for (std::size_t c = 0; c < m.d; ++c)
    CHECK(modified.z_s_global.data()[static_cast<Eigen::Index>(k * m.d + c)] ==
          base.z_s_global.data()[static_cast<Eigen::Index>(k * m.d + c)]);
}

TEST_CASE("classify_global is the per-class row dot product") {
  // w_k = e_1 and token_k = e_1 -> logit 1; zero tokens -> zero logits
  // (bias-free); doubling the token doubles the logit.
  ad::Value tokens = ad::param({2, 4}, Eigen::ArrayXd{{1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0}});
  ad::Value w = ad::constant({2, 4}, Eigen::ArrayXd{{1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0}});
  ad::Value logits = ad::rowwise_dot(tokens, w);
  CHECK(logits.data()[0] == 1.0);
  CHECK(logits.data()[1] == 0.0);

  ad::Value zero_logits = ad::rowwise_dot(ad::constant({2, 4}, Eigen::ArrayXd::Zero(8)), w);
  CHECK(zero_logits.data()[0] == 0.0);
  CHECK(zero_logits.data()[1] == 0.0);

  ad::Value doubled = ad::rowwise_dot(ad::scale(tokens, 2.0), w);
  CHECK(doubled.data()[0] == 2.0);
}

TEST_CASE("forward is deterministic in evaluation mode") {
  ModelConfig m = tiny_config();
  m.dropout = 0.3;  // must not fire in eval mode
  Rng init(13, "init");
  TSViT model(m, init);
  Tensor s = random_series(m, 14);
  EncoderOutputs a = model.forward(s, false, nullptr);
  EncoderOutputs b = model.forward(s, false, nullptr);
  for (Eigen::Index i = 0; i < a.logits.data().size(); ++i)
    CHECK(a.logits.data()[i] == b.logits.data()[i]);
}

TEST_CASE("classification loss gradient matches finite differences through the whole network") {
  ModelConfig m = tiny_config();
  m.temporal_layers = 1;
  m.spatial_layers = 1;
  Rng init(15, "init");
  TSViT model(m, init);
  Tensor s = random_series(m, 16);
  std::vector<double> labels = {1.0, 0.0, 1.0};

  auto loss_value = [&]() {
    EncoderOutputs out = model.forward(s);
    return ad::bce_with_logits(out.logits, labels);
  };

  ad::Value loss = loss_value();
  model.params().zero_grad();
  ad::backward(loss);

  for (const std::string& pname :
       {std::string("classifier.weight"), std::string("temporal.l0.q.weight"),
        std::string("spatial.l0.fc1.weight"), std::string("patch_embed.weight"),
        std::string("temporal.cls_tokens")}) {
    ad::Value p = model.params().get(pname);
    Eigen::ArrayXd analytic = p.grad();
    Eigen::ArrayXd x0 = p.data();
    // Probe a handful of coordinates per parameter.
    for (Eigen::Index i = 0; i < x0.size(); i += std::max<Eigen::Index>(1, x0.size() / 5)) {
      double h = 1e-5 * std::max(1.0, std::abs(x0[i]));
      p.mutable_data()[i] = x0[i] + h;
      double fp = loss_value().scalar();
      p.mutable_data()[i] = x0[i] - h;
      double fm = loss_value().scalar();
      p.mutable_data()[i] = x0[i];
      double fd = (fp - fm) / (2.0 * h);
      double rel = std::abs(fd - analytic[i]) / std::max(std::abs(fd) + std::abs(analytic[i]), 1e-6);
      INFO(pname, " coord ", i);
      CHECK(rel < 1e-4);
    }
  }
}

TEST_CASE("checkpoint round-trips weights, config, and forward results") {
  ModelConfig m = tiny_config();
  Rng init(17, "init");
  TSViT model(m, init);
  Tensor s = random_series(m, 18);
  EncoderOutputs before = model.forward(s);

  fs::path dir = fs::temp_directory_path() / "exact_test_ckpt";
  fs::remove_all(dir);
  model.save(dir.string());
  TSViT back = TSViT::load(dir.string());
  CHECK(back.config().d == m.d);
  CHECK(back.config().K == m.K);
  EncoderOutputs after = back.forward(s);
  for (Eigen::Index i = 0; i < before.logits.data().size(); ++i)
    CHECK(before.logits.data()[i] == after.logits.data()[i]);

  CHECK(named_tensors_hash(dir.string()) == named_tensors_hash(dir.string()));
  CHECK_THROWS_AS(TSViT::load((dir / "nope").string()), FormatError);
}

TEST_CASE("series dims must match the model configuration") {
  ModelConfig m = tiny_config();
  Rng init(19, "init");
  TSViT model(m, init);
  Tensor wrong({m.T, m.C, m.input_h, m.input_w + 2});
  CHECK_THROWS_AS(model.forward(wrong), ConfigError);
}
