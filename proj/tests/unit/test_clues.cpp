#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "exact/cam.h"
#include "exact/clues.h"
#include "exact/error.h"
#include "sinkhorn_oracle.h"
#include "test_util.h"

using namespace exact;
using testutil::grad_check;
using testutil::random_unit_rows;


TEST_CASE("sinkhorn with a single prototype returns the column marginal row") {
  Rng rng(1, "sk");
  Eigen::ArrayXd protos = random_unit_rows(rng, 1, 6);
  Eigen::ArrayXd emb = random_unit_rows(rng, 5, 6);
  auto am = sinkhorn_assign(protos, 1, emb, 5, 6, 0.05, 50);
  REQUIRE(am.has_value());
  for (std::size_t j = 0; j < 5; ++j) CHECK(am->C[j] == doctest::Approx(0.2).epsilon(1e-9));
}

TEST_CASE("sinkhorn respects the symmetry of a symmetric instance") {
  Eigen::ArrayXd protos(2 * 2), emb(2 * 2);
  protos << 1, 0, 0, 1;
  emb << 1, 0, 0, 1;  // S = [[1,0],[0,1]]
  auto am = sinkhorn_assign(protos, 2, emb, 2, 2, 0.1, 200, 1e-12);
  REQUIRE(am.has_value());
  CHECK(am->C[0] == doctest::Approx(am->C[3]).epsilon(1e-8));
  CHECK(am->C[1] == doctest::Approx(am->C[2]).epsilon(1e-8));
}

TEST_CASE("sinkhorn matches the entropic-transport oracle on Np=2 Nk=3") {
  Rng rng(2, "sk");
  for (int trial = 0; trial < 5; ++trial) {
    std::size_t d = 8;
    Eigen::ArrayXd protos = random_unit_rows(rng, 2, d);
    Eigen::ArrayXd emb = random_unit_rows(rng, 3, d);
    double eta = 0.05;
    auto am = sinkhorn_assign(protos, 2, emb, 3, d, eta, 100, 1e-12);
    REQUIRE(am.has_value());

    double S[6];
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c)
          dot += protos[static_cast<Eigen::Index>(i * d + c)] *
                 emb[static_cast<Eigen::Index>(j * d + c)];
        S[i * 3 + j] = dot;
      }
    testutil::OracleResult oracle = testutil::oracle_np2_nk3(S, eta);
    for (int i = 0; i < 6; ++i) {
      INFO("trial ", trial, " entry ", i);
      CHECK(std::abs(am->C[i] - oracle.C[i]) < 1e-3);
    }
  }
}

TEST_CASE("sinkhorn marginals hold within tolerance on random instances (property)") {
  Rng rng(3, "sk");
  for (int trial = 0; trial < 40; ++trial) {
    std::size_t np_choices[3] = {1, 2, 4};
    std::size_t Np = np_choices[rng.uniform_index(3)];
    std::size_t Nk = 2 + rng.uniform_index(63);
    std::size_t d = 8;
    Eigen::ArrayXd protos = random_unit_rows(rng, Np, d);
    Eigen::ArrayXd emb = random_unit_rows(rng, Nk, d);
    auto am = sinkhorn_assign(protos, Np, emb, Nk, d, 0.05, 50, 1e-4);
    REQUIRE(am.has_value());
    CHECK(am->iterations <= 50);
    CHECK(am->residual <= 1e-4);
    for (Eigen::Index i = 0; i < am->C.size(); ++i) CHECK(am->C[i] >= 0.0);
    // Re-verify the marginals from the plan itself.
    for (std::size_t i = 0; i < Np; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < Nk; ++j) s += am->C[static_cast<Eigen::Index>(i * Nk + j)];
      CHECK(std::abs(s - 1.0 / static_cast<double>(Np)) <= 1e-4);
    }
    for (std::size_t j = 0; j < Nk; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < Np; ++i) s += am->C[static_cast<Eigen::Index>(i * Nk + j)];
      CHECK(std::abs(s - 1.0 / static_cast<double>(Nk)) <= 1e-4);
    }
  }
}

TEST_CASE("sinkhorn entropy limits") {
  Rng rng(4, "sk");
  std::size_t d = 8, Np = 2, Nk = 6;
  Eigen::ArrayXd protos = random_unit_rows(rng, Np, d);
  Eigen::ArrayXd emb = random_unit_rows(rng, Nk, d);

  // Large eta: plan approaches the max-entropy outer product u r^T.
  auto flat = sinkhorn_assign(protos, Np, emb, Nk, d, 1e6, 200, 1e-12);
  REQUIRE(flat.has_value());
  for (Eigen::Index i = 0; i < flat->C.size(); ++i)
    CHECK(std::abs(flat->C[i] - 1.0 / static_cast<double>(Np * Nk)) < 1e-6);

  // Small eta: every column concentrates on its best-similarity row.
  auto sharp = sinkhorn_assign(protos, Np, emb, Nk, d, 0.01, 5000, 1e-12);
  REQUIRE(sharp.has_value());
  for (std::size_t j = 0; j < Nk; ++j) {
    double s0 = 0.0, s1 = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      s0 += protos[static_cast<Eigen::Index>(c)] * emb[static_cast<Eigen::Index>(j * d + c)];
      s1 += protos[static_cast<Eigen::Index>(d + c)] * emb[static_cast<Eigen::Index>(j * d + c)];
    }
    // Sharpness only separates clearly away from ties; random unit vectors
    // in 8-d give comfortable gaps.
    if (std::abs(s0 - s1) < 0.05) continue;
    std::size_t best = s0 > s1 ? 0 : 1;
    double col_mass = sharp->C[static_cast<Eigen::Index>(j)] +
                      sharp->C[static_cast<Eigen::Index>(Nk + j)];
    CHECK(sharp->C[static_cast<Eigen::Index>(best * Nk + j)] / col_mass > 0.95);
  }
}

TEST_CASE("sinkhorn skip and error contracts") {
  Eigen::ArrayXd protos = Eigen::ArrayXd::Zero(2 * 4);
  protos[0] = 1.0;
  protos[5] = 1.0;
  Eigen::ArrayXd empty;
  CHECK(!sinkhorn_assign(protos, 2, empty, 0, 4, 0.05, 50).has_value());
  Eigen::ArrayXd bad(1 * 4);
  bad << std::numeric_limits<double>::quiet_NaN(), 0, 0, 0;
  CHECK_THROWS_AS(sinkhorn_assign(protos, 2, bad, 1, 4, 0.05, 50), NumericError);
  Eigen::ArrayXd ok = Eigen::ArrayXd::Ones(4);
  CHECK_THROWS_AS(sinkhorn_assign(protos, 2, ok, 1, 4, -1.0, 50), ConfigError);
}

TEST_CASE("momentum update follows the convex combination rule") {
  std::size_t d = 4;
  // alpha=1 leaves prototypes unchanged.
  {
    PrototypeBank bank(1, 1, d, 1.0, 0.1);
    bank.positive[0] << 1, 0, 0, 0;
    bank.positive_init[0][0] = true;
    AssignmentMatrix am;
    am.C = Eigen::ArrayXd::Ones(2) * 0.5;
    am.row_marginal = Eigen::ArrayXd::Ones(1);
    am.col_marginal = Eigen::ArrayXd::Ones(2) * 0.5;
    Eigen::ArrayXd emb(2 * d);
    emb << 0, 1, 0, 0, 0, 0, 1, 0;
    momentum_update(bank, 0, Polarity::Positive, am, emb, d);
    CHECK(bank.positive[0][0] == doctest::Approx(1.0));
    CHECK(bank.positive[0][1] == doctest::Approx(0.0));
  }
  // alpha=0 with a uniform row sets the normalized mean.
  {
    PrototypeBank bank(1, 1, d, 0.0, 0.1);
    bank.positive[0] << 1, 0, 0, 0;
    bank.positive_init[0][0] = true;
    AssignmentMatrix am;
    am.C = Eigen::ArrayXd::Ones(2) * 0.5;
    am.row_marginal = Eigen::ArrayXd::Ones(1);
    am.col_marginal = Eigen::ArrayXd::Ones(2) * 0.5;
    Eigen::ArrayXd emb(2 * d);
    emb << 1, 0, 0, 0, 0, 1, 0, 0;
    momentum_update(bank, 0, Polarity::Positive, am, emb, d);
    double inv = 1.0 / std::sqrt(2.0);
    CHECK(bank.positive[0][0] == doctest::Approx(inv));
    CHECK(bank.positive[0][1] == doctest::Approx(inv));
  }
  // alpha=0.999, p=e1, weighted mean=e2 -> normalize(0.999 e1 + 0.001 e2).
  {
    PrototypeBank bank(1, 1, d, 0.999, 0.1);
    bank.positive[0] << 1, 0, 0, 0;
    bank.positive_init[0][0] = true;
    AssignmentMatrix am;
    am.C = Eigen::ArrayXd::Ones(1);
    am.row_marginal = Eigen::ArrayXd::Ones(1);
    am.col_marginal = Eigen::ArrayXd::Ones(1);
    Eigen::ArrayXd emb(d);
    emb << 0, 1, 0, 0;
    momentum_update(bank, 0, Polarity::Positive, am, emb, d);
    double nrm = std::sqrt(0.999 * 0.999 + 0.001 * 0.001);
    CHECK(bank.positive[0][0] == doctest::Approx(0.999 / nrm));
    CHECK(bank.positive[0][1] == doctest::Approx(0.001 / nrm));
  }
  // all-zero row leaves the prototype untouched.
  {
    PrototypeBank bank(1, 1, d, 0.5, 0.1);
    bank.positive[0] << 1, 0, 0, 0;
    bank.positive_init[0][0] = true;
    AssignmentMatrix am;
    am.C = Eigen::ArrayXd::Zero(2);
    am.row_marginal = Eigen::ArrayXd::Ones(1);
    am.col_marginal = Eigen::ArrayXd::Ones(2) * 0.5;
    Eigen::ArrayXd emb = Eigen::ArrayXd::Ones(2 * d);
    momentum_update(bank, 0, Polarity::Positive, am, emb, d);
    CHECK(bank.positive[0][0] == 1.0);
  }
}

TEST_CASE("momentum updates preserve unit norm (property)") {
  Rng rng(6, "bank");
  std::size_t d = 8;
  PrototypeBank bank(2, 2, d, 0.9, 0.1);
  for (int step = 0; step < 20; ++step) {
    std::size_t nk = 1 + rng.uniform_index(10);
    Eigen::ArrayXd emb = random_unit_rows(rng, nk, d);
    auto am = sinkhorn_assign(bank.positive[0], 2, emb, nk, d, 0.05, 50);
    REQUIRE(am.has_value());
    momentum_update(bank, 0, Polarity::Positive, *am, emb, d);
    for (std::size_t i = 0; i < 2; ++i) {
      if (!bank.positive_init[0][i]) continue;
      double nrm = std::sqrt(bank.positive[0]
                                 .segment(static_cast<Eigen::Index>(i * d),
                                          static_cast<Eigen::Index>(d))
                                 .square()
                                 .sum());
      CHECK(nrm == doctest::Approx(1.0).epsilon(1e-10));
    }
  }
}

TEST_CASE("similarity is temperature-scaled cosine") {
  Eigen::ArrayXd z(3), p(3);
  z << 0.4, 0, 0;
  p << 0.4, 0, 0;
  CHECK(similarity(z, p, 0.1) == doctest::Approx(10.0));
  p << 0, 1, 0;
  CHECK(similarity(z, p, 0.1) == doctest::Approx(0.0));
  p << -0.4, 0, 0;
  CHECK(similarity(z, p, 0.1) == doctest::Approx(-10.0));
  Eigen::ArrayXd zero = Eigen::ArrayXd::Zero(3);
  CHECK_THROWS_AS(similarity(zero, p, 0.1), NumericError);
  CHECK_THROWS_AS(similarity(z, p, 0.0), ConfigError);
}

TEST_CASE("cbl term matches the printed contrastive form") {
  std::size_t d = 4;
  // z = p+, single orthogonal negative, tau = 0.1 -> log(exp 0) - 10 = -10.
  Eigen::ArrayXd z(d), protos(2 * d);
  z << 1, 0, 0, 0;
  protos << 1, 0, 0, 0, 0, 1, 0, 0;
  CblResult r = cbl_loss_with_prototypes(ad::constant({1, d}, z), ad::constant({2, d}, protos), 1,
                                         0.1, false);
  CHECK(!r.skipped);
  CHECK(r.loss.scalar() == doctest::Approx(-10.0));

  // Two negatives with similarities s1, s2 -> log(e^{s1}+e^{s2}) - S(z,p+).
  Eigen::ArrayXd protos3(3 * d);
  protos3 << 1, 0, 0, 0, 0, 1, 0, 0, 0, -1, 0, 0;
  CblResult r3 = cbl_loss_with_prototypes(ad::constant({1, d}, z), ad::constant({3, d}, protos3),
                                          1, 0.1, false);
  CHECK(r3.loss.scalar() == doctest::Approx(std::log(std::exp(0.0) + std::exp(0.0)) - 10.0));
}

TEST_CASE("cbl gradient matches finite differences; prototypes get exactly zero") {
  Rng rng(7, "cbl");
  std::size_t n = 5, d = 6;
  Eigen::ArrayXd z0 = testutil::random_array(rng, n * d, -1.0, 1.0);
  Eigen::ArrayXd protos = random_unit_rows(rng, 4, d);

  ad::Value zv = ad::param({n, d}, z0);
  ad::Value pv = ad::param({4, d}, protos);
  CblResult r = cbl_loss_with_prototypes(zv, pv, 2, 0.1, false);
  ad::Value mean_loss = ad::scale(r.loss, 1.0 / static_cast<double>(r.pixel_count));
  ad::backward(mean_loss);

  // Prototypes are detached: no gradient buffer is ever touched.
  CHECK((pv.grad().size() == 0 || pv.grad().abs().maxCoeff() == 0.0));

  auto eval = [&](const Eigen::ArrayXd& zz) {
    CblResult rr = cbl_loss_with_prototypes(ad::constant({n, d}, zz), ad::constant({4, d}, protos),
                                            2, 0.1, false);
    return rr.loss.scalar() / static_cast<double>(rr.pixel_count);
  };
  CHECK(grad_check(eval, z0, zv.grad()) < 1e-4);
}

TEST_CASE("cbl over the filtered map skips absent classes and empty pixel sets") {
  std::size_t P = 4, K = 2, d = 4;
  Eigen::ArrayXd tokens = Eigen::ArrayXd::Zero(P * K * d);
  for (std::size_t i = 0; i < P * K * d; ++i) tokens[static_cast<Eigen::Index>(i)] = 0.1 * (i % 7);
  PrototypeBank bank(K, 2, d, 0.9, 0.1);
  Rng rng(8, "cbl");
  for (std::size_t k = 0; k < K; ++k) {
    bank.positive[k] = random_unit_rows(rng, 2, d);
    bank.negative[k] = random_unit_rows(rng, 2, d);
    bank.positive_init[k] = {true, true};
    bank.negative_init[k] = {true, true};
  }

  // All classes absent -> skipped zero loss.
  std::vector<std::uint8_t> filtered(P * K, kFilterIgnore);
  CblResult none = cbl_loss(ad::constant({P, K, d}, tokens), filtered, bank, {0.0, 0.0}, 0.1);
  CHECK(none.skipped);
  CHECK(none.loss.scalar() == 0.0);

  // Class 1 present with two reliable pixels participates; class 2 absent.
  filtered[0 * K + 0] = kFilterForeground;
  filtered[3 * K + 0] = kFilterForeground;
  CblResult some = cbl_loss(ad::constant({P, K, d}, tokens), filtered, bank, {1.0, 0.0}, 0.1);
  CHECK(!some.skipped);
  CHECK(some.pixel_count == 2);

  // The same filtered map with class 2 marked present but no reliable
  // pixels: class 2 contributes nothing.
  CblResult both = cbl_loss(ad::constant({P, K, d}, tokens), filtered, bank, {1.0, 1.0}, 0.1);
  CHECK(both.pixel_count == 2);
  CHECK(both.loss.scalar() == doctest::Approx(some.loss.scalar()));
}

TEST_CASE("bank checkpoint round-trips") {
  Rng rng(9, "bank");
  PrototypeBank bank(3, 2, 5, 0.97, 0.2);
  bank.positive[1] = random_unit_rows(rng, 2, 5);
  bank.positive_init[1] = {true, false};
  bank.negative[2] = random_unit_rows(rng, 2, 5);
  bank.negative_init[2] = {false, true};

  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "exact_test_bank";
  fs::remove_all(dir);
  bank.save(dir.string());
  PrototypeBank back = PrototypeBank::load(dir.string());
  CHECK(back.K == 3);
  CHECK(back.Np == 2);
  CHECK(back.d == 5);
  CHECK(back.alpha == 0.97);
  CHECK(back.tau == 0.2);
  CHECK(back.positive_init[1] == std::vector<bool>{true, false});
  CHECK(back.negative_init[2] == std::vector<bool>{false, true});
  for (Eigen::Index i = 0; i < back.positive[1].size(); ++i)
    CHECK(back.positive[1][i] == bank.positive[1][i]);
}
