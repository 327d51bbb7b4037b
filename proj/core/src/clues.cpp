#include "exact/clues.h"

#include <cmath>

#include "exact/cam.h"
#include "exact/config.h"
#include "exact/error.h"
#include "exact/tsvit.h"

namespace exact {

PrototypeBank::PrototypeBank(std::size_t K_, std::size_t Np_, std::size_t d_, double alpha_,
                             double tau_)
    : K(K_), Np(Np_), d(d_), alpha(alpha_), tau(tau_) {
  if (Np < 1) throw ConfigError("bank: Np must be >= 1");
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("bank: alpha must be in [0,1]");
  if (tau <= 0.0) throw ConfigError("bank: tau must be > 0");
  positive.assign(K, Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(Np * d)));
  negative.assign(K, Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(Np * d)));
  positive_init.assign(K, std::vector<bool>(Np, false));
  negative_init.assign(K, std::vector<bool>(Np, false));
}

std::size_t PrototypeBank::initialized_count(std::size_t k, Polarity pol) const {
  std::size_t n = 0;
  for (bool b : init_flags(k, pol)) n += b ? 1 : 0;
  return n;
}

void PrototypeBank::save(const std::string& dir) const {
  Config meta;
  meta.set("container.kind", "prototype_bank");
  meta.set_int("bank.K", static_cast<std::int64_t>(K));
  meta.set_int("bank.Np", static_cast<std::int64_t>(Np));
  meta.set_int("bank.d", static_cast<std::int64_t>(d));
  meta.set_double("bank.alpha", alpha);
  meta.set_double("bank.tau", tau);
  std::vector<std::pair<std::string, ad::Value>> items;
  for (std::size_t k = 0; k < K; ++k) {
    // Initialization flags travel as a {0,1} tensor per polarity.
    Eigen::ArrayXd pos_flags(static_cast<Eigen::Index>(Np)), neg_flags(static_cast<Eigen::Index>(Np));
    for (std::size_t i = 0; i < Np; ++i) {
      pos_flags[static_cast<Eigen::Index>(i)] = positive_init[k][i] ? 1.0 : 0.0;
      neg_flags[static_cast<Eigen::Index>(i)] = negative_init[k][i] ? 1.0 : 0.0;
    }
    std::string base = "class" + std::to_string(k + 1);
    items.emplace_back(base + ".positive", ad::constant({Np, d}, positive[k]));
    items.emplace_back(base + ".negative", ad::constant({Np, d}, negative[k]));
    items.emplace_back(base + ".positive_init", ad::constant({Np}, pos_flags));
    items.emplace_back(base + ".negative_init", ad::constant({Np}, neg_flags));
  }
  save_named_tensors(dir, meta, items);
}

PrototypeBank PrototypeBank::load(const std::string& dir) {
  NamedTensors nt = load_named_tensors(dir);
  if (nt.meta.get_or("container.kind", "") != "prototype_bank")
    throw FormatError("bank: " + dir + " is not a prototype bank");
  PrototypeBank bank(static_cast<std::size_t>(nt.meta.get_int("bank.K", 0)),
                     static_cast<std::size_t>(nt.meta.get_int("bank.Np", 0)),
                     static_cast<std::size_t>(nt.meta.get_int("bank.d", 0)),
                     nt.meta.get_double("bank.alpha", 0.999), nt.meta.get_double("bank.tau", 0.1));
  for (auto& [name, t] : nt.tensors) {
    std::size_t dot = name.find('.');
    if (dot == std::string::npos || name.rfind("class", 0) != 0)
      throw FormatError("bank: unexpected tensor " + name);
    std::size_t k = std::stoul(name.substr(5, dot - 5)) - 1;
    if (k >= bank.K) throw FormatError("bank: class index out of range in " + name);
    std::string field = name.substr(dot + 1);
    Eigen::ArrayXd a =
        Eigen::Map<const Eigen::ArrayXd>(t.data.data(), static_cast<Eigen::Index>(t.data.size()));
    if (field == "positive")
      bank.positive[k] = a;
    else if (field == "negative")
      bank.negative[k] = a;
    else if (field == "positive_init" || field == "negative_init") {
      auto& flags = field[0] == 'p' ? bank.positive_init[k] : bank.negative_init[k];
      for (std::size_t i = 0; i < bank.Np; ++i) flags[i] = a[static_cast<Eigen::Index>(i)] > 0.5;
    } else {
      throw FormatError("bank: unexpected tensor " + name);
    }
  }
  return bank;
}

namespace {

// Unit-normalize rows of an [n x d] array; zero rows stay zero.
Eigen::ArrayXd normalized_rows(const Eigen::ArrayXd& m, std::size_t n, std::size_t d) {
  Eigen::ArrayXd out(m.size());
  for (std::size_t i = 0; i < n; ++i) {
    auto row = m.segment(static_cast<Eigen::Index>(i * d), static_cast<Eigen::Index>(d));
    double nrm = std::sqrt(row.square().sum());
    out.segment(static_cast<Eigen::Index>(i * d), static_cast<Eigen::Index>(d)) =
        nrm > 0.0 ? (row / nrm).eval() : row;
  }
  return out;
}

}  // namespace

std::optional<AssignmentMatrix> sinkhorn_assign(const Eigen::ArrayXd& prototypes, std::size_t Np,
                                                const Eigen::ArrayXd& embeddings, std::size_t Nk,
                                                std::size_t d, double eta, std::size_t iters,
                                                double tol) {
  if (Nk == 0) return std::nullopt;
  if (eta <= 0.0) throw ConfigError("sinkhorn: eta must be > 0");
  if (Np < 1 || iters < 1) throw ConfigError("sinkhorn: Np and iters must be >= 1");
  if (static_cast<std::size_t>(prototypes.size()) != Np * d ||
      static_cast<std::size_t>(embeddings.size()) != Nk * d)
    throw ContractError("sinkhorn: operand size mismatch");

  Eigen::ArrayXd pn = normalized_rows(prototypes, Np, d);
  Eigen::ArrayXd zn = normalized_rows(embeddings, Nk, d);

  Eigen::ArrayXd scores(static_cast<Eigen::Index>(Np * Nk));
  for (std::size_t i = 0; i < Np; ++i)
    for (std::size_t j = 0; j < Nk; ++j) {
      double dot = (pn.segment(static_cast<Eigen::Index>(i * d), static_cast<Eigen::Index>(d)) *
                    zn.segment(static_cast<Eigen::Index>(j * d), static_cast<Eigen::Index>(d)))
                       .sum();
      scores[static_cast<Eigen::Index>(i * Nk + j)] = dot;
    }
  if (!scores.isFinite().all()) throw NumericError("sinkhorn: non-finite similarities");

  const double u = 1.0 / static_cast<double>(Np);
  const double r = 1.0 / static_cast<double>(Nk);
  // Overrelaxed alternating scalings with a short warm-started anneal of the
  // regularizer: same fixed point as the plain iteration, but the hard
  // low-eta instances converge well inside the iteration budget.
  const double omega = 1.5;
  const std::size_t warm_sweeps = 2;
  const std::size_t max_stages = 4;
  std::size_t stages = std::min(max_stages, iters / (2 * warm_sweeps));

  AssignmentMatrix am;
  am.row_marginal = Eigen::ArrayXd::Constant(static_cast<Eigen::Index>(Np), u);
  am.col_marginal = Eigen::ArrayXd::Constant(static_cast<Eigen::Index>(Nk), r);

  Eigen::ArrayXd loga = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(Np));
  Eigen::ArrayXd logb = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(Nk));
  Eigen::ArrayXd a, b, Kmat;
  std::size_t used = 0;

  auto residual = [&]() {
    double worst = 0.0;
    for (std::size_t i = 0; i < Np; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < Nk; ++j)
        s += a[static_cast<Eigen::Index>(i)] * Kmat[static_cast<Eigen::Index>(i * Nk + j)] *
             b[static_cast<Eigen::Index>(j)];
      worst = std::max(worst, std::abs(s - u));
    }
    for (std::size_t j = 0; j < Nk; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < Np; ++i)
        s += a[static_cast<Eigen::Index>(i)] * Kmat[static_cast<Eigen::Index>(i * Nk + j)] *
             b[static_cast<Eigen::Index>(j)];
      worst = std::max(worst, std::abs(s - r));
    }
    return worst;
  };

  for (std::size_t stage = stages + 1; stage-- > 0;) {
    double eta_eff = eta * std::pow(2.0, static_cast<double>(stage));
    Eigen::ArrayXd S = scores / eta_eff;
    Kmat = (S - S.maxCoeff()).exp();
    a = loga.exp();
    b = logb.exp();
    std::size_t budget = stage > 0 ? warm_sweeps : iters - used;
    for (std::size_t it = 0; it < budget && used < iters; ++it) {
      ++used;
      for (std::size_t i = 0; i < Np; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < Nk; ++j)
          s += Kmat[static_cast<Eigen::Index>(i * Nk + j)] * b[static_cast<Eigen::Index>(j)];
        s = std::max(s, 1e-300);
        double& ai = a[static_cast<Eigen::Index>(i)];
        ai = std::pow(ai, 1.0 - omega) * std::pow(u / s, omega);
      }
      for (std::size_t j = 0; j < Nk; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < Np; ++i)
          s += Kmat[static_cast<Eigen::Index>(i * Nk + j)] * a[static_cast<Eigen::Index>(i)];
        s = std::max(s, 1e-300);
        double& bj = b[static_cast<Eigen::Index>(j)];
        bj = std::pow(bj, 1.0 - omega) * std::pow(r / s, omega);
      }
      if (stage == 0) {
        am.residual = residual();
        if (am.residual <= tol) break;
      }
    }
    if (stage > 0) {
      // Rescale the dual potentials for the next, smaller regularizer.
      loga = a.log() * 2.0;
      logb = b.log() * 2.0;
    }
  }

  // Closing plain column scaling: the returned plan meets the column
  // marginals exactly, the reported residual is the row-side violation.
  for (std::size_t j = 0; j < Nk; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < Np; ++i)
      s += Kmat[static_cast<Eigen::Index>(i * Nk + j)] * a[static_cast<Eigen::Index>(i)];
    s = std::max(s, 1e-300);
    b[static_cast<Eigen::Index>(j)] = r / s;
  }
  am.residual = residual();
  am.iterations = used;
  am.C.resize(static_cast<Eigen::Index>(Np * Nk));
  for (std::size_t i = 0; i < Np; ++i)
    for (std::size_t j = 0; j < Nk; ++j)
      am.C[static_cast<Eigen::Index>(i * Nk + j)] = a[static_cast<Eigen::Index>(i)] *
                                                    Kmat[static_cast<Eigen::Index>(i * Nk + j)] *
                                                    b[static_cast<Eigen::Index>(j)];
  if (!am.C.isFinite().all()) throw NumericError("sinkhorn: non-finite transport plan");
  return am;
}

void momentum_update(PrototypeBank& bank, std::size_t k, Polarity polarity,
                     const AssignmentMatrix& assignment, const Eigen::ArrayXd& embeddings,
                     std::size_t d) {
  if (k >= bank.K) throw ContractError("bank: class index out of range");
  if (d != bank.d) throw ContractError("bank: embedding width mismatch");
  std::size_t Np = bank.Np;
  std::size_t Nk = static_cast<std::size_t>(assignment.col_marginal.size());
  Eigen::ArrayXd& protos = bank.protos(k, polarity);
  auto& flags = bank.init_flags(k, polarity);

  for (std::size_t i = 0; i < Np; ++i) {
    auto row = assignment.C.segment(static_cast<Eigen::Index>(i * Nk), static_cast<Eigen::Index>(Nk));
    double mass = row.abs().sum();
    if (mass == 0.0) continue;  // unchanged this step
    Eigen::ArrayXd target = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(d));
    for (std::size_t j = 0; j < Nk; ++j)
      target += row[static_cast<Eigen::Index>(j)] *
                embeddings.segment(static_cast<Eigen::Index>(j * d), static_cast<Eigen::Index>(d));
    target /= mass;

    auto p = protos.segment(static_cast<Eigen::Index>(i * d), static_cast<Eigen::Index>(d));
    Eigen::ArrayXd updated =
        flags[i] ? (bank.alpha * p + (1.0 - bank.alpha) * target).eval() : target;
    double nrm = std::sqrt(updated.square().sum());
    if (nrm == 0.0) continue;
    p = updated / nrm;
    flags[i] = true;
  }
}

double similarity(const Eigen::ArrayXd& z, const Eigen::ArrayXd& p, double tau) {
  if (tau <= 0.0) throw ConfigError("similarity: tau must be > 0");
  if (z.size() != p.size()) throw ContractError("similarity: dimension mismatch");
  double nz = std::sqrt(z.square().sum());
  double np = std::sqrt(p.square().sum());
  if (nz == 0.0 || np == 0.0) throw NumericError("similarity: zero vector");
  return (z * p).sum() / (nz * np) / tau;
}

CblResult cbl_loss_with_prototypes(const ad::Value& z, const ad::Value& prototypes,
                                   std::size_t n_positive, double tau,
                                   bool include_positive_in_denominator) {
  if (tau <= 0.0) throw ConfigError("cbl: tau must be > 0");
  if (z.shape().size() != 2 || prototypes.shape().size() != 2)
    throw ContractError("cbl: rank-2 operands required");
  std::size_t N = z.shape()[0], d = z.shape()[1];
  std::size_t Pk = prototypes.shape()[0];
  if (prototypes.shape()[1] != d) throw ContractError("cbl: prototype width mismatch");
  if (n_positive == 0 || n_positive > Pk) throw ContractError("cbl: positive count out of range");
  if (N == 0) return {ad::scalar_constant(0.0), 0, true};
  if (Pk < 2 && !include_positive_in_denominator)
    throw ContractError("cbl: need at least one non-assigned prototype");

  // Clues receive no gradient; the detach here is the contract.
  ad::Value protos = ad::detach(prototypes);
  Eigen::ArrayXd pn = normalized_rows(protos.data(), Pk, d);
  ad::Value w = ad::constant({d, Pk}, [&] {
    Eigen::ArrayXd wt(static_cast<Eigen::Index>(d * Pk));
    for (std::size_t i = 0; i < Pk; ++i)
      for (std::size_t j = 0; j < d; ++j)
        wt[static_cast<Eigen::Index>(j * Pk + i)] = pn[static_cast<Eigen::Index>(i * d + j)];
    return wt;
  }());

  ad::Value zn = ad::l2_normalize_rows(z);
  ad::Value scores = ad::scale(ad::linear(zn, w), 1.0 / tau);  // [N, Pk]

  std::vector<std::size_t> assigned(N);
  std::vector<std::uint8_t> mask(N * Pk, 1);
  for (std::size_t i = 0; i < N; ++i) {
    std::size_t best = 0;
    double best_s = scores.data()[static_cast<Eigen::Index>(i * Pk)];
    for (std::size_t j = 1; j < n_positive; ++j) {
      double s = scores.data()[static_cast<Eigen::Index>(i * Pk + j)];
      if (s > best_s) {
        best_s = s;
        best = j;
      }
    }
    assigned[i] = best;
    if (!include_positive_in_denominator) mask[i * Pk + best] = 0;
  }

  ad::Value lse = ad::masked_lse_rows(scores, mask);
  ad::Value pos = ad::gather_cols(scores, assigned);
  ad::Value terms = ad::sub(lse, pos);
  return {ad::sum_all(terms), N, false};
}

CblResult cbl_loss(const ad::Value& z_t_dense, const std::vector<std::uint8_t>& cam_filtered,
                   const PrototypeBank& bank, const std::vector<double>& image_labels, double tau,
                   bool include_positive_in_denominator) {
  if (z_t_dense.shape().size() != 3) throw ContractError("cbl: z_t_dense must be rank 3");
  std::size_t P = z_t_dense.shape()[0], K = z_t_dense.shape()[1], d = z_t_dense.shape()[2];
  if (cam_filtered.size() != P * K) throw ContractError("cbl: filtered map size mismatch");
  if (image_labels.size() != K) throw ContractError("cbl: label vector size mismatch");
  if (K != bank.K || d != bank.d) throw ContractError("cbl: bank shape mismatch");

  ad::Value total;
  std::size_t n_pixels = 0;
  for (std::size_t k = 0; k < K; ++k) {
    if (image_labels[k] <= 0.5) continue;  // indicator gates absent classes
    std::size_t n_pos = bank.initialized_count(k, Polarity::Positive);
    std::size_t n_neg = bank.initialized_count(k, Polarity::Negative);
    if (n_pos == 0 || n_pos + n_neg < 2) continue;

    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t p = 0; p < P; ++p)
      if (cam_filtered[p * K + k] == kFilterForeground) pairs.emplace_back(p, k);
    if (pairs.empty()) continue;

    // Initialized prototypes only, positives first.
    Eigen::ArrayXd protos(static_cast<Eigen::Index>((n_pos + n_neg) * d));
    std::size_t row = 0;
    for (Polarity pol : {Polarity::Positive, Polarity::Negative}) {
      const auto& flags = bank.init_flags(k, pol);
      const auto& src = bank.protos(k, pol);
      for (std::size_t i = 0; i < bank.Np; ++i) {
        if (!flags[i]) continue;
        protos.segment(static_cast<Eigen::Index>(row * d), static_cast<Eigen::Index>(d)) =
            src.segment(static_cast<Eigen::Index>(i * d), static_cast<Eigen::Index>(d));
        ++row;
      }
    }

    ad::Value zk = ad::gather_pk(z_t_dense, pairs);
    CblResult part = cbl_loss_with_prototypes(zk, ad::constant({n_pos + n_neg, d}, protos), n_pos,
                                              tau, include_positive_in_denominator);
    total = total.valid() ? ad::add(total, part.loss) : part.loss;
    n_pixels += part.pixel_count;
  }

  if (n_pixels == 0) return {ad::scalar_constant(0.0), 0, true};
  return {ad::scale(total, 1.0 / static_cast<double>(n_pixels)), n_pixels, false};
}

}  // namespace exact
