#include "exact/train.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "exact/cb_cam.h"
#include "exact/error.h"

namespace fs = std::filesystem;

namespace exact {

namespace {

CamSource cam_source_from(const std::string& s) {
  if (s == "fused") return CamSource::Fused;
  if (s == "temporal") return CamSource::TemporalOnly;
  if (s == "spatial") return CamSource::SpatialOnly;
  throw ConfigError("config: unknown cam_source '" + s + "'");
}

std::string cam_source_name(CamSource s) {
  switch (s) {
    case CamSource::Fused: return "fused";
    case CamSource::TemporalOnly: return "temporal";
    default: return "spatial";
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (total_iters == 0 || batch_size == 0) throw ConfigError("train: iters and batch must be > 0");
  if (warmup_iters >= total_iters) throw ConfigError("train: warmup_iters must be < total_iters");
  if (lambda1 < 0.0 || lambda2 < 0.0) throw ConfigError("train: lambdas must be >= 0");
  if (eta <= 0.0 || tau <= 0.0) throw ConfigError("train: eta and tau must be > 0");
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("train: alpha must be in [0,1]");
  if (np < 1) throw ConfigError("train: np must be >= 1");
  FilterThresholds{mu_low, mu_high}.validate();
  if (theta_bg < 0.0 || theta_bg > 1.0) throw ConfigError("train: theta_bg must be in [0,1]");
  if (propagate_iters < 1) throw ConfigError("train: propagate_iters must be >= 1");
}

TrainConfig TrainConfig::from_config(const Config& c) {
  TrainConfig t;
  t.total_iters = static_cast<std::size_t>(c.get_int("train.total_iters", 400));
  t.warmup_iters = static_cast<std::size_t>(
      c.get_int("train.warmup_iters", static_cast<std::int64_t>(t.total_iters * 27 / 100)));
  t.batch_size = static_cast<std::size_t>(c.get_int("train.batch_size", 8));
  t.lr = c.get_double("train.lr", 1e-3);
  t.weight_decay = c.get_double("train.weight_decay", 0.01);
  t.lambda1 = c.get_double("train.lambda1", 0.01);
  t.lambda2 = c.get_double("train.lambda2", 0.015);
  t.eta = c.get_double("train.eta", 0.05);
  t.tau = c.get_double("train.tau", 0.1);
  t.alpha = c.get_double("train.alpha", 0.95);
  t.np = static_cast<std::size_t>(c.get_int("train.np", 2));
  t.mu_low = c.get_double("train.mu_low", 0.2);
  t.mu_high = c.get_double("train.mu_high", 0.4);
  t.theta_bg = c.get_double("train.theta_bg", 0.3);
  t.seed = static_cast<std::uint64_t>(c.get_int("train.seed", 0));
  t.sinkhorn_iters = static_cast<std::size_t>(c.get_int("train.sinkhorn_iters", 50));
  t.sinkhorn_tol = c.get_double("train.sinkhorn_tol", 1e-4);
  t.propagate_iters = static_cast<std::size_t>(c.get_int("train.propagate_iters", 3));
  t.disable_cbl = c.get_bool("train.disable_cbl", false);
  t.disable_tap = c.get_bool("train.disable_tap", false);
  t.cam_source = cam_source_from(c.get_or("train.cam_source", "fused"));
  std::string aff = c.get_or("train.affinity_source", "temporal_aware");
  if (aff == "temporal_aware")
    t.affinity_source = AffinitySource::TemporalAware;
  else if (aff == "low_level")
    t.affinity_source = AffinitySource::LowLevel;
  else
    throw ConfigError("config: unknown affinity_source '" + aff + "'");
  t.include_positive_in_denominator = c.get_bool("train.include_positive_in_denominator", false);
  t.renormalize_after_fusion = c.get_bool("train.renormalize_after_fusion", true);
  t.attention_layer_mode = c.get_or("train.attention_layer_mode", "last") == "mean"
                               ? AttentionLayerMode::Mean
                               : AttentionLayerMode::Last;
  t.sigma_mode = c.get_or("train.sigma_mode", "vector_std") == "neighbor_std"
                     ? SigmaMode::NeighborStd
                     : SigmaMode::VectorStd;
  t.cbcam_class_agnostic = c.get_bool("train.cbcam_class_agnostic", false);
  t.validate();
  return t;
}

void TrainConfig::to_config(Config& c) const {
  c.set_int("train.total_iters", static_cast<std::int64_t>(total_iters));
  c.set_int("train.warmup_iters", static_cast<std::int64_t>(warmup_iters));
  c.set_int("train.batch_size", static_cast<std::int64_t>(batch_size));
  c.set_double("train.lr", lr);
  c.set_double("train.weight_decay", weight_decay);
  c.set_double("train.lambda1", lambda1);
  c.set_double("train.lambda2", lambda2);
  c.set_double("train.eta", eta);
  c.set_double("train.tau", tau);
  c.set_double("train.alpha", alpha);
  c.set_int("train.np", static_cast<std::int64_t>(np));
  c.set_double("train.mu_low", mu_low);
  c.set_double("train.mu_high", mu_high);
  c.set_double("train.theta_bg", theta_bg);
  c.set_int("train.seed", static_cast<std::int64_t>(seed));
  c.set_int("train.sinkhorn_iters", static_cast<std::int64_t>(sinkhorn_iters));
  c.set_double("train.sinkhorn_tol", sinkhorn_tol);
  c.set_int("train.propagate_iters", static_cast<std::int64_t>(propagate_iters));
  c.set_bool("train.disable_cbl", disable_cbl);
  c.set_bool("train.disable_tap", disable_tap);
  c.set("train.cam_source", cam_source_name(cam_source));
  c.set("train.affinity_source",
        affinity_source == AffinitySource::TemporalAware ? "temporal_aware" : "low_level");
  c.set_bool("train.include_positive_in_denominator", include_positive_in_denominator);
  c.set_bool("train.renormalize_after_fusion", renormalize_after_fusion);
  c.set("train.attention_layer_mode",
        attention_layer_mode == AttentionLayerMode::Last ? "last" : "mean");
  c.set("train.sigma_mode", sigma_mode == SigmaMode::VectorStd ? "vector_std" : "neighbor_std");
  c.set_bool("train.cbcam_class_agnostic", cbcam_class_agnostic);
}

SegConfig SegConfig::from_config(const Config& c) {
  SegConfig s;
  s.total_iters = static_cast<std::size_t>(c.get_int("seg.total_iters", 300));
  s.batch_size = static_cast<std::size_t>(c.get_int("seg.batch_size", 8));
  s.lr = c.get_double("seg.lr", 1e-3);
  s.weight_decay = c.get_double("seg.weight_decay", 0.01);
  s.seed = static_cast<std::uint64_t>(c.get_int("seg.seed", 0));
  return s;
}

void SegConfig::to_config(Config& c) const {
  c.set_int("seg.total_iters", static_cast<std::int64_t>(total_iters));
  c.set_int("seg.batch_size", static_cast<std::int64_t>(batch_size));
  c.set_double("seg.lr", lr);
  c.set_double("seg.weight_decay", weight_decay);
  c.set_int("seg.seed", static_cast<std::int64_t>(seed));
}

ad::Value total_loss(const ad::Value& l_cls, const ad::Value& l_cls_aux, const ad::Value& l_cbl,
                     const ad::Value& l_tap, const TrainConfig& cfg, std::size_t iter) {
  ad::Value total = ad::add(l_cls, l_cls_aux);
  if (!cfg.disable_cbl && iter >= cfg.warmup_iters)
    total = ad::add(total, ad::scale(l_cbl, cfg.lambda1));
  if (!cfg.disable_tap) total = ad::add(total, ad::scale(l_tap, cfg.lambda2));
  return total;
}

double cosine_lr(double base_lr, std::size_t iter, std::size_t total_iters) {
  double frac = total_iters > 0 ? static_cast<double>(iter) / static_cast<double>(total_iters) : 0.0;
  return 0.5 * base_lr * (1.0 + std::cos(M_PI * frac));
}

namespace {

// Cosine annealing with a short linear ramp; transformers at this scale
// need the ramp to escape the base-rate solution.
double scheduled_lr(double base_lr, std::size_t iter, std::size_t total_iters) {
  std::size_t ramp = std::max<std::size_t>(1, total_iters / 20);
  double scale = iter < ramp ? static_cast<double>(iter + 1) / static_cast<double>(ramp) : 1.0;
  return scale * cosine_lr(base_lr, iter, total_iters);
}

}  // namespace

namespace {

struct LoadedDataset {
  std::vector<SITSSample> samples;
  std::size_t K = 0, T = 0, C = 0, H = 0, W = 0;
};

LoadedDataset load_dataset(const DatasetManifest& manifest, const ModelConfig& mcfg) {
  if (manifest.entries.empty()) throw DataError("dataset: empty manifest");
  LoadedDataset ds;
  ds.K = mcfg.K;
  for (std::size_t i = 0; i < manifest.size(); ++i)
    ds.samples.push_back(load_sample(manifest, i, mcfg.K, 0.01));
  const Tensor& first = ds.samples.front().series;
  ds.T = first.dims[0];
  ds.C = first.dims[1];
  ds.H = first.dims[2];
  ds.W = first.dims[3];
  if (ds.T != mcfg.T || ds.C != mcfg.C || ds.H != mcfg.input_h || ds.W != mcfg.input_w)
    throw ConfigError("dataset: sample dims do not match the model configuration");
  return ds;
}

// Per-patch low-level intensity feature (channel means over time and patch
// pixels); the Tab. 5-style affinity ablation input.
Eigen::ArrayXd low_level_features(const Tensor& series, const ModelConfig& mcfg) {
  std::size_t T = series.dims[0], C = series.dims[1], H = series.dims[2], W = series.dims[3];
  std::size_t nh = mcfg.grid_h(), nw = mcfg.grid_w();
  Eigen::ArrayXd f = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(nh * nw * C));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          std::size_t p = (y / mcfg.patch_h) * nw + (x / mcfg.patch_w);
          f[static_cast<Eigen::Index>(p * C + c)] += series.data[((t * C + c) * H + y) * W + x];
        }
  f /= static_cast<double>(T * mcfg.patch_h * mcfg.patch_w);
  return f;
}

struct SampleForward {
  EncoderOutputs out;
  ad::Value scores_t;  // pre-activation dense scores [P, K]
  ad::Value scores_s;
  ad::Value cam_fused;  // [P, K]
  std::vector<std::uint8_t> filtered;
};

SampleForward forward_with_cams(const TSViT& model, const SITSSample& sample,
                                const TrainConfig& cfg, bool training, Rng* dropout_rng) {
  SampleForward sf;
  sf.out = model.forward(sample.series, training, dropout_rng);
  ad::Value w = model.classifier_weights();
  sf.scores_t = ad::dense_scores(sf.out.z_t_dense, w);
  sf.scores_s = ad::dense_scores(ad::permute_102(sf.out.z_s_dense), w);
  ad::Value cam_t = normalize_cam(ad::relu(sf.scores_t));
  ad::Value cam_s = normalize_cam(ad::relu(sf.scores_s));
  sf.cam_fused = fuse_cams(cam_t, cam_s, cfg.cam_source, cfg.renormalize_after_fusion);
  std::size_t P = model.config().positions();
  sf.filtered = filter_cam(sf.cam_fused.data(), P, model.config().K,
                           FilterThresholds{cfg.mu_low, cfg.mu_high}, sample.image_labels);
  return sf;
}

// Folded-batch variant used by the training loop: one graph per batch.
struct BatchForward {
  TSViT::BatchOutputs out;
  ad::Value scores_t;   // [B*P, K]
  ad::Value scores_s;   // [B*P, K]
  ad::Value cam_fused;  // [B*P, K], per-image normalized
  std::vector<std::uint8_t> filtered;  // B*P*K tri-state
};

BatchForward forward_batch_with_cams(const TSViT& model,
                                     const std::vector<const SITSSample*>& samples,
                                     const TrainConfig& cfg, bool training, Rng* dropout_rng) {
  const ModelConfig& mcfg = model.config();
  const std::size_t B = samples.size(), P = mcfg.positions(), K = mcfg.K;
  std::vector<const Tensor*> series;
  series.reserve(B);
  for (const SITSSample* s : samples) series.push_back(&s->series);

  BatchForward bf;
  bf.out = model.forward_batch(series, training, dropout_rng);
  ad::Value w = model.classifier_weights();
  bf.scores_t = ad::dense_scores(bf.out.z_t_dense, w);
  bf.scores_s = ad::dense_scores(ad::permute_102_grouped(bf.out.z_s_dense, B), w);
  ad::Value cam_t = normalize_cam(ad::relu(bf.scores_t), B);
  ad::Value cam_s = normalize_cam(ad::relu(bf.scores_s), B);
  bf.cam_fused = fuse_cams(cam_t, cam_s, cfg.cam_source, cfg.renormalize_after_fusion, B);

  bf.filtered.resize(B * P * K);
  for (std::size_t b = 0; b < B; ++b) {
    Eigen::ArrayXd slice = bf.cam_fused.data().segment(static_cast<Eigen::Index>(b * P * K),
                                                       static_cast<Eigen::Index>(P * K));
    auto f = filter_cam(slice, P, K, FilterThresholds{cfg.mu_low, cfg.mu_high},
                        samples[b]->image_labels);
    std::copy(f.begin(), f.end(), bf.filtered.begin() + static_cast<std::ptrdiff_t>(b * P * K));
  }
  return bf;
}

// Propagated target for one image of a folded batch (all plain data).
Eigen::ArrayXd propagated_target(const BatchForward& bf, std::size_t b, const SITSSample& sample,
                                 const TSViT& model, const TrainConfig& cfg) {
  const ModelConfig& mcfg = model.config();
  std::size_t P = mcfg.positions(), K = mcfg.K;
  std::size_t S = K + mcfg.T;
  std::vector<LocalAffinity> per_class(K);
  if (cfg.affinity_source == AffinitySource::TemporalAware) {
    std::vector<Eigen::ArrayXd> stack;
    stack.reserve(bf.out.attention_stack.size());
    std::size_t layer_stride = P * mcfg.heads * S * S;
    for (const Eigen::ArrayXd& layer : bf.out.attention_stack)
      stack.push_back(layer.segment(static_cast<Eigen::Index>(b * layer_stride),
                                    static_cast<Eigen::Index>(layer_stride)));
    TemporalClassAttention a =
        extract_t2c_attention(stack, P, mcfg.heads, K, mcfg.T, cfg.attention_layer_mode);
    Eigen::ArrayXd seq = bf.out.z_t_seq.data().segment(
        static_cast<Eigen::Index>(b * P * mcfg.T * mcfg.d),
        static_cast<Eigen::Index>(P * mcfg.T * mcfg.d));
    Eigen::ArrayXd v = reweight(seq, P, mcfg.T, mcfg.d, a);
    for (std::size_t k = 0; k < K; ++k)
      per_class[k] = pairwise_affinity(
          v.segment(static_cast<Eigen::Index>(k * P * mcfg.d), static_cast<Eigen::Index>(P * mcfg.d)),
          mcfg.grid_h(), mcfg.grid_w(), mcfg.d, cfg.sigma_mode);
  } else {
    Eigen::ArrayXd f = low_level_features(sample.series, mcfg);
    LocalAffinity shared = pairwise_affinity(f, mcfg.grid_h(), mcfg.grid_w(), mcfg.C, cfg.sigma_mode);
    for (std::size_t k = 0; k < K; ++k) per_class[k] = shared;
  }
  Eigen::ArrayXd cam = bf.cam_fused.data().segment(static_cast<Eigen::Index>(b * P * K),
                                                   static_cast<Eigen::Index>(P * K));
  return propagate(cam, P, K, per_class, cfg.propagate_iters);
}

// Clustering step: batch-level Sinkhorn assignment and momentum update for
// both polarities of every class present in the batch. Embeddings are the
// detached, unit-normalized class-k token slices of reliable pixels.
double update_bank(PrototypeBank& bank, const BatchForward& bf,
                   const std::vector<const SITSSample*>& samples, const TrainConfig& cfg,
                   std::size_t P, std::size_t K, std::size_t d) {
  double residual_sum = 0.0;
  std::size_t residual_count = 0;
  const Eigen::ArrayXd& tokens = bf.out.z_t_dense.data();
  for (std::size_t k = 0; k < K; ++k) {
    for (Polarity pol : {Polarity::Positive, Polarity::Negative}) {
      std::uint8_t want = pol == Polarity::Positive ? kFilterForeground : kFilterBackground;
      std::vector<double> gathered;
      for (std::size_t b = 0; b < samples.size(); ++b) {
        if (samples[b]->image_labels[k] <= 0.5) continue;
        for (std::size_t p = 0; p < P; ++p) {
          std::size_t row = b * P + p;
          if (bf.filtered[row * K + k] != want) continue;
          auto z = tokens.segment(static_cast<Eigen::Index>((row * K + k) * d),
                                  static_cast<Eigen::Index>(d));
          double nrm = std::sqrt(z.square().sum());
          for (std::size_t j = 0; j < d; ++j)
            gathered.push_back(nrm > 0.0 ? z[static_cast<Eigen::Index>(j)] / nrm
                                         : z[static_cast<Eigen::Index>(j)]);
        }
      }
      std::size_t nk = gathered.size() / d;
      if (nk == 0) continue;
      Eigen::ArrayXd emb = Eigen::Map<const Eigen::ArrayXd>(gathered.data(),
                                                            static_cast<Eigen::Index>(gathered.size()));
      auto assignment = sinkhorn_assign(bank.protos(k, pol), bank.Np, emb, nk, d, cfg.eta,
                                        cfg.sinkhorn_iters, cfg.sinkhorn_tol);
      if (!assignment) continue;
      momentum_update(bank, k, pol, *assignment, emb, d);
      residual_sum += assignment->residual;
      ++residual_count;
    }
  }
  return residual_count > 0 ? residual_sum / static_cast<double>(residual_count) : 0.0;
}

// Batch-level contrastive term: reliable pixels of every present class across
// the whole batch, mean over all participating pixels.
CblResult batch_cbl_loss(const BatchForward& bf, const std::vector<const SITSSample*>& samples,
                         const PrototypeBank& bank, const TrainConfig& cfg, std::size_t P,
                         std::size_t K, std::size_t d) {
  ad::Value total;
  std::size_t n_pixels = 0;
  for (std::size_t k = 0; k < K; ++k) {
    std::size_t n_pos = bank.initialized_count(k, Polarity::Positive);
    std::size_t n_neg = bank.initialized_count(k, Polarity::Negative);
    if (n_pos == 0 || n_pos + n_neg < 2) continue;

    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t b = 0; b < samples.size(); ++b) {
      if (samples[b]->image_labels[k] <= 0.5) continue;  // indicator
      for (std::size_t p = 0; p < P; ++p) {
        std::size_t row = b * P + p;
        if (bf.filtered[row * K + k] == kFilterForeground) pairs.emplace_back(row, k);
      }
    }
    if (pairs.empty()) continue;

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

    ad::Value zk = ad::gather_pk(bf.out.z_t_dense, pairs);
    CblResult part = cbl_loss_with_prototypes(zk, ad::constant({n_pos + n_neg, d}, protos), n_pos,
                                              cfg.tau, cfg.include_positive_in_denominator);
    total = total.valid() ? ad::add(total, part.loss) : part.loss;
    n_pixels += part.pixel_count;
  }
  if (n_pixels == 0) return {ad::scalar_constant(0.0), 0, true};
  return {ad::scale(total, 1.0 / static_cast<double>(n_pixels)), n_pixels, false};
}

}  // namespace

ClassifierArtifacts train_classifier(const DatasetManifest& manifest, const TrainConfig& tcfg,
                                     const ModelConfig& mcfg, const std::string& out_dir,
                                     bool quiet) {
  tcfg.validate();
  mcfg.validate();
  LoadedDataset ds = load_dataset(manifest, mcfg);
  const std::size_t P = mcfg.positions(), K = mcfg.K, d = mcfg.d;

  Rng init_rng(tcfg.seed, "init");
  Rng data_rng(tcfg.seed, "data");
  Rng dropout_rng(tcfg.seed, "dropout");
  TSViT model(mcfg, init_rng);
  PrototypeBank bank(K, tcfg.np, d, tcfg.alpha, tcfg.tau);
  ad::AdamW opt(0.9, 0.999, 1e-8, tcfg.weight_decay);

  fs::create_directories(out_dir);
  std::ofstream log(fs::path(out_dir) / "train_log.txt", std::ios::binary);
  if (!log) throw FormatError("train: cannot write log in " + out_dir);

  double final_loss = 0.0;
  for (std::size_t iter = 0; iter < tcfg.total_iters; ++iter) {
    // Deterministic uniform batch draw.
    std::vector<const SITSSample*> picked;
    for (std::size_t b = 0; b < tcfg.batch_size; ++b)
      picked.push_back(&ds.samples[data_rng.uniform_index(ds.samples.size())]);
    const std::size_t B = picked.size();

    BatchForward bf = forward_batch_with_cams(model, picked, tcfg, true, &dropout_rng);

    std::vector<double> targets(B * K);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < K; ++k) targets[b * K + k] = picked[b]->image_labels[k];
    ad::Value l_cls = ad::bce_with_logits(bf.out.logits, targets);

    // Position-pooled pre-activation scores per image, both token sources.
    auto pooled = [&](const ad::Value& scores) {
      return ad::reshape(ad::mean_axis1_of3(ad::reshape(scores, {B, P, K})), {B * K});
    };
    ad::Value l_aux = ad::add(ad::bce_with_logits(pooled(bf.scores_t), targets),
                              ad::bce_with_logits(pooled(bf.scores_s), targets));

    // Clustering is loss-independent: the bank updates even when the
    // contrastive term is disabled or still warming up.
    double bank_residual = update_bank(bank, bf, picked, tcfg, P, K, d);

    ad::Value l_cbl = ad::scalar_constant(0.0);
    std::size_t cbl_pixels = 0;
    if (!tcfg.disable_cbl) {
      CblResult r = batch_cbl_loss(bf, picked, bank, tcfg, P, K, d);
      if (!r.skipped) {
        l_cbl = r.loss;
        cbl_pixels = r.pixel_count;
      }
    }

    ad::Value l_tap = ad::scalar_constant(0.0);
    if (!tcfg.disable_tap) {
      ad::Value acc;
      for (std::size_t b = 0; b < B; ++b) {
        Eigen::ArrayXd target = propagated_target(bf, b, *picked[b], model, tcfg);
        ad::Value cam_b = ad::slice_rows(bf.cam_fused, b * P, P);
        ad::Value lt = tap_loss(cam_b, target, picked[b]->image_labels);
        acc = acc.valid() ? ad::add(acc, lt) : lt;
      }
      l_tap = ad::scale(acc, 1.0 / static_cast<double>(B));
    }

    ad::Value loss = total_loss(l_cls, l_aux, l_cbl, l_tap, tcfg, iter);
    if (!std::isfinite(loss.scalar()))
      throw NumericError("train: non-finite loss at iteration " + std::to_string(iter) +
                         " (l_cls=" + format_double(l_cls.scalar()) +
                         ", l_cls_aux=" + format_double(l_aux.scalar()) +
                         ", l_cbl=" + format_double(l_cbl.scalar()) +
                         ", l_tap=" + format_double(l_tap.scalar()) + ")");

    model.params().zero_grad();
    ad::backward(loss);
    opt.step(model.params(), scheduled_lr(tcfg.lr, iter, tcfg.total_iters));
    final_loss = loss.scalar();

    log << "iter " << iter << " lr " << format_double(scheduled_lr(tcfg.lr, iter, tcfg.total_iters))
        << " l_cls " << format_double(l_cls.scalar()) << " l_cls_aux "
        << format_double(l_aux.scalar()) << " l_cbl " << format_double(l_cbl.scalar())
        << " l_tap " << format_double(l_tap.scalar()) << " total " << format_double(final_loss)
        << " bank_residual " << format_double(bank_residual) << " cbl_pixels " << cbl_pixels
        << "\n";
    if (!quiet && (iter % 25 == 0 || iter + 1 == tcfg.total_iters))
      std::cerr << "[train-cls] iter " << iter << "/" << tcfg.total_iters << " loss "
                << final_loss << "\n";
  }

  // Training-set multilabel micro-F1 at threshold 0.
  std::size_t tp = 0, fp = 0, fn = 0;
  for (const SITSSample& s : ds.samples) {
    EncoderOutputs out = model.forward(s.series, false, nullptr);
    for (std::size_t k = 0; k < K; ++k) {
      bool pred = out.logits.data()[static_cast<Eigen::Index>(k)] > 0.0;
      bool truth = s.image_labels[k] > 0.5;
      if (pred && truth) ++tp;
      else if (pred && !truth) ++fp;
      else if (!pred && truth) ++fn;
    }
  }
  double f1 = (2 * tp + fp + fn) > 0 ? 2.0 * static_cast<double>(tp) /
                                           static_cast<double>(2 * tp + fp + fn)
                                     : 0.0;

  ClassifierArtifacts art;
  art.checkpoint_dir = (fs::path(out_dir) / "checkpoint").string();
  art.bank_dir = (fs::path(out_dir) / "bank").string();
  art.log_path = (fs::path(out_dir) / "train_log.txt").string();
  art.final_loss = final_loss;
  art.train_f1 = f1;
  model.save(art.checkpoint_dir);
  bank.save(art.bank_dir);
  return art;
}

PseudoArtifacts generate_pseudo_labels(const std::string& checkpoint_dir,
                                       const std::string& bank_dir,
                                       const DatasetManifest& manifest, PseudoMode mode,
                                       const TrainConfig& cfg, const std::string& out_dir) {
  TSViT model = TSViT::load(checkpoint_dir);
  const ModelConfig& mcfg = model.config();
  const std::size_t P = mcfg.positions(), K = mcfg.K;

  PrototypeBank bank;
  if (mode == PseudoMode::CbCam) {
    if (bank_dir.empty() || !fs::exists(fs::path(bank_dir) / "manifest.txt"))
      throw GenerationError("pseudo: prototype bank missing (required for cb_cam mode)");
    bank = PrototypeBank::load(bank_dir);
    if (bank.K != K || bank.d != mcfg.d)
      throw GenerationError("pseudo: prototype bank does not match the checkpoint");
  }

  std::string mask_dir = (fs::path(out_dir) / "masks").string();
  fs::create_directories(mask_dir);
  char hash_hex[24];
  std::snprintf(hash_hex, sizeof(hash_hex), "%016llx",
                static_cast<unsigned long long>(named_tensors_hash(checkpoint_dir)));

  ConfusionMatrix cm(K + 1);
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    SITSSample s = load_sample(manifest, i, K, 0.01);
    SampleForward sf = forward_with_cams(model, s, cfg, false, nullptr);

    Eigen::ArrayXd cam;
    if (mode == PseudoMode::RawCam) {
      cam = sf.cam_fused.data();
    } else {
      cam = cb_cam(sf.out.z_t_dense.data(), P, K, mcfg.d, bank, cfg.tau, s.image_labels,
                   cfg.cbcam_class_agnostic, true);
    }
    mask_absent_classes(cam, P, K, s.image_labels);
    MaskTensor patch = pseudo_mask(cam, mcfg.grid_h(), mcfg.grid_w(), K, cfg.theta_bg,
                                   s.image_labels);
    MaskTensor pixel = upsample_mask(patch, mcfg.patch_h, mcfg.patch_w);

    std::string mask_path = (fs::path(mask_dir) / (s.sample_id + "_pseudo.stsr")).string();
    write_mask_file(mask_path, pixel);
    std::ofstream sidecar(mask_path + ".meta.txt", std::ios::binary);
    sidecar << "mode " << (mode == PseudoMode::RawCam ? "raw_cam" : "cb_cam") << "\n"
            << "theta_bg " << format_double(cfg.theta_bg) << "\n"
            << "mu_low " << format_double(cfg.mu_low) << "\n"
            << "mu_high " << format_double(cfg.mu_high) << "\n"
            << "checkpoint_hash " << hash_hex << "\n";

    cm.accumulate(pixel, s.mask);
  }

  PseudoArtifacts art;
  art.mask_dir = mask_dir;
  art.report = finalize(cm, true);
  write_report(art.report, (fs::path(out_dir) / "report").string());
  return art;
}

namespace {

ad::Value seg_logits(const TSViT& model, const EncoderOutputs& out) {
  const ModelConfig& mcfg = model.config();
  ad::Value tokens = ad::permute_102(out.z_s_dense);  // [P, K, d]
  ad::Value fg = ad::add_bias(ad::dense_scores(tokens, model.params().get("seg_head.fg.weight")),
                              model.params().get("seg_head.fg.bias"));
  ad::Value bg_feat = ad::mean_axis1_of3(tokens);  // [P, d]
  ad::Value bgb = model.params().get("seg_head.bg.bias");
  ad::Value bg = ad::linear(bg_feat, model.params().get("seg_head.bg.weight"), &bgb);
  (void)mcfg;
  return ad::concat_cols(bg, fg);  // [P, K+1], background first
}

}  // namespace

SegArtifacts train_segmentation(const DatasetManifest& train_manifest,
                                const std::string& pseudo_mask_dir,
                                const DatasetManifest& test_manifest, const ModelConfig& mcfg,
                                const SegConfig& scfg, const std::string& out_dir, bool quiet) {
  mcfg.validate();
  LoadedDataset train_ds = load_dataset(train_manifest, mcfg);
  LoadedDataset test_ds = load_dataset(test_manifest, mcfg);
  const std::size_t K = mcfg.K, d = mcfg.d;

  // Supervision masks: pseudo labels when a directory is given, otherwise
  // the ground truth (fully supervised reference).
  std::vector<MaskTensor> targets;
  for (const SITSSample& s : train_ds.samples) {
    if (pseudo_mask_dir.empty()) {
      targets.push_back(s.mask);
    } else {
      std::string path = (fs::path(pseudo_mask_dir) / (s.sample_id + "_pseudo.stsr")).string();
      if (!fs::exists(path)) throw DataError("seg: missing pseudo mask " + path);
      MaskTensor m = read_mask_tensor(path);
      for (std::uint16_t v : m.data)
        if (v != kIgnoreLabel && v > K) throw DataError("seg: label out of range in " + path);
      targets.push_back(std::move(m));
    }
  }

  Rng init_rng(scfg.seed, "seg.init");
  Rng data_rng(scfg.seed, "seg.data");
  TSViT model(mcfg, init_rng);
  {
    Rng head_rng(scfg.seed, "seg.head");
    auto& ps = model.params();
    Eigen::ArrayXd wfg(static_cast<Eigen::Index>(K * d)), wbg(static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < wfg.size(); ++i) wfg[i] = head_rng.normal(0.0, 0.02);
    for (Eigen::Index i = 0; i < wbg.size(); ++i) wbg[i] = head_rng.normal(0.0, 0.02);
    ps.create("seg_head.fg.weight", {K, d}, std::move(wfg));
    ps.create("seg_head.fg.bias", {K}, Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(K)));
    ps.create("seg_head.bg.weight", {d, 1}, std::move(wbg));
    ps.create("seg_head.bg.bias", {1}, Eigen::ArrayXd::Zero(1));
  }
  ad::AdamW opt(0.9, 0.999, 1e-8, scfg.weight_decay);

  fs::create_directories(out_dir);
  std::ofstream log(fs::path(out_dir) / "seg_log.txt", std::ios::binary);

  const std::size_t P = mcfg.positions();
  for (std::size_t iter = 0; iter < scfg.total_iters; ++iter) {
    std::vector<std::size_t> picked;
    std::vector<const Tensor*> series;
    for (std::size_t b = 0; b < scfg.batch_size; ++b) {
      picked.push_back(static_cast<std::size_t>(data_rng.uniform_index(train_ds.samples.size())));
      series.push_back(&train_ds.samples[picked.back()].series);
    }
    const std::size_t B = picked.size();
    TSViT::BatchOutputs out = model.forward_batch(series, true, nullptr);
    ad::Value tokens = ad::permute_102_grouped(out.z_s_dense, B);  // [B*P, K, d]
    ad::Value fg = ad::add_bias(ad::dense_scores(tokens, model.params().get("seg_head.fg.weight")),
                                model.params().get("seg_head.fg.bias"));
    ad::Value bgb = model.params().get("seg_head.bg.bias");
    ad::Value bg = ad::linear(ad::mean_axis1_of3(tokens), model.params().get("seg_head.bg.weight"),
                              &bgb);
    ad::Value logits = ad::concat_cols(bg, fg);  // [B*P, K+1]

    ad::Value loss;
    for (std::size_t b = 0; b < B; ++b) {
      ad::Value l = ad::ce_patch_upsampled(ad::slice_rows(logits, b * P, P),
                                           targets[picked[b]].data, mcfg.grid_h(), mcfg.grid_w(),
                                           mcfg.patch_h, mcfg.patch_w, kIgnoreLabel);
      loss = loss.valid() ? ad::add(loss, l) : l;
    }
    loss = ad::scale(loss, 1.0 / static_cast<double>(B));
    if (!std::isfinite(loss.scalar()))
      throw NumericError("seg: non-finite loss at iteration " + std::to_string(iter));
    model.params().zero_grad();
    ad::backward(loss);
    opt.step(model.params(), scheduled_lr(scfg.lr, iter, scfg.total_iters));
    log << "iter " << iter << " loss " << format_double(loss.scalar()) << "\n";
    if (!quiet && (iter % 25 == 0 || iter + 1 == scfg.total_iters))
      std::cerr << "[train-seg] iter " << iter << "/" << scfg.total_iters << " loss "
                << loss.scalar() << "\n";
  }

  ConfusionMatrix cm(K + 1);
  for (const SITSSample& s : test_ds.samples) {
    EncoderOutputs out = model.forward(s.series, false, nullptr);
    ad::Value logits = seg_logits(model, out);
    std::size_t P = mcfg.positions();
    MaskTensor patch(mcfg.grid_h(), mcfg.grid_w());
    for (std::size_t p = 0; p < P; ++p) {
      double best = logits.data()[static_cast<Eigen::Index>(p * (K + 1))];
      std::size_t best_c = 0;
      for (std::size_t c = 1; c <= K; ++c) {
        double v = logits.data()[static_cast<Eigen::Index>(p * (K + 1) + c)];
        if (v > best) {
          best = v;
          best_c = c;
        }
      }
      patch.data[p] = static_cast<std::uint16_t>(best_c);
    }
    cm.accumulate(upsample_mask(patch, mcfg.patch_h, mcfg.patch_w), s.mask);
  }

  SegArtifacts art;
  art.checkpoint_dir = (fs::path(out_dir) / "checkpoint").string();
  model.save(art.checkpoint_dir);
  art.test_report = finalize(cm, true);
  write_report(art.test_report, (fs::path(out_dir) / "test_report").string());
  return art;
}

Config desk_preset() {
  Config c;
  c.set_int("data.T", 12);
  c.set_int("data.C", 4);
  c.set_int("data.H", 16);
  c.set_int("data.W", 16);
  c.set_int("data.K", 4);
  c.set_int("data.parcels", 6);
  c.set_double("data.noise_std", 0.05);
  c.set_double("data.cloud_prob", 0.12);
  c.set_double("data.bg_parcel_prob", 0.25);
  c.set_double("data.min_frac", 0.01);
  c.set_int("model.d", 32);
  c.set_int("model.temporal_layers", 2);
  c.set_int("model.spatial_layers", 1);
  c.set_int("model.heads", 4);
  c.set_int("model.patch_h", 2);
  c.set_int("model.patch_w", 2);
  c.set_double("model.dropout", 0.0);
  c.set_int("train.total_iters", 600);
  c.set_int("train.warmup_iters", 162);
  c.set_int("train.batch_size", 8);
  c.set_double("train.lr", 3e-3);
  c.set_double("train.weight_decay", 0.0);
  c.set_double("train.alpha", 0.95);
  c.set_int("seg.total_iters", 300);
  c.set_double("seg.lr", 3e-3);
  c.set_double("seg.weight_decay", 0.0);
  return c;
}

Config paper_preset() {
  Config c;
  c.set_int("model.d", 128);
  c.set_int("model.temporal_layers", 8);
  c.set_int("model.spatial_layers", 4);
  c.set_int("model.heads", 4);
  c.set_int("model.patch_h", 2);
  c.set_int("model.patch_w", 2);
  c.set_double("model.dropout", 0.0);
  c.set_int("train.total_iters", 15000);
  c.set_int("train.warmup_iters", 4000);
  c.set_int("train.batch_size", 8);
  c.set_double("train.lr", 1e-3);
  c.set_double("train.lambda1", 0.01);
  c.set_double("train.lambda2", 0.015);
  c.set_double("train.eta", 0.05);
  c.set_double("train.tau", 0.1);
  c.set_double("train.alpha", 0.999);
  c.set_int("train.np", 2);
  c.set_double("train.mu_low", 0.2);
  c.set_double("train.mu_high", 0.4);
  c.set_double("train.theta_bg", 0.3);
  return c;
}

}  // namespace exact
