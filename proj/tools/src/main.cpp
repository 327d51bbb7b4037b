// Command-line entry point: dataset synthesis, classifier training,
// pseudo-label generation, segmentation, evaluation, ablation grid, plots.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "exact/cb_cam.h"
#include "exact/error.h"
#include "exact/image.h"
#include "exact/train.h"

namespace fs = std::filesystem;
using namespace exact;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string preset = "desk";
  std::int64_t seed = -1;
  std::string out_dir;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool need_out = true) {
  cmd->add_option("--config", o.config_path, "key-value configuration file");
  cmd->add_option("--preset", o.preset, "configuration preset")
      ->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--seed", o.seed, "root seed (overrides config)");
  auto* out = cmd->add_option("--out", o.out_dir, "output directory");
  if (need_out) out->required();
}

// Preset, then file, then flags; the effective config is echoed into the
// output directory so every artifact is reproducible from its inputs.
Config effective_config(const CommonOpts& o) {
  Config c = o.preset == "paper" ? paper_preset() : desk_preset();
  if (!o.config_path.empty()) c.merge(Config::from_file(o.config_path));
  if (o.seed >= 0) {
    c.set_int("data.seed", o.seed);
    c.set_int("train.seed", o.seed);
    c.set_int("seg.seed", o.seed);
  }
  return c;
}

void echo_config(const Config& c, const std::string& out_dir) {
  fs::create_directories(out_dir);
  c.write_file((fs::path(out_dir) / "effective_config.txt").string());
}

int run_synth(const CommonOpts& o, std::size_t train_n, std::size_t test_n) {
  Config c = effective_config(o);
  echo_config(c, o.out_dir);
  SynthConfig sc = SynthConfig::from_config(c);
  DatasetManifest train = synth_dataset(sc, train_n, (fs::path(o.out_dir) / "train").string(), "train");
  write_manifest(train, (fs::path(o.out_dir) / "train" / "manifest.txt").string());
  DatasetManifest test = synth_dataset(sc, test_n, (fs::path(o.out_dir) / "test").string(), "test");
  write_manifest(test, (fs::path(o.out_dir) / "test" / "manifest.txt").string());
  std::cout << "synth: wrote " << train_n << " train / " << test_n << " test samples to "
            << o.out_dir << "\n";
  return 0;
}

int run_train_cls(const CommonOpts& o, const std::string& data, const std::string& ablation) {
  Config c = effective_config(o);
  if (!ablation.empty()) {
    std::istringstream ss(ablation);
    std::string flag;
    while (std::getline(ss, flag, ',')) {
      if (flag == "disable_cbl" || flag == "disable_tap")
        c.set_bool("train." + flag, true);
      else
        throw ConfigError("ablate: unknown ablation flag '" + flag + "'");
    }
  }
  echo_config(c, o.out_dir);
  DatasetManifest manifest = read_manifest(data);
  TrainConfig tc = TrainConfig::from_config(c);
  ModelConfig mc = ModelConfig::from_config(c);
  ClassifierArtifacts art = train_classifier(manifest, tc, mc, o.out_dir, false);
  std::cout << "train-cls: final loss " << art.final_loss << ", train multilabel F1 "
            << art.train_f1 << "\n"
            << "checkpoint: " << art.checkpoint_dir << "\nbank: " << art.bank_dir << "\n";
  return 0;
}

int run_pseudo(const CommonOpts& o, const std::string& checkpoint, const std::string& bank,
               const std::string& data, const std::string& mode) {
  Config c = effective_config(o);
  echo_config(c, o.out_dir);
  DatasetManifest manifest = read_manifest(data);
  TrainConfig tc = TrainConfig::from_config(c);
  PseudoMode pm = mode == "cb_cam" ? PseudoMode::CbCam : PseudoMode::RawCam;
  PseudoArtifacts art = generate_pseudo_labels(checkpoint, bank, manifest, pm, tc, o.out_dir);
  std::cout << "pseudo (" << mode << "): OA " << art.report.oa << " mIoU " << art.report.miou
            << "\nmasks: " << art.mask_dir << "\n";
  return 0;
}

int run_train_seg(const CommonOpts& o, const std::string& data, const std::string& test,
                  const std::string& masks) {
  Config c = effective_config(o);
  echo_config(c, o.out_dir);
  DatasetManifest train = read_manifest(data);
  DatasetManifest test_m = read_manifest(test);
  ModelConfig mc = ModelConfig::from_config(c);
  SegConfig sc = SegConfig::from_config(c);
  SegArtifacts art = train_segmentation(train, masks, test_m, mc, sc, o.out_dir, false);
  std::cout << "train-seg: test OA " << art.test_report.oa << " mIoU " << art.test_report.miou
            << "\n";
  return 0;
}

int run_eval(const CommonOpts& o, const std::string& pred_dir, const std::string& data,
             const std::string& suffix) {
  Config c = effective_config(o);
  echo_config(c, o.out_dir);
  DatasetManifest manifest = read_manifest(data);
  std::size_t K = static_cast<std::size_t>(c.get_int("data.K", 4));
  ConfusionMatrix cm(K + 1);
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    SITSSample s = load_sample(manifest, i, K, c.get_double("data.min_frac", 0.01));
    std::string path = (fs::path(pred_dir) / (s.sample_id + suffix)).string();
    if (!fs::exists(path)) throw DataError("eval: missing prediction " + path);
    cm.accumulate(read_mask_tensor(path), s.mask);
  }
  EvalReport r = finalize(cm, true);
  write_report(r, (fs::path(o.out_dir) / "report").string());
  std::cout << report_text(r);
  return 0;
}

int run_ablate(const CommonOpts& o, const std::string& data) {
  Config base = effective_config(o);
  echo_config(base, o.out_dir);
  DatasetManifest manifest = read_manifest(data);
  ModelConfig mc = ModelConfig::from_config(base);

  struct Row {
    std::string name;
    bool cbl, tap, cbcam;
  };
  // Tab. 3 grid order: baseline, +tap, +cbl+tap, full.
  const std::vector<Row> rows = {{"baseline", false, false, false},
                                 {"+tap", false, true, false},
                                 {"+cbl+tap", true, true, false},
                                 {"full", true, true, true}};

  // Two classifier trainings cover the grid: the +cbl+tap checkpoint also
  // serves the full row, which only changes the CAM generation.
  std::map<std::string, ClassifierArtifacts> trained;
  auto train_variant = [&](const std::string& name, bool cbl, bool tap) {
    Config c = base;
    c.set_bool("train.disable_cbl", !cbl);
    c.set_bool("train.disable_tap", !tap);
    TrainConfig tc = TrainConfig::from_config(c);
    std::string dir = (fs::path(o.out_dir) / ("train_" + name)).string();
    echo_config(c, dir);
    std::cerr << "[ablate] training variant " << name << "\n";
    return train_classifier(manifest, tc, mc, dir, true);
  };
  trained["baseline"] = train_variant("baseline", false, false);
  trained["+tap"] = train_variant("tap", false, true);
  trained["+cbl+tap"] = train_variant("cbl_tap", true, true);

  std::ostringstream table;
  table << "variant oa miou\n";
  std::cout << "variant           OA      mIoU\n";
  for (const Row& row : rows) {
    const ClassifierArtifacts& art = trained.count(row.name) ? trained[row.name] : trained["+cbl+tap"];
    Config c = base;
    TrainConfig tc = TrainConfig::from_config(c);
    std::string pdir = (fs::path(o.out_dir) / ("pseudo_" + row.name)).string();
    PseudoArtifacts pa = generate_pseudo_labels(art.checkpoint_dir, art.bank_dir, manifest,
                                                row.cbcam ? PseudoMode::CbCam : PseudoMode::RawCam,
                                                tc, pdir);
    table << row.name << " " << format_double(pa.report.oa) << " "
          << format_double(pa.report.miou) << "\n";
    std::printf("%-16s %7.4f %8.4f\n", row.name.c_str(), pa.report.oa, pa.report.miou);
  }
  std::ofstream out(fs::path(o.out_dir) / "ablation_table.txt", std::ios::binary);
  out << table.str();
  return 0;
}

int run_plot(const CommonOpts& o, const std::string& checkpoint, const std::string& bank_dir,
             const std::string& data, std::size_t n_samples, bool dump_tensors) {
  Config c = effective_config(o);
  echo_config(c, o.out_dir);
  DatasetManifest manifest = read_manifest(data);
  TrainConfig tc = TrainConfig::from_config(c);
  TSViT model = TSViT::load(checkpoint);
  const ModelConfig& mc = model.config();
  const std::size_t P = mc.positions(), K = mc.K;

  bool have_bank = !bank_dir.empty() && fs::exists(fs::path(bank_dir) / "manifest.txt");
  PrototypeBank bank;
  if (have_bank) bank = PrototypeBank::load(bank_dir);

  std::size_t cell = 12;
  for (std::size_t i = 0; i < std::min<std::size_t>(n_samples, manifest.size()); ++i) {
    SITSSample s = load_sample(manifest, i, K, c.get_double("data.min_frac", 0.01));
    EncoderOutputs out = model.forward(s.series, false, nullptr);
    ad::Value w = model.classifier_weights();
    ad::Value cam_t = normalize_cam(dense_cam(out.z_t_dense, w));
    ad::Value cam_s = normalize_cam(dense_cam(ad::permute_102(out.z_s_dense), w));
    ad::Value fused = fuse_cams(cam_t, cam_s, tc.cam_source, tc.renormalize_after_fusion);

    TemporalClassAttention att =
        extract_t2c_attention(out.attention_stack, P, mc.heads, K, mc.T, tc.attention_layer_mode);
    Eigen::ArrayXd v = reweight(out.z_t_seq.data(), P, mc.T, mc.d, att);
    std::vector<LocalAffinity> aff(K);
    for (std::size_t k = 0; k < K; ++k)
      aff[k] = pairwise_affinity(
          v.segment(static_cast<Eigen::Index>(k * P * mc.d), static_cast<Eigen::Index>(P * mc.d)),
          mc.grid_h(), mc.grid_w(), mc.d, tc.sigma_mode);
    Eigen::ArrayXd propagated = propagate(fused.data(), P, K, aff, tc.propagate_iters);

    Eigen::ArrayXd raw_for_mask = fused.data();
    mask_absent_classes(raw_for_mask, P, K, s.image_labels);
    MaskTensor raw_pseudo = upsample_mask(
        pseudo_mask(raw_for_mask, mc.grid_h(), mc.grid_w(), K, tc.theta_bg, s.image_labels),
        mc.patch_h, mc.patch_w);

    std::vector<std::vector<Image>> rows;
    std::vector<Image> cam_row, prop_row, cb_row;
    for (std::size_t k = 0; k < K; ++k)
      cam_row.push_back(render_heatmap(fused.data(), mc.grid_h(), mc.grid_w(), K, k, cell / 2));
    for (std::size_t k = 0; k < K; ++k)
      prop_row.push_back(render_heatmap(propagated, mc.grid_h(), mc.grid_w(), K, k, cell / 2));
    rows.push_back(cam_row);
    rows.push_back(prop_row);

    Eigen::ArrayXd cb;
    if (have_bank) {
      cb = cb_cam(out.z_t_dense.data(), P, K, mc.d, bank, tc.tau, s.image_labels,
                  tc.cbcam_class_agnostic, true);
      for (std::size_t k = 0; k < K; ++k)
        cb_row.push_back(render_heatmap(cb, mc.grid_h(), mc.grid_w(), K, k, cell / 2));
      rows.push_back(cb_row);
    }

    std::vector<Image> mask_row;
    mask_row.push_back(render_mask(s.mask, cell / 2));
    mask_row.push_back(render_mask(raw_pseudo, cell / 2));
    if (have_bank) {
      Eigen::ArrayXd cb_for_mask = cb;
      mask_absent_classes(cb_for_mask, P, K, s.image_labels);
      mask_row.push_back(render_mask(
          upsample_mask(pseudo_mask(cb_for_mask, mc.grid_h(), mc.grid_w(), K, tc.theta_bg,
                                    s.image_labels),
                        mc.patch_h, mc.patch_w),
          cell / 2));
    }
    rows.push_back(mask_row);

    write_png((fs::path(o.out_dir) / (s.sample_id + "_panel.png")).string(), compose_grid(rows));
    write_png((fs::path(o.out_dir) / (s.sample_id + "_attention.png")).string(),
              render_attention_chart(att.a_tilde, mc.T, K));

    if (dump_tensors) {
      Tensor at;
      at.dims = {mc.T, K};
      at.data.assign(att.a_tilde.data(), att.a_tilde.data() + att.a_tilde.size());
      write_tensor_file((fs::path(o.out_dir) / (s.sample_id + "_a_tilde.stsr")).string(), at,
                        DType::F64);
      Eigen::ArrayXd cur = fused.data();
      for (std::size_t it = 1; it <= tc.propagate_iters; ++it) {
        cur = propagate(cur, P, K, aff, 1);
        Tensor mt;
        mt.dims = {P, K};
        mt.data.assign(cur.data(), cur.data() + cur.size());
        write_tensor_file((fs::path(o.out_dir) /
                           (s.sample_id + "_m_tilde_iter" + std::to_string(it) + ".stsr"))
                              .string(),
                          mt, DType::F64);
      }
    }
  }
  std::cout << "plot: wrote panels for " << std::min<std::size_t>(n_samples, manifest.size())
            << " samples to " << o.out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly supervised SITS segmentation pipeline"};
  app.require_subcommand(1);

  CommonOpts synth_o, train_o, pseudo_o, seg_o, eval_o, ablate_o, plot_o;

  auto* synth = app.add_subcommand("synth", "generate a synthetic SITS dataset");
  add_common(synth, synth_o);
  std::size_t train_n = 64, test_n = 32;
  synth->add_option("--train-samples", train_n, "training sample count");
  synth->add_option("--test-samples", test_n, "test sample count");

  auto* train = app.add_subcommand("train-cls", "train the classification network");
  add_common(train, train_o);
  std::string train_data, ablation_flags;
  train->add_option("--data", train_data, "train split manifest")->required();
  train->add_option("--ablation-flags", ablation_flags,
                    "comma-separated: disable_cbl,disable_tap");

  auto* pseudo = app.add_subcommand("pseudo", "generate pseudo labels from a checkpoint");
  add_common(pseudo, pseudo_o);
  std::string pseudo_ckpt, pseudo_bank, pseudo_data, pseudo_mode = "cb_cam";
  pseudo->add_option("--checkpoint", pseudo_ckpt, "classifier checkpoint dir")->required();
  pseudo->add_option("--bank", pseudo_bank, "prototype bank dir");
  pseudo->add_option("--data", pseudo_data, "manifest to label")->required();
  pseudo->add_option("--mode", pseudo_mode, "raw_cam or cb_cam")
      ->check(CLI::IsMember({"raw_cam", "cb_cam"}));

  auto* seg = app.add_subcommand("train-seg", "train the segmentation network");
  add_common(seg, seg_o);
  std::string seg_data, seg_test, seg_masks;
  seg->add_option("--data", seg_data, "train split manifest")->required();
  seg->add_option("--test", seg_test, "test split manifest")->required();
  seg->add_option("--masks", seg_masks, "pseudo mask dir (omit to train on ground truth)");

  auto* eval = app.add_subcommand("eval", "evaluate prediction masks against ground truth");
  add_common(eval, eval_o);
  std::string eval_pred, eval_data, eval_suffix = "_pseudo.stsr";
  eval->add_option("--pred", eval_pred, "directory of prediction masks")->required();
  eval->add_option("--data", eval_data, "manifest with ground truth")->required();
  eval->add_option("--suffix", eval_suffix, "prediction filename suffix");

  auto* ablate = app.add_subcommand("ablate", "run the component ablation grid");
  add_common(ablate, ablate_o);
  std::string ablate_data;
  ablate->add_option("--data", ablate_data, "train split manifest")->required();

  auto* plot = app.add_subcommand("plot", "render CAM/CB-CAM/mask panels and attention charts");
  add_common(plot, plot_o);
  std::string plot_ckpt, plot_bank, plot_data;
  std::size_t plot_n = 4;
  bool plot_dump = false;
  plot->add_option("--checkpoint", plot_ckpt, "classifier checkpoint dir")->required();
  plot->add_option("--bank", plot_bank, "prototype bank dir");
  plot->add_option("--data", plot_data, "manifest to visualize")->required();
  plot->add_option("--samples", plot_n, "number of samples to render");
  plot->add_flag("--dump-tensors", plot_dump, "also write attention / propagation tensor files");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return run_synth(synth_o, train_n, test_n);
    if (train->parsed()) return run_train_cls(train_o, train_data, ablation_flags);
    if (pseudo->parsed())
      return run_pseudo(pseudo_o, pseudo_ckpt, pseudo_bank, pseudo_data, pseudo_mode);
    if (seg->parsed()) return run_train_seg(seg_o, seg_data, seg_test, seg_masks);
    if (eval->parsed()) return run_eval(eval_o, eval_pred, eval_data, eval_suffix);
    if (ablate->parsed()) return run_ablate(ablate_o, ablate_data);
    if (plot->parsed())
      return run_plot(plot_o, plot_ckpt, plot_bank, plot_data, plot_n, plot_dump);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
