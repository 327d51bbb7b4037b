#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "exact/config.h"
#include "exact/tensor.h"

namespace exact {

// One multi-spectral time series with its dense ground-truth mask and the
// image-level label vector derived from it. image_labels has length K;
// index j corresponds to foreground class j+1 (class 0 is background
// everywhere and never produces a label).
struct SITSSample {
  Tensor series;                     // [T x C x H x W], values in [0,1]
  MaskTensor mask;                   // [H x W], values in {0..K}
  std::vector<double> image_labels;  // length K, entries 0/1
  std::string sample_id;
};

struct SynthConfig {
  std::size_t T = 12, C = 4, H = 16, W = 16, K = 4;
  std::size_t parcels_per_image = 6;
  // K per-class temporal signatures, each of length T. Populated with
  // piecewise-linear bumps by default_profiles() when left empty.
  std::vector<std::vector<double>> phenology_profiles;
  double noise_std = 0.05;
  double cloud_prob = 0.1;   // per-timestep chance of an anomalous clip
  double bg_parcel_prob = 0.25;
  double min_frac = 0.01;
  std::uint64_t seed = 0;

  void validate() const;
  static std::vector<std::vector<double>> default_profiles(std::size_t K, std::size_t T);
  static SynthConfig from_config(const Config& c);
  void to_config(Config& c) const;
};

struct ManifestEntry {
  std::string sample_id;
  std::string series_path;  // relative to the manifest directory
  std::string mask_path;
  std::vector<std::size_t> label_indices;  // present foreground classes, 1-based
};

struct DatasetManifest {
  std::string split;  // "train" or "test"
  int format_version = 1;
  std::vector<ManifestEntry> entries;
  std::string base_dir;  // resolution root for relative paths

  std::size_t size() const { return entries.size(); }
};

// labels[j] = 1 iff class j+1 covers at least min_frac of the pixels.
std::vector<double> derive_image_labels(const MaskTensor& mask, std::size_t K, double min_frac);

// Generates n_samples into out_dir/samples/ and returns the manifest
// (entries carry paths relative to out_dir). Deterministic given the config
// seed regardless of worker parallelism: every sample draws from its own
// counter-derived stream.
DatasetManifest synth_dataset(const SynthConfig& config, std::size_t n_samples,
                              const std::string& out_dir, const std::string& split);

void write_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest read_manifest(const std::string& path);

SITSSample load_sample(const DatasetManifest& m, std::size_t index, std::size_t K, double min_frac);

// Effective worker count: EXACT_NUM_THREADS capped at hardware concurrency,
// defaulting to 1.
std::size_t worker_threads();

}  // namespace exact
