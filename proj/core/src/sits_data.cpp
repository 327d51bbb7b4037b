#include "exact/sits_data.h"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <sstream>
#include <thread>

#include "exact/error.h"
#include "exact/rng.h"

namespace fs = std::filesystem;

namespace exact {

std::size_t worker_threads() {
  const char* env = std::getenv("EXACT_NUM_THREADS");
  if (!env) return 1;
  long n = std::strtol(env, nullptr, 10);
  if (n <= 1) return 1;
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  return std::min<std::size_t>(static_cast<std::size_t>(n), hw);
}

std::vector<std::vector<double>> SynthConfig::default_profiles(std::size_t K, std::size_t T) {
  // Piecewise-linear bumps with class-specific peak times. Adjacent classes
  // overlap in their tails, so some timesteps look alike across crops.
  std::vector<std::vector<double>> profiles(K, std::vector<double>(T, 0.0));
  double width = std::max(3.0, static_cast<double>(T) / 3.0);
  for (std::size_t k = 0; k < K; ++k) {
    double peak = (static_cast<double>(k) + 0.5) * static_cast<double>(T) / static_cast<double>(K);
    for (std::size_t t = 0; t < T; ++t) {
      double dist = std::abs(static_cast<double>(t) - peak);
      profiles[k][t] = 0.15 + 0.6 * std::max(0.0, 1.0 - dist / width);
    }
  }
  return profiles;
}

void SynthConfig::validate() const {
  if (T < 1 || C < 1 || H < 1 || W < 1 || K < 1)
    throw ConfigError("synth: dimensions must be positive");
  if (parcels_per_image < 1) throw ConfigError("synth: parcels_per_image must be >= 1");
  if (cloud_prob < 0.0 || cloud_prob >= 1.0) throw ConfigError("synth: cloud_prob must be in [0,1)");
  if (noise_std < 0.0) throw ConfigError("synth: noise_std must be >= 0");
  if (min_frac <= 0.0 || min_frac >= 1.0) throw ConfigError("synth: min_frac must be in (0,1)");
  if (!phenology_profiles.empty()) {
    if (phenology_profiles.size() != K) throw ConfigError("synth: need K phenology profiles");
    for (const auto& p : phenology_profiles)
      if (p.size() != T) throw ConfigError("synth: profile length must equal T");
    for (std::size_t a = 0; a < K; ++a)
      for (std::size_t b = a + 1; b < K; ++b) {
        double d2 = 0.0;
        for (std::size_t t = 0; t < T; ++t) {
          double diff = phenology_profiles[a][t] - phenology_profiles[b][t];
          d2 += diff * diff;
        }
        if (d2 <= 0.0) throw ConfigError("synth: phenology profiles must be pairwise distinct");
      }
  }
}

SynthConfig SynthConfig::from_config(const Config& c) {
  SynthConfig s;
  s.T = static_cast<std::size_t>(c.get_int("data.T", 12));
  s.C = static_cast<std::size_t>(c.get_int("data.C", 4));
  s.H = static_cast<std::size_t>(c.get_int("data.H", 16));
  s.W = static_cast<std::size_t>(c.get_int("data.W", 16));
  s.K = static_cast<std::size_t>(c.get_int("data.K", 4));
  s.parcels_per_image = static_cast<std::size_t>(c.get_int("data.parcels", 6));
  s.noise_std = c.get_double("data.noise_std", 0.05);
  s.cloud_prob = c.get_double("data.cloud_prob", 0.1);
  s.bg_parcel_prob = c.get_double("data.bg_parcel_prob", 0.25);
  s.min_frac = c.get_double("data.min_frac", 0.01);
  s.seed = static_cast<std::uint64_t>(c.get_int("data.seed", 0));
  return s;
}

void SynthConfig::to_config(Config& c) const {
  c.set_int("data.T", static_cast<std::int64_t>(T));
  c.set_int("data.C", static_cast<std::int64_t>(C));
  c.set_int("data.H", static_cast<std::int64_t>(H));
  c.set_int("data.W", static_cast<std::int64_t>(W));
  c.set_int("data.K", static_cast<std::int64_t>(K));
  c.set_int("data.parcels", static_cast<std::int64_t>(parcels_per_image));
  c.set_double("data.noise_std", noise_std);
  c.set_double("data.cloud_prob", cloud_prob);
  c.set_double("data.bg_parcel_prob", bg_parcel_prob);
  c.set_double("data.min_frac", min_frac);
  c.set_int("data.seed", static_cast<std::int64_t>(seed));
}

std::vector<double> derive_image_labels(const MaskTensor& mask, std::size_t K, double min_frac) {
  if (min_frac <= 0.0 || min_frac >= 1.0) throw ConfigError("labels: min_frac must be in (0,1)");
  std::vector<std::size_t> counts(K + 1, 0);
  for (std::uint16_t v : mask.data) {
    if (v > K) throw DataError("labels: mask value " + std::to_string(v) + " exceeds K");
    ++counts[v];
  }
  double total = static_cast<double>(mask.numel());
  std::vector<double> labels(K, 0.0);
  for (std::size_t k = 1; k <= K; ++k)
    if (static_cast<double>(counts[k]) / total >= min_frac) labels[k - 1] = 1.0;
  return labels;
}

namespace {

// Per-channel reflectance gain per class; a fixed spectral signature that is
// part of the generator design, not of the user-facing configuration.
double band_gain(std::size_t channel, std::size_t cls, std::size_t C, std::size_t K) {
  Rng rng(0x5EEDBA5Eu, "bands", cls * (C + K + 1) + channel);
  return rng.uniform(0.55, 1.0);
}

struct GeneratedSample {
  Tensor series;
  MaskTensor mask;
  std::vector<double> labels;
};

GeneratedSample generate_one(const SynthConfig& cfg,
                             const std::vector<std::vector<double>>& profiles,
                             const std::string& split, std::size_t index) {
  Rng rng(cfg.seed, "synth." + split, index);
  const std::size_t H = cfg.H, W = cfg.W, T = cfg.T, C = cfg.C, K = cfg.K;

  // Voronoi parcels; the one-pixel border is reserved background so every
  // mask carries class 0.
  std::vector<double> sx(cfg.parcels_per_image), sy(cfg.parcels_per_image);
  std::vector<std::uint16_t> site_class(cfg.parcels_per_image);
  for (std::size_t s = 0; s < cfg.parcels_per_image; ++s) {
    sx[s] = rng.uniform(0.0, static_cast<double>(W));
    sy[s] = rng.uniform(0.0, static_cast<double>(H));
    if (rng.uniform() < cfg.bg_parcel_prob)
      site_class[s] = 0;
    else
      site_class[s] = static_cast<std::uint16_t>(1 + rng.uniform_index(K));
  }

  MaskTensor mask(H, W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      if (y == 0 || x == 0 || y == H - 1 || x == W - 1) {
        mask.data[y * W + x] = 0;
        continue;
      }
      double best = 1e300;
      std::size_t best_s = 0;
      for (std::size_t s = 0; s < cfg.parcels_per_image; ++s) {
        double dx = static_cast<double>(x) + 0.5 - sx[s];
        double dy = static_cast<double>(y) + 0.5 - sy[s];
        double d2 = dx * dx + dy * dy;
        if (d2 < best) {
          best = d2;
          best_s = s;
        }
      }
      mask.data[y * W + x] = site_class[best_s];
    }

  // Background temporal signature: flat with a weak mid-season bump, close
  // enough to crop tails that a classifier can over-activate on it.
  std::vector<double> bg_profile(T);
  for (std::size_t t = 0; t < T; ++t) {
    double dist = std::abs(static_cast<double>(t) - static_cast<double>(T) / 2.0);
    bg_profile[t] = 0.12 + 0.10 * std::max(0.0, 1.0 - dist / (static_cast<double>(T) / 2.0));
  }

  Tensor series({T, C, H, W});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          std::uint16_t cls = mask.data[y * W + x];
          double base = cls == 0 ? bg_profile[t] * band_gain(c, 0, C, K)
                                 : profiles[cls - 1][t] * band_gain(c, cls, C, K);
          double v = base + rng.normal(0.0, cfg.noise_std);
          v = std::clamp(v, 0.0, 1.0);
          series.data[((t * C + c) * H + y) * W + x] = static_cast<double>(static_cast<float>(v));
        }

  // Anomalous clips: a whole timestep swamped by bright noise.
  for (std::size_t t = 0; t < T; ++t) {
    if (rng.uniform() >= cfg.cloud_prob) continue;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          double v = std::clamp(rng.normal(0.9, 0.05), 0.0, 1.0);
          series.data[((t * C + c) * H + y) * W + x] = static_cast<double>(static_cast<float>(v));
        }
  }

  GeneratedSample out;
  out.labels = derive_image_labels(mask, K, cfg.min_frac);
  out.series = std::move(series);
  out.mask = std::move(mask);
  return out;
}

std::string sample_name(const std::string& split, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%04zu", split.c_str(), index);
  return buf;
}

}  // namespace

DatasetManifest synth_dataset(const SynthConfig& config, std::size_t n_samples,
                              const std::string& out_dir, const std::string& split) {
  config.validate();
  if (n_samples < 1) throw ConfigError("synth: n_samples must be >= 1");
  auto profiles = config.phenology_profiles.empty()
                      ? SynthConfig::default_profiles(config.K, config.T)
                      : config.phenology_profiles;
  {
    SynthConfig check = config;
    check.phenology_profiles = profiles;
    check.validate();
  }

  fs::create_directories(fs::path(out_dir) / "samples");

  DatasetManifest manifest;
  manifest.split = split;
  manifest.base_dir = out_dir;
  manifest.entries.resize(n_samples);

  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      GeneratedSample g = generate_one(config, profiles, split, i);
      std::string id = sample_name(split, i);
      std::string series_rel = "samples/" + id + "_series.stsr";
      std::string mask_rel = "samples/" + id + "_mask.stsr";
      write_tensor_file((fs::path(out_dir) / series_rel).string(), g.series, DType::F32);
      write_mask_file((fs::path(out_dir) / mask_rel).string(), g.mask);
      ManifestEntry e;
      e.sample_id = id;
      e.series_path = series_rel;
      e.mask_path = mask_rel;
      for (std::size_t k = 0; k < config.K; ++k)
        if (g.labels[k] > 0.5) e.label_indices.push_back(k + 1);
      manifest.entries[i] = std::move(e);
    }
  };

  std::size_t threads = std::min(worker_threads(), n_samples);
  if (threads <= 1) {
    work(0, n_samples);
  } else {
    std::vector<std::future<void>> futs;
    std::size_t chunk = (n_samples + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      std::size_t b = t * chunk, e = std::min(n_samples, b + chunk);
      if (b >= e) break;
      futs.push_back(std::async(std::launch::async, work, b, e));
    }
    for (auto& f : futs) f.get();
  }
  return manifest;
}

void write_manifest(const DatasetManifest& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("manifest: cannot write " + path);
  out << "format_version " << m.format_version << "\n";
  out << "split " << m.split << "\n";
  for (const auto& e : m.entries) {
    out << "entry " << e.sample_id << " " << e.series_path << " " << e.mask_path << " ";
    if (e.label_indices.empty()) {
      out << "-";
    } else {
      for (std::size_t i = 0; i < e.label_indices.size(); ++i) {
        if (i) out << ",";
        out << e.label_indices[i];
      }
    }
    out << "\n";
  }
}

DatasetManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("manifest: cannot open " + path);
  DatasetManifest m;
  m.base_dir = fs::path(path).parent_path().string();
  if (m.base_dir.empty()) m.base_dir = ".";
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "format_version") {
      ss >> m.format_version;
      if (m.format_version != 1)
        throw FormatError("manifest: unsupported format_version " + std::to_string(m.format_version));
    } else if (tag == "split") {
      ss >> m.split;
    } else if (tag == "entry") {
      ManifestEntry e;
      std::string labels;
      if (!(ss >> e.sample_id >> e.series_path >> e.mask_path >> labels))
        throw FormatError("manifest: malformed entry on line " + std::to_string(lineno));
      if (labels != "-") {
        std::istringstream ls(labels);
        std::string tok;
        while (std::getline(ls, tok, ','))
          e.label_indices.push_back(static_cast<std::size_t>(std::stoul(tok)));
      }
      m.entries.push_back(std::move(e));
    } else {
      throw FormatError("manifest: unknown tag '" + tag + "' on line " + std::to_string(lineno));
    }
  }
  return m;
}

SITSSample load_sample(const DatasetManifest& m, std::size_t index, std::size_t K, double min_frac) {
  if (index >= m.entries.size()) throw ContractError("dataset: sample index out of range");
  const ManifestEntry& e = m.entries[index];
  SITSSample s;
  s.sample_id = e.sample_id;
  s.series = read_float_tensor((fs::path(m.base_dir) / e.series_path).string());
  if (s.series.rank() != 4) throw DataError("dataset: series must be rank 4: " + e.series_path);
  s.mask = read_mask_tensor((fs::path(m.base_dir) / e.mask_path).string());
  if (s.mask.dims.size() != 2) throw DataError("dataset: mask must be rank 2: " + e.mask_path);
  s.image_labels = derive_image_labels(s.mask, K, min_frac);
  // Consistency between stored and derived labels.
  std::vector<std::size_t> derived;
  for (std::size_t k = 0; k < K; ++k)
    if (s.image_labels[k] > 0.5) derived.push_back(k + 1);
  if (derived != e.label_indices)
    throw DataError("dataset: stored labels disagree with mask for sample " + e.sample_id);
  return s;
}

}  // namespace exact
