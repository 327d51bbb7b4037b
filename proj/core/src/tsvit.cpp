#include "exact/tsvit.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "exact/error.h"

namespace fs = std::filesystem;

namespace exact {

void ModelConfig::validate() const {
  if (d == 0 || heads == 0 || temporal_layers == 0 || K == 0 || T == 0 || C == 0)
    throw ConfigError("model: dimensions must be positive");
  if (d % heads != 0) throw ConfigError("model: d must be divisible by heads");
  if (patch_h == 0 || patch_w == 0) throw ConfigError("model: patch dims must be positive");
  if (input_h % patch_h != 0 || input_w % patch_w != 0)
    throw ConfigError("model: input dims must be divisible by the patch size");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must be in [0,1)");
}

ModelConfig ModelConfig::from_config(const Config& c) {
  ModelConfig m;
  m.d = static_cast<std::size_t>(c.get_int("model.d", 128));
  m.temporal_layers = static_cast<std::size_t>(c.get_int("model.temporal_layers", 8));
  m.spatial_layers = static_cast<std::size_t>(c.get_int("model.spatial_layers", 4));
  m.heads = static_cast<std::size_t>(c.get_int("model.heads", 4));
  m.patch_h = static_cast<std::size_t>(c.get_int("model.patch_h", 2));
  m.patch_w = static_cast<std::size_t>(c.get_int("model.patch_w", 2));
  m.K = static_cast<std::size_t>(c.get_int("data.K", 4));
  m.T = static_cast<std::size_t>(c.get_int("data.T", 12));
  m.C = static_cast<std::size_t>(c.get_int("data.C", 4));
  m.input_h = static_cast<std::size_t>(c.get_int("data.H", 16));
  m.input_w = static_cast<std::size_t>(c.get_int("data.W", 16));
  m.dropout = c.get_double("model.dropout", 0.0);
  return m;
}

void ModelConfig::to_config(Config& c) const {
  c.set_int("model.d", static_cast<std::int64_t>(d));
  c.set_int("model.temporal_layers", static_cast<std::int64_t>(temporal_layers));
  c.set_int("model.spatial_layers", static_cast<std::int64_t>(spatial_layers));
  c.set_int("model.heads", static_cast<std::int64_t>(heads));
  c.set_int("model.patch_h", static_cast<std::int64_t>(patch_h));
  c.set_int("model.patch_w", static_cast<std::int64_t>(patch_w));
  c.set_int("data.K", static_cast<std::int64_t>(K));
  c.set_int("data.T", static_cast<std::int64_t>(T));
  c.set_int("data.C", static_cast<std::int64_t>(C));
  c.set_int("data.H", static_cast<std::int64_t>(input_h));
  c.set_int("data.W", static_cast<std::int64_t>(input_w));
  c.set_double("model.dropout", dropout);
}

namespace {

Eigen::ArrayXd normal_init(Rng& rng, std::size_t n, double std_dev) {
  Eigen::ArrayXd a(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = rng.normal(0.0, std_dev);
  return a;
}

// Fan-scaled init for the linear maps; at d=32 the flat 0.02 used by large
// ViTs starves the residual stream of input signal and training settles on
// the label base rates.
Eigen::ArrayXd xavier_init(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  return normal_init(rng, fan_in * fan_out, std_dev);
}

void add_block_params(ad::ParamStore& ps, const std::string& prefix, std::size_t d, Rng& rng) {
  std::size_t hidden = 4 * d;
  ps.create(prefix + ".ln1.gamma", {d}, Eigen::ArrayXd::Ones(static_cast<Eigen::Index>(d)));
  ps.create(prefix + ".ln1.beta", {d}, Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(d)));
  ps.create(prefix + ".q.weight", {d, d}, xavier_init(rng, d, d));
  ps.create(prefix + ".q.bias", {d}, Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(d)));
  ps.create(prefix + ".k.weight", {d, d}, xavier_init(rng, d, d));
  ps.create(prefix + ".k.bias", {d}, Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(d)));
  ps.create(prefix + ".v.weight", {d, d}, xavier_init(rng, d, d));
  ps.create(prefix + ".v.bias", {d}, Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(d)));
  ps.create(prefix + ".proj.weight", {d, d}, xavier_init(rng, d, d));
  ps.create(prefix + ".proj.bias", {d}, Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(d)));
  ps.create(prefix + ".ln2.gamma", {d}, Eigen::ArrayXd::Ones(static_cast<Eigen::Index>(d)));
  ps.create(prefix + ".ln2.beta", {d}, Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(d)));
  ps.create(prefix + ".fc1.weight", {d, hidden}, xavier_init(rng, d, hidden));
  ps.create(prefix + ".fc1.bias", {hidden}, Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(hidden)));
  ps.create(prefix + ".fc2.weight", {hidden, d}, xavier_init(rng, hidden, d));
  ps.create(prefix + ".fc2.bias", {d}, Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(d)));
}

}  // namespace

TSViT::TSViT(const ModelConfig& cfg, Rng& init_rng) : cfg_(cfg) {
  cfg_.validate();
  std::size_t d = cfg_.d;
  std::size_t patch_in = cfg_.C * cfg_.patch_h * cfg_.patch_w;
  params_.create("patch_embed.weight", {patch_in, d}, xavier_init(init_rng, patch_in, d));
  params_.create("patch_embed.bias", {d}, Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(d)));
  params_.create("temporal.cls_tokens", {cfg_.K, d}, normal_init(init_rng, cfg_.K * d, 0.02));
  params_.create("temporal.pos", {cfg_.T, d}, normal_init(init_rng, cfg_.T * d, 0.02));
  for (std::size_t l = 0; l < cfg_.temporal_layers; ++l)
    add_block_params(params_, "temporal.l" + std::to_string(l), d, init_rng);
  params_.create("temporal.ln_f.gamma", {d}, Eigen::ArrayXd::Ones(static_cast<Eigen::Index>(d)));
  params_.create("temporal.ln_f.beta", {d}, Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(d)));
  params_.create("spatial.cls_tokens", {cfg_.K, d}, normal_init(init_rng, cfg_.K * d, 0.02));
  params_.create("spatial.pos", {cfg_.positions(), d},
                 normal_init(init_rng, cfg_.positions() * d, 0.02));
  for (std::size_t l = 0; l < cfg_.spatial_layers; ++l)
    add_block_params(params_, "spatial.l" + std::to_string(l), d, init_rng);
  params_.create("spatial.ln_f.gamma", {d}, Eigen::ArrayXd::Ones(static_cast<Eigen::Index>(d)));
  params_.create("spatial.ln_f.beta", {d}, Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(d)));
  // No classifier bias: CAM scores stay directly comparable to the logits.
  params_.create("classifier.weight", {cfg_.K, d}, xavier_init(init_rng, cfg_.K, d));
}

TSViT::TSViT(const ModelConfig& cfg, ad::ParamStore&& params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
}

namespace {

void fill_patch_rows(const Tensor& series, const ModelConfig& cfg, double* dst) {
  const std::size_t T = cfg.T, C = cfg.C, H = cfg.input_h, W = cfg.input_w;
  const std::size_t nh = cfg.grid_h(), nw = cfg.grid_w();
  const std::size_t ph = cfg.patch_h, pw = cfg.patch_w;
  const std::size_t f = C * ph * pw;
  for (std::size_t gy = 0; gy < nh; ++gy)
    for (std::size_t gx = 0; gx < nw; ++gx)
      for (std::size_t t = 0; t < T; ++t) {
        std::size_t row = (gy * nw + gx) * T + t;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t dy = 0; dy < ph; ++dy)
            for (std::size_t dx = 0; dx < pw; ++dx) {
              std::size_t y = gy * ph + dy, x = gx * pw + dx;
              dst[row * f + c * ph * pw + dy * pw + dx] =
                  series.data[((t * C + c) * H + y) * W + x];
            }
      }
}

void check_series(const Tensor& series, const ModelConfig& cfg) {
  if (series.rank() != 4) throw ContractError("patchify: series must be rank 4");
  if (series.dims[0] != cfg.T || series.dims[1] != cfg.C || series.dims[2] != cfg.input_h ||
      series.dims[3] != cfg.input_w)
    throw ConfigError("patchify: series dims do not match the model configuration");
  if (cfg.input_h % cfg.patch_h != 0 || cfg.input_w % cfg.patch_w != 0)
    throw ConfigError("patchify: spatial dims not divisible by the patch size");
}

}  // namespace

ad::Value TSViT::patchify(const Tensor& series) const {
  check_series(series, cfg_);
  const std::size_t P = cfg_.positions();
  const std::size_t f = cfg_.C * cfg_.patch_h * cfg_.patch_w;
  Eigen::ArrayXd flat(static_cast<Eigen::Index>(P * cfg_.T * f));
  fill_patch_rows(series, cfg_, flat.data());
  ad::Value patches = ad::constant({P * cfg_.T, f}, std::move(flat));
  ad::Value w = params_.get("patch_embed.weight");
  ad::Value b = params_.get("patch_embed.bias");
  return ad::reshape(ad::linear(patches, w, &b), {P, cfg_.T, cfg_.d});
}

ad::Value TSViT::encoder_block(const std::string& prefix, ad::Value x, bool training,
                               Rng* dropout_rng, std::vector<Eigen::ArrayXd>* attn_sink) const {
  const std::size_t d = cfg_.d, heads = cfg_.heads, dh = d / heads;
  auto p = [&](const std::string& s) { return params_.get(prefix + s); };

  ad::Value h = ad::layernorm(x, p(".ln1.gamma"), p(".ln1.beta"));
  ad::Value qb = p(".q.bias"), kb = p(".k.bias"), vb = p(".v.bias");
  ad::Value q = ad::split_heads(ad::linear(h, p(".q.weight"), &qb), heads);
  ad::Value k = ad::split_heads(ad::linear(h, p(".k.weight"), &kb), heads);
  ad::Value v = ad::split_heads(ad::linear(h, p(".v.weight"), &vb), heads);
  ad::Value attn = ad::softmax_last(ad::scale(ad::bmm_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dh))));
  if (attn_sink) attn_sink->push_back(attn.data());
  ad::Value ctx = ad::merge_heads(ad::bmm(attn, v), heads);
  ad::Value pb = p(".proj.bias");
  ad::Value proj = ad::linear(ctx, p(".proj.weight"), &pb);
  if (training && cfg_.dropout > 0.0 && dropout_rng)
    proj = ad::dropout(proj, cfg_.dropout, *dropout_rng);
  x = ad::add(x, proj);

  ad::Value h2 = ad::layernorm(x, p(".ln2.gamma"), p(".ln2.beta"));
  ad::Value f1b = p(".fc1.bias"), f2b = p(".fc2.bias");
  ad::Value m = ad::linear(ad::gelu(ad::linear(h2, p(".fc1.weight"), &f1b)), p(".fc2.weight"), &f2b);
  if (training && cfg_.dropout > 0.0 && dropout_rng) m = ad::dropout(m, cfg_.dropout, *dropout_rng);
  return ad::add(x, m);
}

TSViT::TemporalResult TSViT::temporal_forward(const ad::Value& tokens, bool training,
                                              Rng* dropout_rng) const {
  const std::size_t K = cfg_.K, T = cfg_.T;
  if (tokens.shape().size() != 3 || tokens.shape()[1] != T || tokens.shape()[2] != cfg_.d)
    throw ContractError("temporal_forward: tokens must be [P, T, d]");
  const std::size_t P = tokens.shape()[0];

  // Class tokens once per patch sequence, order-indexed position table on
  // the temporal tokens.
  ad::Value cls = ad::repeat_to_batch(params_.get("temporal.cls_tokens"), P);
  ad::Value x = ad::concat_seq(cls, ad::add_broadcast_seq(tokens, params_.get("temporal.pos")));

  TemporalResult out;
  for (std::size_t l = 0; l < cfg_.temporal_layers; ++l)
    x = encoder_block("temporal.l" + std::to_string(l), x, training, dropout_rng,
                      &out.attention_stack);
  x = ad::layernorm(x, params_.get("temporal.ln_f.gamma"), params_.get("temporal.ln_f.beta"));
  out.z_t_dense = ad::slice_seq(x, 0, K);
  out.z_t_seq = ad::slice_seq(x, K, T);
  return out;
}

TSViT::SpatialResult TSViT::spatial_forward(const ad::Value& z_t_dense, bool training,
                                            Rng* dropout_rng) const {
  const std::size_t K = cfg_.K, d = cfg_.d;
  if (z_t_dense.shape().size() != 3 || z_t_dense.shape()[1] != K || z_t_dense.shape()[2] != d)
    throw ContractError("spatial_forward: input must be [B*P, K, d]");
  const std::size_t P = cfg_.positions();
  if (z_t_dense.shape()[0] % P != 0)
    throw ContractError("spatial_forward: leading dim must be a multiple of the grid size");
  const std::size_t B = z_t_dense.shape()[0] / P;

  ad::Value zs = ad::permute_102_grouped(z_t_dense, B);  // [B*K, P, d]
  zs = ad::add_broadcast_seq(zs, params_.get("spatial.pos"));
  ad::Value scls =
      ad::reshape(ad::repeat_to_batch(params_.get("spatial.cls_tokens"), B), {B * K, 1, d});
  ad::Value y = ad::concat_seq(scls, zs);  // [B*K, 1+P, d]
  for (std::size_t l = 0; l < cfg_.spatial_layers; ++l)
    y = encoder_block("spatial.l" + std::to_string(l), y, training, dropout_rng, nullptr);
  y = ad::layernorm(y, params_.get("spatial.ln_f.gamma"), params_.get("spatial.ln_f.beta"));

  SpatialResult out;
  out.z_s_global = ad::reshape(ad::slice_seq(y, 0, 1), {B * K, d});
  out.z_s_dense = ad::slice_seq(y, 1, P);
  return out;
}

ad::Value TSViT::classify_global(const ad::Value& z_s_global) const {
  const std::size_t K = cfg_.K, d = cfg_.d;
  if (z_s_global.shape().size() != 2 || z_s_global.shape()[0] % K != 0 ||
      z_s_global.shape()[1] != d)
    throw ContractError("classify_global: input must be [B*K, d]");
  const std::size_t B = z_s_global.shape()[0] / K;
  ad::Value w = params_.get("classifier.weight");
  if (B > 1) w = ad::reshape(ad::repeat_to_batch(w, B), {B * K, d});
  return ad::rowwise_dot(z_s_global, w);
}

TSViT::BatchOutputs TSViT::forward_batch(const std::vector<const Tensor*>& series, bool training,
                                         Rng* dropout_rng) const {
  if (series.empty()) throw ContractError("forward_batch: empty batch");
  const std::size_t B = series.size();
  const std::size_t P = cfg_.positions();
  const std::size_t f = cfg_.C * cfg_.patch_h * cfg_.patch_w;

  Eigen::ArrayXd flat(static_cast<Eigen::Index>(B * P * cfg_.T * f));
  for (std::size_t b = 0; b < B; ++b) {
    check_series(*series[b], cfg_);
    fill_patch_rows(*series[b], cfg_, flat.data() + b * P * cfg_.T * f);
  }
  ad::Value patches = ad::constant({B * P * cfg_.T, f}, std::move(flat));
  ad::Value pw = params_.get("patch_embed.weight");
  ad::Value pb = params_.get("patch_embed.bias");
  ad::Value tokens = ad::reshape(ad::linear(patches, pw, &pb), {B * P, cfg_.T, cfg_.d});

  BatchOutputs out;
  out.batch = B;
  TemporalResult temporal = temporal_forward(tokens, training, dropout_rng);
  out.z_t_dense = temporal.z_t_dense;
  out.z_t_seq = temporal.z_t_seq;
  out.attention_stack = std::move(temporal.attention_stack);

  SpatialResult spatial = spatial_forward(out.z_t_dense, training, dropout_rng);
  out.z_s_dense = spatial.z_s_dense;
  out.z_s_global = spatial.z_s_global;
  out.logits = classify_global(out.z_s_global);
  return out;
}

EncoderOutputs TSViT::forward(const Tensor& series, bool training, Rng* dropout_rng) const {
  const std::size_t K = cfg_.K, T = cfg_.T, heads = cfg_.heads;
  const std::size_t P = cfg_.positions();

  ad::Value tokens = patchify(series);  // [P, T, d]
  TemporalResult temporal = temporal_forward(tokens, training, dropout_rng);

  EncoderOutputs out;
  out.grid_h = cfg_.grid_h();
  out.grid_w = cfg_.grid_w();
  out.z_t_dense = temporal.z_t_dense;
  out.z_t_seq = temporal.z_t_seq;
  out.attention_stack = std::move(temporal.attention_stack);

  // Head-averaged class-to-temporal block of the last layer.
  const std::size_t S = K + T;
  out.t2c_raw = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(P * K * T));
  if (!out.attention_stack.empty()) {
    const Eigen::ArrayXd& last = out.attention_stack.back();
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t t = 0; t < T; ++t) {
          double acc = 0.0;
          for (std::size_t hh = 0; hh < heads; ++hh)
            acc += last[static_cast<Eigen::Index>(((p * heads + hh) * S + k) * S + (K + t))];
          out.t2c_raw[static_cast<Eigen::Index>((p * K + k) * T + t)] =
              acc / static_cast<double>(heads);
        }
  }

  SpatialResult spatial = spatial_forward(out.z_t_dense, training, dropout_rng);
  out.z_s_global = spatial.z_s_global;
  out.z_s_dense = spatial.z_s_dense;
  out.logits = classify_global(out.z_s_global);
  return out;
}

void save_named_tensors(const std::string& dir, const Config& meta,
                        const std::vector<std::pair<std::string, ad::Value>>& items) {
  fs::create_directories(dir);
  std::ostringstream manifest;
  manifest << "format_version 1\n";
  for (const auto& [k, v] : meta.entries()) manifest << "meta " << k << " " << v << "\n";
  std::size_t idx = 0;
  for (const auto& [name, value] : items) {
    char fname[32];
    std::snprintf(fname, sizeof(fname), "tensor_%04zu.stsr", idx++);
    Tensor t;
    t.dims = value.shape();
    t.data.assign(value.data().data(), value.data().data() + value.data().size());
    write_tensor_file((fs::path(dir) / fname).string(), t, DType::F64);
    manifest << "tensor " << name << " ";
    for (std::size_t i = 0; i < t.dims.size(); ++i) manifest << (i ? "x" : "") << t.dims[i];
    manifest << " " << fname << "\n";
  }
  std::ofstream out(fs::path(dir) / "manifest.txt", std::ios::binary);
  if (!out) throw FormatError("container: cannot write manifest in " + dir);
  out << manifest.str();
}

NamedTensors load_named_tensors(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.txt");
  if (!in) throw FormatError("container: missing manifest in " + dir);
  NamedTensors nt;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "format_version") {
      int v;
      ss >> v;
      if (v != 1) throw FormatError("container: unsupported format_version");
    } else if (tag == "meta") {
      std::string key, value;
      ss >> key >> value;
      nt.meta.set(key, value);
    } else if (tag == "tensor") {
      std::string name, dims, fname;
      if (!(ss >> name >> dims >> fname))
        throw FormatError("container: malformed tensor line " + std::to_string(lineno));
      Tensor t = read_float_tensor((fs::path(dir) / fname).string());
      // Shape recorded in the manifest must agree with the payload header.
      std::ostringstream want;
      for (std::size_t i = 0; i < t.dims.size(); ++i) want << (i ? "x" : "") << t.dims[i];
      if (want.str() != dims)
        throw FormatError("container: shape mismatch for tensor " + name);
      nt.tensors.emplace_back(name, std::move(t));
    } else {
      throw FormatError("container: unknown tag '" + tag + "'");
    }
  }
  return nt;
}

std::uint64_t named_tensors_hash(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.txt", std::ios::binary);
  if (!in) throw FormatError("container: missing manifest in " + dir);
  std::string manifest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::uint64_t h = fnv1a(manifest);
  std::istringstream ss(manifest);
  std::string line;
  while (std::getline(ss, line)) {
    std::istringstream ls(line);
    std::string tag, name, dims, fname;
    ls >> tag;
    if (tag != "tensor") continue;
    ls >> name >> dims >> fname;
    std::ifstream tf(fs::path(dir) / fname, std::ios::binary);
    if (!tf) throw FormatError("container: missing tensor file " + fname);
    std::string bytes((std::istreambuf_iterator<char>(tf)), std::istreambuf_iterator<char>());
    h = fnv1a(bytes.data(), bytes.size(), h);
  }
  return h;
}

void TSViT::save(const std::string& dir) const {
  Config meta;
  cfg_.to_config(meta);
  meta.set("container.kind", "tsvit_checkpoint");
  save_named_tensors(dir, meta, params_.items());
}

TSViT TSViT::load(const std::string& dir) {
  NamedTensors nt = load_named_tensors(dir);
  if (nt.meta.get_or("container.kind", "") != "tsvit_checkpoint")
    throw FormatError("checkpoint: " + dir + " is not a model checkpoint");
  ModelConfig cfg = ModelConfig::from_config(nt.meta);
  ad::ParamStore ps;
  for (auto& [name, t] : nt.tensors) {
    Eigen::ArrayXd a =
        Eigen::Map<const Eigen::ArrayXd>(t.data.data(), static_cast<Eigen::Index>(t.data.size()));
    ps.create(name, t.dims, std::move(a));
  }
  return TSViT(cfg, std::move(ps));
}

}  // namespace exact
