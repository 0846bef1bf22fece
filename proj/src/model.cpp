#include "idt/model.hpp"

#include "idt/io.hpp"

#include <cmath>
#include <random>

namespace idt::model {

namespace {

constexpr double kPi = 3.14159265358979323846;

class Normal {
 public:
  explicit Normal(std::uint64_t seed) : rng_(seed) {}
  double operator()() {
    // Box-Muller on 53-bit uniforms.
    const double u1 = (static_cast<double>(rng_() >> 11) + 0.5) * 0x1.0p-53;
    const double u2 = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

 private:
  std::mt19937_64 rng_;
};

Tensor random_tensor(Normal& rng, nd::Shape shape, double stddev) {
  std::vector<double> v(nd::shape_size(shape));
  for (auto& x : v) x = stddev * rng();
  return Tensor(std::move(shape), std::move(v));
}

void add_linear(ParamStore& ps, Normal& rng, const std::string& prefix, std::size_t in,
                std::size_t out, double gain = 1.0) {
  ps.add(prefix + ".w", random_tensor(rng, {in, out}, gain / std::sqrt(static_cast<double>(in))));
  ps.add(prefix + ".b", Tensor::zeros({out}));
}

void add_norm(ParamStore& ps, const std::string& prefix, std::size_t d) {
  ps.add(prefix + ".gain", Tensor::filled({d}, 1.0));
  ps.add(prefix + ".bias", Tensor::zeros({d}));
}

void add_attention(ParamStore& ps, Normal& rng, const std::string& prefix, std::size_t d,
                   double out_gain) {
  add_linear(ps, rng, prefix + ".q", d, d);
  add_linear(ps, rng, prefix + ".k", d, d);
  add_linear(ps, rng, prefix + ".v", d, d);
  add_linear(ps, rng, prefix + ".o", d, d, out_gain);
}

void add_mlp(ParamStore& ps, Normal& rng, const std::string& prefix, std::size_t d,
             std::size_t hidden, double out_gain) {
  add_linear(ps, rng, prefix + ".fc1", d, hidden);
  add_linear(ps, rng, prefix + ".fc2", hidden, d, out_gain);
}

const char* adapter_key(Factor k) {
  switch (k) {
    case Factor::kAlbedo: return "alb";
    case Factor::kDiffuse: return "diff";
    case Factor::kSpecular: return "spec";
    case Factor::kIllumination: return "illum";
  }
  return "?";
}

Var dense(const Binding& p, const std::string& prefix, Var x) {
  return nd::linear(x, p[prefix + ".w"], p[prefix + ".b"]);
}

Var norm(const Binding& p, const std::string& prefix, Var x) {
  return nd::layer_norm(x, p[prefix + ".gain"], p[prefix + ".bias"]);
}

Var mlp(const Binding& p, const std::string& prefix, Var x) {
  return dense(p, prefix + ".fc2", nd::gelu(dense(p, prefix + ".fc1", x)));
}

// Pre-norm self-attention + MLP residual block.
Var encoder_block(const Binding& p, const std::string& prefix, std::size_t heads, Var x,
                  std::span<const nd::AttentionSegment> segments) {
  const Var h = norm(p, prefix + ".norm1", x);
  const Var q = dense(p, prefix + ".attn.q", h);
  const Var k = dense(p, prefix + ".attn.k", h);
  const Var v = dense(p, prefix + ".attn.v", h);
  const Var a = nd::multi_head_attention(q, k, v, heads, segments);
  x = nd::add(x, dense(p, prefix + ".attn.o", a));
  return nd::add(x, mlp(p, prefix + ".mlp", norm(p, prefix + ".norm2", x)));
}

// Shared decoder: modulate normalised patch tokens by a broadcast vector,
// then decode each patch linearly.
Var decode_patches(const Binding& p, const std::string& prefix, const TokenSet& tokens,
                   Var modulation) {
  const auto rows = tokens.patch_rows();
  const Var patches = nd::gather_rows(tokens.tokens, rows);
  const Var h = nd::gelu(nd::add_row(norm(p, prefix + ".norm", patches), modulation));
  return dense(p, prefix + ".out", h);
}

Var context_modulation(const Binding& p, const std::string& prefix, const AdaptedContext& ctx) {
  return dense(p, prefix + ".ctx", nd::mean_rows(ctx.context));
}

}  // namespace

// ---- config ---------------------------------------------------------------

void ModelConfig::validate() const {
  if (patch_size == 0) throw ConfigError("patch_size must be positive");
  if (embed_dim == 0 || embed_dim % 4 != 0) {
    throw ConfigError("embed_dim must be a positive multiple of 4");
  }
  if (heads == 0 || embed_dim % heads != 0) throw ConfigError("embed_dim must be divisible by heads");
  if (block_pairs == 0) throw ConfigError("block_pairs must be positive");
  if (registers == 0) throw ConfigError("register_count must be positive");
  if (lobes == 0) throw ConfigError("sg_lobes must be positive");
  if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be positive");
}

void ModelConfig::validate_resolution(std::size_t height, std::size_t width) const {
  validate();
  if (height == 0 || width == 0 || height % patch_size != 0 || width % patch_size != 0) {
    throw ConfigError("resolution " + std::to_string(width) + "x" + std::to_string(height) +
                      " is not divisible by patch size " + std::to_string(patch_size));
  }
}

// ---- parameters -----------------------------------------------------------

void ParamStore::add(const std::string& name, Tensor value) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
  index_.emplace(name, names_.size());
  names_.push_back(name);
  values_.push_back(std::move(value));
}

std::size_t ParamStore::index(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const { return values_[index(name)]; }

void ParamStore::set(const std::string& name, Tensor value) { set_value(index(name), std::move(value)); }

void ParamStore::set_value(std::size_t i, Tensor value) {
  if (value.shape() != values_.at(i).shape()) {
    throw nd::ShapeError("parameter " + names_[i] + " shape change " +
                         nd::shape_str(values_[i].shape()) + " -> " + nd::shape_str(value.shape()));
  }
  values_[i] = std::move(value);
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

Model Model::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config = config;
  Normal rng(seed);
  auto& ps = m.params;
  const std::size_t d = config.embed_dim;
  const std::size_t p = config.patch_size;
  const std::size_t hidden = d * config.mlp_ratio;
  const std::size_t packed = sg::packed_size(config.lobes);
  const double residual_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(config.block_pairs));

  add_linear(ps, rng, "patch_embed", p * p * 3, d);
  ps.add("camera_token", random_tensor(rng, {1, d}, 0.5));
  ps.add("register_tokens", random_tensor(rng, {config.registers, d}, 0.5));
  for (std::size_t i = 0; i < config.block_pairs; ++i) {
    for (const char* kind : {"frame", "global"}) {
      const std::string prefix = std::string("encoder.") + kind + "." + std::to_string(i);
      add_norm(ps, prefix + ".norm1", d);
      add_attention(ps, rng, prefix + ".attn", d, residual_gain);
      add_norm(ps, prefix + ".norm2", d);
      add_mlp(ps, rng, prefix + ".mlp", d, hidden, residual_gain);
    }
  }
  add_norm(ps, "encoder.norm", d);

  for (Factor k : {Factor::kAlbedo, Factor::kDiffuse, Factor::kSpecular, Factor::kIllumination}) {
    const std::string prefix = std::string("adapter.") + adapter_key(k);
    add_norm(ps, prefix + ".norm_q", d);
    add_norm(ps, prefix + ".norm_kv", d);
    add_attention(ps, rng, prefix + ".attn", d, 1.0);
    add_norm(ps, prefix + ".norm2", d);
    add_mlp(ps, rng, prefix + ".mlp", d, hidden, 1.0);
  }

  // Output biases start at typical values of each factor.
  auto add_head = [&](const std::string& prefix, bool lit, double out_bias) {
    add_linear(ps, rng, prefix + ".ctx", d, d);
    if (lit) add_linear(ps, rng, prefix + ".illum", packed, d);
    add_norm(ps, prefix + ".norm", d);
    add_linear(ps, rng, prefix + ".out", d, p * p * 3, 0.5);
    ps.set(prefix + ".out.b", Tensor::filled({p * p * 3}, out_bias));
  };
  add_head("head.alb", false, 0.0);
  add_head("head.diff", true, sg::positive_map_inverse(0.5));
  add_head("head.spec", true, sg::positive_map_inverse(0.05));

  add_linear(ps, rng, "head.illum.out", d, packed, 0.1);
  {
    std::vector<double> bias(packed, 0.0);
    for (std::size_t k = 0; k < config.lobes; ++k) {
      double* l = bias.data() + sg::kLobeParams * k;
      l[1] = 1.0;  // axis toward +y
      l[3] = sg::positive_map_inverse(6.0);
      for (int c = 0; c < 3; ++c) l[4 + c] = sg::positive_map_inverse(0.5);
    }
    for (int c = 0; c < 3; ++c) bias[sg::kLobeParams * config.lobes + c] = sg::positive_map_inverse(0.1);
    ps.set("head.illum.out.b", Tensor({packed}, std::move(bias)));
  }

  if (config.aux_depth) {
    add_linear(ps, rng, "head.depth.out", d, p * p, 0.1);
    ps.set("head.depth.out.b", Tensor::filled({p * p}, std::log(4.5)));
  }
  return m;
}

Binding::Binding(Tape& tape, const ParamStore& params, bool trainable)
    : tape_(&tape), params_(&params) {
  vars_.reserve(params.size());
  for (const auto& v : params.values()) {
    vars_.push_back(trainable ? tape.leaf(v) : tape.constant(v));
  }
}

Var Binding::operator[](const std::string& name) const { return vars_[params_->index(name)]; }

const char* factor_name(Factor k) {
  switch (k) {
    case Factor::kAlbedo: return "albedo";
    case Factor::kDiffuse: return "diffuse";
    case Factor::kSpecular: return "specular";
    case Factor::kIllumination: return "illumination";
  }
  return "?";
}

std::vector<std::size_t> TokenSet::patch_rows() const {
  std::vector<std::size_t> rows;
  rows.reserve(views * patches);
  for (std::size_t v = 0; v < views; ++v) {
    for (std::size_t p = 0; p < patches; ++p) rows.push_back(patch_row(v, p));
  }
  return rows;
}

// ---- layout helpers -------------------------------------------------------

Tensor to_patches(const std::vector<Image>& images, std::size_t patch) {
  if (images.empty()) throw ConfigError("no input views");
  const Image& first = images.front();
  const std::size_t gh = first.height / patch;
  const std::size_t gw = first.width / patch;
  const std::size_t c = first.channels;
  if (gh * patch != first.height || gw * patch != first.width) {
    throw ConfigError("image size is not divisible by the patch size");
  }
  const std::size_t cols = patch * patch * c;
  std::vector<double> out(images.size() * gh * gw * cols);
  std::size_t row = 0;
  for (const Image& img : images) {
    if (!img.same_shape(first)) throw ConfigError("all views must share one resolution");
    for (std::size_t gy = 0; gy < gh; ++gy) {
      for (std::size_t gx = 0; gx < gw; ++gx, ++row) {
        double* dst = out.data() + row * cols;
        for (std::size_t py = 0; py < patch; ++py) {
          const double* src = &img.data[((gy * patch + py) * img.width + gx * patch) * c];
          std::copy_n(src, patch * c, dst + py * patch * c);
        }
      }
    }
  }
  return Tensor({images.size() * gh * gw, cols}, std::move(out));
}

std::vector<Image> from_patches(const Tensor& patches, std::size_t views, std::size_t height,
                                std::size_t width, std::size_t channels, std::size_t patch) {
  const std::size_t gh = height / patch;
  const std::size_t gw = width / patch;
  const std::size_t cols = patch * patch * channels;
  if (patches.rank() != 2 || patches.dim(0) != views * gh * gw || patches.dim(1) != cols) {
    throw nd::ShapeError("from_patches: unexpected shape " + nd::shape_str(patches.shape()));
  }
  std::vector<Image> out(views, Image(height, width, channels));
  std::size_t row = 0;
  for (auto& img : out) {
    for (std::size_t gy = 0; gy < gh; ++gy) {
      for (std::size_t gx = 0; gx < gw; ++gx, ++row) {
        const double* src = patches.ptr() + row * cols;
        for (std::size_t py = 0; py < patch; ++py) {
          std::copy_n(src + py * patch * channels, patch * channels,
                      &img.data[((gy * patch + py) * width + gx * patch) * channels]);
        }
      }
    }
  }
  return out;
}

Tensor positional_encoding(std::size_t grid_h, std::size_t grid_w, std::size_t dim) {
  const std::size_t half = dim / 2;
  const std::size_t pairs = half / 2;
  std::vector<double> out(grid_h * grid_w * dim, 0.0);
  for (std::size_t gy = 0; gy < grid_h; ++gy) {
    for (std::size_t gx = 0; gx < grid_w; ++gx) {
      double* row = out.data() + (gy * grid_w + gx) * dim;
      for (std::size_t i = 0; i < pairs; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(pairs));
        row[2 * i] = std::sin(static_cast<double>(gy) * freq);
        row[2 * i + 1] = std::cos(static_cast<double>(gy) * freq);
        row[half + 2 * i] = std::sin(static_cast<double>(gx) * freq);
        row[half + 2 * i + 1] = std::cos(static_cast<double>(gx) * freq);
      }
    }
  }
  return Tensor({grid_h * grid_w, dim}, std::move(out));
}

// ---- forward pieces -------------------------------------------------------

Var patchify(const Binding& p, const ModelConfig& config, const std::vector<Image>& views) {
  if (views.empty()) throw ConfigError("no input views");
  config.validate_resolution(views.front().height, views.front().width);
  if (views.front().channels != 3) throw ConfigError("input images must have 3 channels");
  Tape& tape = p.tape();
  const Var pixels = tape.constant(to_patches(views, config.patch_size));
  const std::size_t gh = views.front().height / config.patch_size;
  const std::size_t gw = views.front().width / config.patch_size;
  const Tensor pos = positional_encoding(gh, gw, config.embed_dim);
  std::vector<double> tiled;
  tiled.reserve(views.size() * pos.size());
  for (std::size_t v = 0; v < views.size(); ++v) tiled.insert(tiled.end(), pos.data().begin(), pos.data().end());
  const Var pos_all = tape.constant(Tensor({views.size() * gh * gw, config.embed_dim}, std::move(tiled)));
  return nd::add(dense(p, "patch_embed", pixels), pos_all);
}

TokenSet encode(const Binding& p, const ModelConfig& config, const std::vector<Image>& views) {
  const Var emb = patchify(p, config, views);
  TokenSet ts;
  ts.views = views.size();
  ts.grid_h = views.front().height / config.patch_size;
  ts.grid_w = views.front().width / config.patch_size;
  ts.patches = ts.grid_h * ts.grid_w;
  ts.registers = config.registers;
  ts.per_view = 1 + config.registers + ts.patches;

  std::vector<Var> parts;
  std::vector<std::size_t> rows(ts.patches);
  for (std::size_t v = 0; v < ts.views; ++v) {
    for (std::size_t i = 0; i < ts.patches; ++i) rows[i] = v * ts.patches + i;
    parts.push_back(p["camera_token"]);
    parts.push_back(p["register_tokens"]);
    parts.push_back(nd::gather_rows(emb, rows));
  }
  Var x = nd::concat_rows(parts);

  std::vector<nd::AttentionSegment> frame;
  for (std::size_t v = 0; v < ts.views; ++v) {
    frame.push_back({v * ts.per_view, (v + 1) * ts.per_view, v * ts.per_view, (v + 1) * ts.per_view});
  }
  const std::size_t n = ts.views * ts.per_view;
  const std::vector<nd::AttentionSegment> global{{0, n, 0, n}};
  for (std::size_t i = 0; i < config.block_pairs; ++i) {
    x = encoder_block(p, "encoder.frame." + std::to_string(i), config.heads, x, frame);
    x = encoder_block(p, "encoder.global." + std::to_string(i), config.heads, x, global);
  }
  ts.tokens = norm(p, "encoder.norm", x);
  return ts;
}

AdaptedContext adapt(const Binding& p, const ModelConfig& config, const TokenSet& tokens,
                     Factor factor) {
  const std::string prefix = std::string("adapter.") + adapter_key(factor);
  Tape& tape = p.tape();
  const std::size_t nq = 1 + tokens.registers;
  const std::size_t n = tokens.views * tokens.per_view;
  // Queries: camera and register tokens averaged over views.
  std::vector<double> pool(nq * n, 0.0);
  const double w = 1.0 / static_cast<double>(tokens.views);
  for (std::size_t j = 0; j < nq; ++j) {
    for (std::size_t v = 0; v < tokens.views; ++v) pool[j * n + tokens.camera_row(v) + j] = w;
  }
  const Var queries = nd::matmul(tape.constant(Tensor({nq, n}, std::move(pool))), tokens.tokens);
  const auto rows = tokens.patch_rows();
  const Var keys = nd::gather_rows(tokens.tokens, rows);

  const Var hq = norm(p, prefix + ".norm_q", queries);
  const Var hk = norm(p, prefix + ".norm_kv", keys);
  const Var q = dense(p, prefix + ".attn.q", hq);
  const Var k = dense(p, prefix + ".attn.k", hk);
  const Var v = dense(p, prefix + ".attn.v", hk);
  const nd::AttentionSegment all{0, nq, 0, rows.size()};
  const Var a = nd::multi_head_attention(q, k, v, config.heads, std::span(&all, 1));
  Var ctx = nd::add(queries, dense(p, prefix + ".attn.o", a));
  ctx = nd::add(ctx, mlp(p, prefix + ".mlp", norm(p, prefix + ".norm2", ctx)));
  return AdaptedContext{factor, ctx};
}

Var predict_albedo(const Binding& p, const ModelConfig& /*config*/, const TokenSet& tokens,
                   const AdaptedContext& ctx) {
  if (ctx.factor != Factor::kAlbedo) throw std::invalid_argument("albedo head needs the albedo context");
  const Var m = context_modulation(p, "head.alb", ctx);
  return nd::sigmoid(decode_patches(p, "head.alb", tokens, m));
}

Var predict_shading(const Binding& p, const ModelConfig& config, const TokenSet& tokens,
                    const AdaptedContext& ctx, Var illumination, Factor kind) {
  if (kind != Factor::kDiffuse && kind != Factor::kSpecular) {
    throw std::invalid_argument("shading kind must be diffuse or specular");
  }
  if (ctx.factor != kind) throw std::invalid_argument("shading head received a mismatched context");
  if (illumination.size() != sg::packed_size(config.lobes)) {
    throw nd::ShapeError("shading head: illumination vector has the wrong length");
  }
  const std::string prefix = kind == Factor::kDiffuse ? "head.diff" : "head.spec";
  const Var lit = dense(p, prefix + ".illum", nd::reshape(illumination, {1, illumination.size()}));
  const Var m = nd::add(context_modulation(p, prefix, ctx), lit);
  return nd::softplus(decode_patches(p, prefix, tokens, m));
}

IlluminationOutput predict_illumination(const Binding& p, const ModelConfig& config,
                                        const TokenSet& /*tokens*/, const AdaptedContext& ctx) {
  if (ctx.factor != Factor::kIllumination) {
    throw std::invalid_argument("illumination head needs the illumination context");
  }
  const std::size_t lobes = config.lobes;
  const std::size_t packed = sg::packed_size(lobes);
  const Var raw = nd::reshape(dense(p, "head.illum.out", nd::mean_rows(ctx.context)), {packed});

  std::vector<std::size_t> axis_idx;
  for (std::size_t k = 0; k < lobes; ++k) {
    for (std::size_t c = 0; c < 3; ++c) axis_idx.push_back(sg::kLobeParams * k + c);
  }
  const Var axes = nd::normalize_rows3(nd::gather(raw, axis_idx, {lobes, 3}));
  // combined = [unit axes (3K) | raw (7K+3)]
  const Var flat_axes = nd::reshape(axes, {3 * lobes, 1});
  const Var flat_raw = nd::reshape(raw, {packed, 1});
  const std::vector<Var> pieces{flat_axes, flat_raw};
  const Var combined = nd::concat_rows(pieces);

  const sg::SGMixture unordered = sg::unpack(raw.value().data(), lobes);
  std::vector<double> lum;
  std::vector<double> sharp;
  for (const auto& l : unordered.lobes) {
    lum.push_back(sg::luminance(l.amplitude));
    sharp.push_back(l.sharpness);
  }
  const auto order = sg::canonical_order(lum, sharp);
  const std::size_t off = 3 * lobes;
  std::vector<std::size_t> idx;
  idx.reserve(packed);
  for (std::size_t src : order) {
    for (std::size_t c = 0; c < 3; ++c) idx.push_back(3 * src + c);
    for (std::size_t j = 3; j < sg::kLobeParams; ++j) idx.push_back(off + sg::kLobeParams * src + j);
  }
  for (std::size_t c = 0; c < 3; ++c) idx.push_back(off + sg::kLobeParams * lobes + c);

  IlluminationOutput out;
  out.packed = nd::gather(combined, std::move(idx), {packed});
  out.mixture = sg::unpack(out.packed.value().data(), lobes);
  return out;
}

Var predict_log_depth(const Binding& p, const ModelConfig& config, const TokenSet& tokens) {
  if (!config.aux_depth) throw ConfigError("depth head requested with aux_depth disabled");
  const auto rows = tokens.patch_rows();
  return dense(p, "head.depth.out", nd::gather_rows(tokens.tokens, rows));
}

ForwardResult forward(const Binding& p, const ModelConfig& config, const std::vector<Image>& views) {
  ForwardResult r;
  r.tokens = encode(p, config, views);
  r.ctx_albedo = adapt(p, config, r.tokens, Factor::kAlbedo);
  r.ctx_diffuse = adapt(p, config, r.tokens, Factor::kDiffuse);
  r.ctx_specular = adapt(p, config, r.tokens, Factor::kSpecular);
  r.ctx_illumination = adapt(p, config, r.tokens, Factor::kIllumination);
  r.illumination = predict_illumination(p, config, r.tokens, r.ctx_illumination);
  r.albedo = predict_albedo(p, config, r.tokens, r.ctx_albedo);
  r.s_diff = predict_shading(p, config, r.tokens, r.ctx_diffuse, r.illumination.packed, Factor::kDiffuse);
  r.s_spec = predict_shading(p, config, r.tokens, r.ctx_specular, r.illumination.packed, Factor::kSpecular);
  if (config.aux_depth) r.log_depth = predict_log_depth(p, config, r.tokens);
  return r;
}

IntrinsicSet decompose(const Model& model, const std::vector<Image>& views) {
  Tape tape;
  const Binding binding(tape, model.params, false);
  const ForwardResult r = forward(binding, model.config, views);
  const std::size_t h = views.front().height;
  const std::size_t w = views.front().width;
  const std::size_t p = model.config.patch_size;
  IntrinsicSet out;
  out.albedo = from_patches(r.albedo.value(), views.size(), h, w, 3, p);
  out.s_diff = from_patches(r.s_diff.value(), views.size(), h, w, 3, p);
  out.s_spec = from_patches(r.s_spec.value(), views.size(), h, w, 3, p);
  out.illumination = r.illumination.mixture;
  if (r.log_depth) {
    std::vector<double> d = r.log_depth->value().to_vector();
    for (auto& x : d) x = std::exp(x);
    out.depth = from_patches(Tensor(r.log_depth->shape(), std::move(d)), views.size(), h, w, 1, p);
  }
  return out;
}

std::vector<std::string> parameter_names_with_prefix(const ParamStore& params,
                                                     const std::string& prefix) {
  std::vector<std::string> out;
  for (const auto& n : params.names()) {
    if (n.rfind(prefix, 0) == 0) out.push_back(n);
  }
  return out;
}

}  // namespace idt::model
