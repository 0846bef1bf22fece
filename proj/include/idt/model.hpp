#pragma once

// Multi-view intrinsic decomposition network.
//
//   images --patchify--> patch tokens (+ camera and register tokens per view)
//          --encode----> alternating frame-wise / global self-attention
//          --adapt-----> one cross-attention adapter per factor; queries are
//                        the view-averaged camera+register tokens, keys and
//                        values are the patch tokens of all views
//          --heads-----> albedo, diffuse and specular shading, SG illumination
//                        and auxiliary depth
//
// Every view is treated identically (no reference-view token), so permuting
// the input views permutes the per-view outputs and leaves the illumination
// unchanged. Dense heads work in "patch layout": one row per patch, holding
// the p*p*C pixel values of that patch in row-major HWC order.

#include "idt/image.hpp"
#include "idt/sg.hpp"
#include "idt/tensor.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace idt::model {

using nd::Tape;
using nd::Tensor;
using nd::Var;

struct ModelConfig {
  std::size_t patch_size = 8;
  std::size_t embed_dim = 64;
  std::size_t block_pairs = 4;
  std::size_t heads = 4;
  std::size_t registers = 4;
  std::size_t lobes = sg::kDefaultLobes;
  std::size_t mlp_ratio = 4;
  bool aux_depth = true;

  void validate() const;
  // Also checks that the patch size divides the resolution.
  void validate_resolution(std::size_t height, std::size_t width) const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Named parameter tensors in registration order.
class ParamStore {
 public:
  void add(const std::string& name, Tensor value);
  const Tensor& get(const std::string& name) const;
  void set(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Tensor>& values() const { return values_; }
  std::size_t index(const std::string& name) const;
  void set_value(std::size_t i, Tensor value);
  std::size_t scalar_count() const;

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    return a.names_ == b.names_ && a.values_ == b.values_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::map<std::string, std::size_t> index_;
};

struct Model {
  ModelConfig config;
  ParamStore params;

  static Model init(const ModelConfig& config, std::uint64_t seed);
};

// Parameters recorded on a tape, either as differentiable leaves or constants.
class Binding {
 public:
  Binding(Tape& tape, const ParamStore& params, bool trainable);
  Var operator[](const std::string& name) const;
  const std::vector<Var>& vars() const { return vars_; }
  Tape& tape() const { return *tape_; }

 private:
  Tape* tape_;
  const ParamStore* params_;
  std::vector<Var> vars_;
};

enum class Factor { kAlbedo, kDiffuse, kSpecular, kIllumination };
const char* factor_name(Factor k);

struct TokenSet {
  Var tokens;  // [views * per_view, d]
  std::size_t views = 0;
  std::size_t per_view = 0;  // 1 camera + R registers + patches
  std::size_t registers = 0;
  std::size_t patches = 0;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;

  std::size_t camera_row(std::size_t v) const { return v * per_view; }
  std::size_t register_row(std::size_t v, std::size_t r) const { return v * per_view + 1 + r; }
  std::size_t patch_row(std::size_t v, std::size_t p) const {
    return v * per_view + 1 + registers + p;
  }
  std::vector<std::size_t> patch_rows() const;
};

struct AdaptedContext {
  Factor factor = Factor::kAlbedo;
  Var context;  // [1 + R, d]
};

// ---- layout helpers -------------------------------------------------------

// [V*P, p*p*C] patch-layout tensor of a list of equally sized images.
Tensor to_patches(const std::vector<Image>& images, std::size_t patch);
// Inverse of to_patches.
std::vector<Image> from_patches(const Tensor& patches, std::size_t views, std::size_t height,
                                std::size_t width, std::size_t channels, std::size_t patch);
// Fixed 2D sinusoidal encoding, [grid_h * grid_w, d].
Tensor positional_encoding(std::size_t grid_h, std::size_t grid_w, std::size_t dim);

// ---- forward pieces -------------------------------------------------------

// Linear patch embedding plus positional encoding, [V*P, d].
Var patchify(const Binding& p, const ModelConfig& config, const std::vector<Image>& views);
TokenSet encode(const Binding& p, const ModelConfig& config, const std::vector<Image>& views);
AdaptedContext adapt(const Binding& p, const ModelConfig& config, const TokenSet& tokens,
                     Factor factor);
// [V*P, p*p*3] in [0,1].
Var predict_albedo(const Binding& p, const ModelConfig& config, const TokenSet& tokens,
                   const AdaptedContext& ctx);
// `illumination` is a packed SG vector (see predict_illumination). [V*P, p*p*3], >= 0.
Var predict_shading(const Binding& p, const ModelConfig& config, const TokenSet& tokens,
                    const AdaptedContext& ctx, Var illumination, Factor kind);

struct IlluminationOutput {
  // Canonically ordered packed vector [7K+3]: unit axes, raw (pre-softplus)
  // sharpness, amplitudes and ambient. unpack() of its value is `mixture`.
  Var packed;
  sg::SGMixture mixture;
};
IlluminationOutput predict_illumination(const Binding& p, const ModelConfig& config,
                                        const TokenSet& tokens, const AdaptedContext& ctx);

// Log depth [V*P, p*p]; depth is its exponential. Throws if aux_depth is off.
Var predict_log_depth(const Binding& p, const ModelConfig& config, const TokenSet& tokens);

struct ForwardResult {
  TokenSet tokens;
  AdaptedContext ctx_albedo, ctx_diffuse, ctx_specular, ctx_illumination;
  Var albedo, s_diff, s_spec;
  IlluminationOutput illumination;
  std::optional<Var> log_depth;
};

// Full single-pass forward on a tape.
ForwardResult forward(const Binding& p, const ModelConfig& config,
                      const std::vector<Image>& views);

struct IntrinsicSet {
  std::vector<Image> albedo;
  std::vector<Image> s_diff;
  std::vector<Image> s_spec;
  sg::SGMixture illumination;
  std::vector<Image> depth;  // empty when aux_depth is off
};

IntrinsicSet decompose(const Model& model, const std::vector<Image>& views);

// Names of parameters read by each component, for audits.
std::vector<std::string> parameter_names_with_prefix(const ParamStore& params,
                                                     const std::string& prefix);

}  // namespace idt::model
