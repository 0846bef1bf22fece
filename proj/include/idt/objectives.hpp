#pragma once

// Image-formation recomposition and the training losses.
//
// All losses use mean reductions over pixels and channels so they are
// independent of resolution. Tape versions are differentiable; the Image
// versions evaluate the same tape code on constants.

#include "idt/image.hpp"
#include "idt/sg.hpp"
#include "idt/tensor.hpp"

#include <optional>
#include <string>
#include <vector>

namespace idt::objectives {

using nd::Tape;
using nd::Tensor;
using nd::Var;

struct LossConfig {
  double eps = 1e-4;
  double w_albedo = 1.0;
  double w_diffuse = 1.0;
  double w_specular = 1.0;
  double w_recon = 1.0;
  double w_illum = 0.1;

  void validate() const;
};

Var recompose(Var albedo, Var s_diff, Var s_spec);
Var loss_albedo(Var pred, Var gt);
// mean (log(pred+eps) - log(gt+eps))^2; rejects negative inputs.
Var loss_shading_log(Var pred, Var gt, double eps);
// Views stacked along the leading axis: equal to (1/V) sum_v mean_v |...|.
Var loss_recon(Var albedo, Var s_diff, Var s_spec, Var images);
// `pred_packed` is a packed SG vector whose axis entries may be any nonzero
// vectors; both sides are put in canonical order before comparison. Axis
// terms are 1 - cos, the remaining entries squared differences.
Var loss_illum(Var pred_packed, std::size_t lobes, const sg::SGMixture& gt);

struct Predictions {
  Var albedo;
  Var s_diff;
  Var s_spec;
  std::optional<Var> illumination;  // packed SG vector
  std::size_t lobes = 0;
};

// Missing layers drop their loss term.
struct Targets {
  std::optional<Tensor> albedo;
  std::optional<Tensor> s_diff;
  std::optional<Tensor> s_spec;
  std::optional<sg::SGMixture> illumination;
};

struct LossBreakdown {
  double total = 0.0;
  std::optional<double> albedo, diffuse, specular, recon, illum;
};

struct LossResult {
  Var total;
  LossBreakdown breakdown;
};

LossResult loss_total(Tape& tape, const Predictions& pred, const Targets& targets, Var images,
                      const LossConfig& config);

// "step,total,alb,diff,spec,recon,illum"; absent terms are empty fields.
std::string loss_log_header();
std::string format_loss_line(std::size_t step, const LossBreakdown& b);

// ---- value-level wrappers -------------------------------------------------

Image recompose(const Image& albedo, const Image& s_diff, const Image& s_spec);
double loss_albedo(const Image& pred, const Image& gt);
double loss_shading_log(const Image& pred, const Image& gt, double eps);
double loss_recon(const std::vector<Image>& albedo, const std::vector<Image>& s_diff,
                  const std::vector<Image>& s_spec, const std::vector<Image>& images);
double loss_illum(const sg::SGMixture& pred, const sg::SGMixture& gt);

}  // namespace idt::objectives
