#include "idt/objectives.hpp"

#include "idt/io.hpp"

#include <cmath>
#include <sstream>

namespace idt::objectives {

namespace {

Tensor image_tensor(const Image& img) {
  if (img.empty()) throw nd::ShapeError("empty image");
  return Tensor({img.pixels(), img.channels}, img.data);
}

Tensor stack(const std::vector<Image>& images) {
  if (images.empty()) throw nd::ShapeError("no views");
  std::vector<double> data;
  for (const auto& img : images) {
    if (!img.same_shape(images.front())) throw nd::ShapeError("views differ in shape");
    data.insert(data.end(), img.data.begin(), img.data.end());
  }
  return Tensor({images.size() * images.front().pixels(), images.front().channels}, std::move(data));
}

void require_nonnegative(Var v, const char* what) {
  for (double x : v.value().data()) {
    if (x < 0.0) throw std::invalid_argument(std::string(what) + " must be nonnegative");
  }
}

std::string opt(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

}  // namespace

void LossConfig::validate() const {
  if (!(eps > 0.0)) throw ConfigError("loss eps must be positive");
  for (double w : {w_albedo, w_diffuse, w_specular, w_recon, w_illum}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be nonnegative");
  }
}

Var recompose(Var albedo, Var s_diff, Var s_spec) {
  return nd::add(nd::mul(albedo, s_diff), s_spec);
}

Var loss_albedo(Var pred, Var gt) { return nd::mean(nd::abs(nd::sub(pred, gt))); }

Var loss_shading_log(Var pred, Var gt, double eps) {
  if (pred.shape() != gt.shape()) throw nd::ShapeError("loss_shading_log: shape mismatch");
  require_nonnegative(pred, "predicted shading");
  require_nonnegative(gt, "target shading");
  const Var lp = nd::log(nd::add_scalar(pred, eps));
  const Var lg = nd::log(nd::add_scalar(gt, eps));
  return nd::mean(nd::square(nd::sub(lp, lg)));
}

Var loss_recon(Var albedo, Var s_diff, Var s_spec, Var images) {
  if (albedo.shape() != images.shape()) throw nd::ShapeError("loss_recon: view count or shape mismatch");
  return nd::mean(nd::abs(nd::sub(recompose(albedo, s_diff, s_spec), images)));
}

Var loss_illum(Var pred_packed, std::size_t lobes, const sg::SGMixture& gt) {
  if (gt.lobes.size() != lobes) throw std::invalid_argument("loss_illum: lobe count mismatch");
  const std::size_t n = sg::packed_size(lobes);
  if (pred_packed.size() != n) throw nd::ShapeError("loss_illum: packed vector has the wrong length");
  Tape& tape = *pred_packed.tape;

  // Canonical order of the prediction, read from its current values.
  const auto raw = pred_packed.value().data();
  const sg::SGMixture unordered = sg::unpack(raw, lobes);
  std::vector<double> lum;
  std::vector<double> sharp;
  for (const auto& l : unordered.lobes) {
    lum.push_back(sg::luminance(l.amplitude));
    sharp.push_back(l.sharpness);
  }
  const auto order = sg::canonical_order(lum, sharp);
  std::vector<std::size_t> axis_idx;
  std::vector<std::size_t> rest_idx;
  for (std::size_t src : order) {
    for (std::size_t c = 0; c < 3; ++c) axis_idx.push_back(sg::kLobeParams * src + c);
    for (std::size_t j = 3; j < sg::kLobeParams; ++j) rest_idx.push_back(sg::kLobeParams * src + j);
  }
  for (std::size_t c = 0; c < 3; ++c) rest_idx.push_back(sg::kLobeParams * lobes + c);
  const std::size_t rest_n = rest_idx.size();

  const std::vector<double> target = sg::pack(sg::canonicalize(gt));
  std::vector<double> t_axes;
  std::vector<double> t_rest;
  for (std::size_t k = 0; k < lobes; ++k) {
    for (std::size_t c = 0; c < 3; ++c) t_axes.push_back(target[sg::kLobeParams * k + c]);
    for (std::size_t j = 3; j < sg::kLobeParams; ++j) t_rest.push_back(target[sg::kLobeParams * k + j]);
  }
  for (std::size_t c = 0; c < 3; ++c) t_rest.push_back(target[sg::kLobeParams * lobes + c]);

  const Var axes = nd::normalize_rows3(nd::gather(pred_packed, std::move(axis_idx), {lobes, 3}));
  const Var cosines = nd::sum(nd::mul(axes, tape.constant(Tensor({lobes, 3}, std::move(t_axes)))));
  const Var axis_term = nd::neg(nd::add_scalar(cosines, -static_cast<double>(lobes)));
  const Var rest = nd::gather(pred_packed, std::move(rest_idx), {rest_n});
  const Var rest_term =
      nd::sum(nd::square(nd::sub(rest, tape.constant(Tensor({rest_n}, std::move(t_rest))))));
  return nd::add(axis_term, rest_term);
}

LossResult loss_total(Tape& tape, const Predictions& pred, const Targets& targets, Var images,
                      const LossConfig& config) {
  config.validate();
  LossResult out;
  std::vector<std::pair<double, Var>> terms;
  auto record = [&](std::optional<double>& slot, double weight, Var term) {
    slot = term.value().item();
    terms.emplace_back(weight, term);
  };
  if (targets.albedo) {
    record(out.breakdown.albedo, config.w_albedo,
           loss_albedo(pred.albedo, tape.constant(*targets.albedo)));
  }
  if (targets.s_diff) {
    record(out.breakdown.diffuse, config.w_diffuse,
           loss_shading_log(pred.s_diff, tape.constant(*targets.s_diff), config.eps));
  }
  if (targets.s_spec) {
    record(out.breakdown.specular, config.w_specular,
           loss_shading_log(pred.s_spec, tape.constant(*targets.s_spec), config.eps));
  }
  record(out.breakdown.recon, config.w_recon, loss_recon(pred.albedo, pred.s_diff, pred.s_spec, images));
  if (targets.illumination && pred.illumination) {
    record(out.breakdown.illum, config.w_illum,
           loss_illum(*pred.illumination, pred.lobes, *targets.illumination));
  }
  Var total = nd::scale(terms.front().second, terms.front().first);
  for (std::size_t i = 1; i < terms.size(); ++i) {
    total = nd::add(total, nd::scale(terms[i].second, terms[i].first));
  }
  out.total = total;
  out.breakdown.total = total.value().item();
  return out;
}

std::string loss_log_header() { return "step,total,alb,diff,spec,recon,illum"; }

std::string format_loss_line(std::size_t step, const LossBreakdown& b) {
  std::ostringstream os;
  os << step << ',' << format_double(b.total) << ',' << opt(b.albedo) << ',' << opt(b.diffuse)
     << ',' << opt(b.specular) << ',' << opt(b.recon) << ',' << opt(b.illum);
  return os.str();
}

// ---- value-level wrappers -------------------------------------------------

Image recompose(const Image& albedo, const Image& s_diff, const Image& s_spec) {
  if (!albedo.same_shape(s_diff) || !albedo.same_shape(s_spec)) {
    throw nd::ShapeError("recompose: shape mismatch");
  }
  if (albedo.channels != 3) throw nd::ShapeError("recompose: expected 3 channels");
  Tape tape;
  const Var r = recompose(tape.constant(image_tensor(albedo)), tape.constant(image_tensor(s_diff)),
                          tape.constant(image_tensor(s_spec)));
  Image out = albedo;
  out.data = r.value().to_vector();
  return out;
}

double loss_albedo(const Image& pred, const Image& gt) {
  if (!pred.same_shape(gt)) throw nd::ShapeError("loss_albedo: shape mismatch");
  Tape tape;
  return loss_albedo(tape.constant(image_tensor(pred)), tape.constant(image_tensor(gt))).value().item();
}

double loss_shading_log(const Image& pred, const Image& gt, double eps) {
  if (!pred.same_shape(gt)) throw nd::ShapeError("loss_shading_log: shape mismatch");
  Tape tape;
  return loss_shading_log(tape.constant(image_tensor(pred)), tape.constant(image_tensor(gt)), eps)
      .value()
      .item();
}

double loss_recon(const std::vector<Image>& albedo, const std::vector<Image>& s_diff,
                  const std::vector<Image>& s_spec, const std::vector<Image>& images) {
  if (albedo.size() != images.size() || s_diff.size() != images.size() ||
      s_spec.size() != images.size()) {
    throw std::invalid_argument("loss_recon: view count mismatch");
  }
  Tape tape;
  return loss_recon(tape.constant(stack(albedo)), tape.constant(stack(s_diff)),
                    tape.constant(stack(s_spec)), tape.constant(stack(images)))
      .value()
      .item();
}

double loss_illum(const sg::SGMixture& pred, const sg::SGMixture& gt) {
  if (pred.lobes.size() != gt.lobes.size()) throw std::invalid_argument("loss_illum: lobe count mismatch");
  const auto packed = sg::pack(pred);
  Tape tape;
  const Var p = tape.constant(Tensor({packed.size()}, packed));
  return loss_illum(p, pred.lobes.size(), gt).value().item();
}

}  // namespace idt::objectives
