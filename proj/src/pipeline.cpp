#include "idt/pipeline.hpp"

#include "idt/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

namespace idt::pipeline {

namespace fs = std::filesystem;
using nd::Tensor;
using nd::Var;

// ---- training -------------------------------------------------------------

TrainingSet load_training_set(const fs::path& dataset) {
  TrainingSet set;
  set.summary = scene::read_manifest(dataset);
  for (const auto& name : set.summary.scene_names) {
    set.scenes.push_back(scene::load_scene(dataset / name, set.summary.views));
  }
  return set;
}

StepPlan plan_step(std::uint64_t seed, std::uint64_t step, std::size_t scene_count,
                   std::size_t available_views, std::size_t batch_scenes, std::size_t views) {
  if (scene_count == 0) throw ConfigError("dataset has no scenes");
  if (views > available_views) {
    throw ConfigError("views per batch (" + std::to_string(views) + ") exceeds views per scene (" +
                      std::to_string(available_views) + ")");
  }
  std::mt19937_64 rng(scene::scene_seed(seed ^ 0x7472616e5f6f7264ULL, step));
  auto below = [&rng](std::size_t n) { return static_cast<std::size_t>(rng() % n); };
  StepPlan plan;
  for (std::size_t b = 0; b < batch_scenes; ++b) {
    StepPlan::Entry e;
    e.scene = below(scene_count);
    std::vector<std::size_t> all(available_views);
    for (std::size_t i = 0; i < available_views; ++i) all[i] = i;
    for (std::size_t i = 0; i < views; ++i) std::swap(all[i], all[i + below(available_views - i)]);
    e.views.assign(all.begin(), all.begin() + views);
    std::sort(e.views.begin(), e.views.end());
    plan.entries.push_back(std::move(e));
  }
  return plan;
}

namespace {

void require_finite(const std::optional<double>& v, const char* term) {
  if (v && !std::isfinite(*v)) {
    throw NumericError(std::string("non-finite loss term '") + term + "' = " +
                       metrics::format_metric(*v));
  }
}

template <typename F>
std::vector<Image> collect(const scene::MultiViewBatch& b, F field) {
  std::vector<Image> out;
  for (const auto& f : b.frames) out.push_back(field(f));
  return out;
}

}  // namespace

ObjectiveResult training_objective(const model::Model& m, const scene::MultiViewBatch& batch,
                                   const objectives::LossConfig& loss, double depth_weight,
                                   bool with_grad) {
  const auto& cfg = m.config;
  const std::size_t p = cfg.patch_size;
  nd::Tape tape;
  const model::Binding binding(tape, m.params, true);
  const auto images = collect(batch, [](const auto& f) { return f.image; });
  const model::ForwardResult fw = model::forward(binding, cfg, images);

  objectives::Predictions pred{fw.albedo, fw.s_diff, fw.s_spec, fw.illumination.packed, cfg.lobes};
  objectives::Targets targets;
  targets.albedo = model::to_patches(collect(batch, [](const auto& f) { return f.albedo; }), p);
  targets.s_diff = model::to_patches(collect(batch, [](const auto& f) { return f.s_diff; }), p);
  targets.s_spec = model::to_patches(collect(batch, [](const auto& f) { return f.s_spec; }), p);
  if (batch.illumination.lobes.size() == cfg.lobes) targets.illumination = batch.illumination;
  const Var image_var = tape.constant(model::to_patches(images, p));
  objectives::LossResult lr = objectives::loss_total(tape, pred, targets, image_var, loss);

  ObjectiveResult out;
  out.breakdown = lr.breakdown;
  require_finite(out.breakdown.albedo, "alb");
  require_finite(out.breakdown.diffuse, "diff");
  require_finite(out.breakdown.specular, "spec");
  require_finite(out.breakdown.recon, "recon");
  require_finite(out.breakdown.illum, "illum");

  Var total = lr.total;
  if (cfg.aux_depth && fw.log_depth) {
    const Tensor gt = model::to_patches(collect(batch, [](const auto& f) { return f.depth; }), p);
    std::vector<double> target(gt.size());
    std::vector<double> mask(gt.size());
    std::size_t hits = 0;
    const auto g = gt.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (std::isfinite(g[i]) && g[i] > 0.0) {
        target[i] = std::log(g[i]);
        mask[i] = 1.0;
        ++hits;
      }
    }
    if (hits > 0) {
      const Var diff = nd::abs(nd::sub(*fw.log_depth, tape.constant(Tensor(gt.shape(), std::move(target)))));
      const Var depth =
          nd::scale(nd::sum(nd::mul(diff, tape.constant(Tensor(gt.shape(), std::move(mask))))),
                    1.0 / static_cast<double>(hits));
      out.depth = depth.value().item();
      require_finite(out.depth, "depth");
      total = nd::add(total, nd::scale(depth, depth_weight));
    }
  }
  out.breakdown.total = total.value().item();
  require_finite(out.breakdown.total, "total");
  if (with_grad) out.grads = tape.grad(total, binding.vars());
  return out;
}

TrainerState fresh_state(const RunConfig& config) {
  TrainerState s;
  s.model = model::Model::init(config.model, config.seed);
  for (std::size_t i = 0; i < s.model.params.size(); ++i) {
    s.momentum.add(s.model.params.names()[i], Tensor::zeros(s.model.params.values()[i].shape()));
  }
  return s;
}

Checkpoint to_checkpoint(const TrainerState& state) {
  Checkpoint c;
  c.model = state.model;
  c.optimizer.add("step", Tensor::scalar(static_cast<double>(state.step)));
  for (std::size_t i = 0; i < state.momentum.size(); ++i) {
    c.optimizer.add("momentum." + state.momentum.names()[i], state.momentum.values()[i]);
  }
  return c;
}

TrainerState from_checkpoint(const Checkpoint& ckpt) {
  TrainerState s;
  s.model = ckpt.model;
  const auto& params = s.model.params;
  if (ckpt.optimizer.contains("step")) {
    const double step = ckpt.optimizer.get("step").item();
    if (!(step >= 0.0) || step != std::floor(step)) throw FormatError("checkpoint: bad optimizer step");
    s.step = static_cast<std::uint64_t>(step);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string key = "momentum." + params.names()[i];
    if (ckpt.optimizer.contains(key)) {
      const Tensor& t = ckpt.optimizer.get(key);
      if (t.shape() != params.values()[i].shape()) throw FormatError("checkpoint: momentum shape mismatch");
      s.momentum.add(params.names()[i], t);
    } else {
      s.momentum.add(params.names()[i], Tensor::zeros(params.values()[i].shape()));
    }
  }
  return s;
}

Trainer::Trainer(RunConfig config, const TrainingSet& data, TrainerState state)
    : config_(std::move(config)), data_(&data), state_(std::move(state)) {
  config_.optim.validate();
  if (data.scenes.empty()) throw ConfigError("training set is empty");
  const auto& f = data.scenes.front().frames.front().image;
  state_.model.config.validate_resolution(f.height, f.width);
}

double Trainer::learning_rate(std::uint64_t step) const {
  const auto& o = config_.optim;
  if (o.lr_decay == 1.0) return o.lr;
  return o.lr * std::pow(o.lr_decay, static_cast<double>(step) / static_cast<double>(o.steps));
}

StepReport Trainer::step() {
  const auto& o = config_.optim;
  const StepPlan plan = plan_step(config_.seed, state_.step, data_->scenes.size(),
                                  data_->summary.views, o.batch_scenes, o.views);
  auto& params = state_.model.params;
  std::vector<std::vector<double>> grad(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) grad[i].assign(params.values()[i].size(), 0.0);

  StepReport report;
  report.step = state_.step;
  const double inv_b = 1.0 / static_cast<double>(plan.entries.size());
  auto accumulate = [inv_b](std::optional<double>& acc, const std::optional<double>& v) {
    if (v) acc = acc.value_or(0.0) + *v * inv_b;
  };
  for (const auto& e : plan.entries) {
    const scene::MultiViewBatch& full = data_->scenes[e.scene];
    scene::MultiViewBatch batch;
    batch.illumination = full.illumination;
    for (std::size_t v : e.views) batch.frames.push_back(full.frames[v]);
    ObjectiveResult r = training_objective(state_.model, batch, config_.loss, config_.depth_weight, true);
    report.loss.total += r.breakdown.total * inv_b;
    accumulate(report.loss.albedo, r.breakdown.albedo);
    accumulate(report.loss.diffuse, r.breakdown.diffuse);
    accumulate(report.loss.specular, r.breakdown.specular);
    accumulate(report.loss.recon, r.breakdown.recon);
    accumulate(report.loss.illum, r.breakdown.illum);
    accumulate(report.depth, r.depth);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto g = r.grads[i].data();
      for (std::size_t j = 0; j < g.size(); ++j) grad[i][j] += g[j] * inv_b;
    }
  }

  double norm2 = 0.0;
  for (const auto& g : grad) {
    for (double x : g) norm2 += x * x;
  }
  if (!std::isfinite(norm2)) throw NumericError("non-finite gradient at step " + std::to_string(state_.step));
  double clip = 1.0;
  if (o.grad_clip > 0.0 && std::sqrt(norm2) > o.grad_clip) clip = o.grad_clip / std::sqrt(norm2);

  const double lr = learning_rate(state_.step);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& p = params.values()[i];
    const Tensor& m = state_.momentum.values()[i];
    std::vector<double> mv(m.data().begin(), m.data().end());
    std::vector<double> pv(p.data().begin(), p.data().end());
    for (std::size_t j = 0; j < pv.size(); ++j) {
      mv[j] = o.momentum * mv[j] + clip * grad[i][j];
      pv[j] -= lr * mv[j];
    }
    state_.momentum.set_value(i, Tensor(m.shape(), std::move(mv)));
    params.set_value(i, Tensor(p.shape(), std::move(pv)));
  }
  ++state_.step;
  return report;
}

TrainerState train(const RunConfig& config, const TrainingSet& data, TrainerState state,
                   const StepCallback& on_step) {
  Trainer t(config, data, std::move(state));
  while (!t.finished()) {
    const StepReport r = t.step();
    if (on_step) on_step(r, t.state());
  }
  return t.state();
}

// ---- evaluation -----------------------------------------------------------

const char* eval_mode_name(EvalMode mode) {
  switch (mode) {
    case EvalMode::kJoint: return "joint";
    case EvalMode::kPerView: return "per-view";
    case EvalMode::kOracle: return "oracle";
  }
  return "?";
}

model::IntrinsicSet predict_scene(const model::Model* m, const scene::MultiViewBatch& gt,
                                  EvalMode mode) {
  if (mode == EvalMode::kOracle) {
    model::IntrinsicSet s;
    for (const auto& f : gt.frames) {
      s.albedo.push_back(f.albedo);
      s.s_diff.push_back(f.s_diff);
      s.s_spec.push_back(f.s_spec);
      s.depth.push_back(f.depth);
    }
    s.illumination = gt.illumination;
    return s;
  }
  if (m == nullptr) throw ConfigError("a checkpoint is required unless --oracle is given");
  const auto images = collect(gt, [](const auto& f) { return f.image; });
  if (mode == EvalMode::kJoint) return model::decompose(*m, images);
  model::IntrinsicSet s;
  for (const auto& img : images) {
    model::IntrinsicSet one = model::decompose(*m, {img});
    s.albedo.push_back(std::move(one.albedo.front()));
    s.s_diff.push_back(std::move(one.s_diff.front()));
    s.s_spec.push_back(std::move(one.s_spec.front()));
    if (!one.depth.empty()) s.depth.push_back(std::move(one.depth.front()));
    if (s.illumination.lobes.empty()) s.illumination = one.illumination;
  }
  return s;
}

metrics::MetricReport mean_report(const std::vector<SceneReport>& scenes) {
  metrics::MetricReport out;
  if (scenes.empty()) return out;
  const std::size_t rows = scenes.front().report.rows.size();
  const double n = static_cast<double>(scenes.size());
  for (std::size_t r = 0; r < rows; ++r) {
    metrics::FactorRow row;
    row.factor = scenes.front().report.rows[r].factor;
    double cons = 0.0;
    std::size_t cons_n = 0;
    for (const auto& s : scenes) {
      const auto& x = s.report.rows[r];
      row.psnr += x.psnr / n;
      row.ssim += x.ssim / n;
      row.mae += x.mae / n;
      row.log_rmse += x.log_rmse / n;
      row.coverage += x.coverage / n;
      if (x.consistency) {
        cons += *x.consistency;
        ++cons_n;
      }
    }
    if (cons_n > 0) row.consistency = cons / static_cast<double>(cons_n);
    out.rows.push_back(std::move(row));
  }
  return out;
}

DatasetReport evaluate_dataset(const model::Model* m, const fs::path& dataset, EvalMode mode,
                               const metrics::EvalConfig& config) {
  const scene::DatasetSummary summary = scene::read_manifest(dataset);
  DatasetReport out;
  out.mode = mode;
  for (const auto& name : summary.scene_names) {
    const scene::MultiViewBatch gt = scene::load_scene(dataset / name, summary.views);
    const model::IntrinsicSet pred = predict_scene(m, gt, mode);
    out.scenes.push_back({name, metrics::evaluate_batch(pred, gt, config)});
  }
  out.mean = mean_report(out.scenes);
  return out;
}

std::string dataset_report_csv(const DatasetReport& report) {
  std::string out = metrics::report_csv_header();
  const std::string mode = eval_mode_name(report.mode);
  for (const auto& s : report.scenes) out += metrics::report_csv_rows(s.scene, mode, s.report);
  out += metrics::report_csv_rows("mean", mode, report.mean);
  return out;
}

std::string dataset_report_json(const DatasetReport& report) {
  using nlohmann::json;
  auto num = [](double v) -> json {
    if (std::isfinite(v)) return v;
    return metrics::format_metric(v);
  };
  auto rows = [&](const metrics::MetricReport& r) {
    json arr = json::array();
    for (const auto& x : r.rows) {
      arr.push_back({{"factor", x.factor},
                     {"psnr", num(x.psnr)},
                     {"ssim", num(x.ssim)},
                     {"mae", num(x.mae)},
                     {"log_rmse", num(x.log_rmse)},
                     {"consistency", x.consistency ? num(*x.consistency) : json("undefined")},
                     {"coverage", num(x.coverage)}});
    }
    return arr;
  };
  json j;
  j["mode"] = eval_mode_name(report.mode);
  j["color_space"] = "linear";
  j["scenes"] = json::array();
  for (const auto& s : report.scenes) j["scenes"].push_back({{"scene", s.scene}, {"rows", rows(s.report)}});
  j["mean"] = rows(report.mean);
  return j.dump(2) + "\n";
}

// ---- decomposition and relighting outputs ----------------------------------

std::vector<Image> load_views(const std::vector<fs::path>& paths) {
  if (paths.empty()) throw ConfigError("at least one input image is required");
  std::vector<Image> views;
  for (const auto& p : paths) {
    Image img = read_pfm(p);
    if (img.channels != 3) throw ConfigError("input image " + p.string() + " must have 3 channels");
    if (!views.empty() && !img.same_shape(views.front())) {
      throw ConfigError("input image " + p.string() + " differs in resolution from the first view");
    }
    views.push_back(std::move(img));
  }
  return views;
}

namespace {

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
}

fs::path view_file(const fs::path& dir, std::size_t v, const char* what) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "view_%02zu_%s.pfm", v, what);
  return dir / buf;
}

}  // namespace

std::vector<fs::path> write_decomposition(const model::IntrinsicSet& set, const std::vector<Image>& inputs,
                                          const fs::path& out_dir) {
  if (set.albedo.size() != inputs.size()) throw std::invalid_argument("view count mismatch");
  ensure_dir(out_dir);
  std::vector<fs::path> written;
  auto put = [&](const fs::path& p, const Image& img) {
    write_pfm(p, img);
    written.push_back(p);
  };
  for (std::size_t v = 0; v < inputs.size(); ++v) {
    const Image recomposed = objectives::recompose(set.albedo[v], set.s_diff[v], set.s_spec[v]);
    Image residual = recomposed;
    for (std::size_t i = 0; i < residual.data.size(); ++i) {
      residual.data[i] = std::abs(recomposed.data[i] - inputs[v].data[i]);
    }
    put(view_file(out_dir, v, "albedo"), set.albedo[v]);
    put(view_file(out_dir, v, "sdiff"), set.s_diff[v]);
    put(view_file(out_dir, v, "sspec"), set.s_spec[v]);
    put(view_file(out_dir, v, "recomposed"), recomposed);
    if (v < set.depth.size()) put(view_file(out_dir, v, "depth"), set.depth[v]);
    put(view_file(out_dir, v, "residual"), residual);
  }
  const fs::path sgm = out_dir / "sgm.txt";
  sg::write_sgm(sgm, set.illumination);
  written.push_back(sgm);
  return written;
}

sg::Vec3 mean_light_direction(const sg::SGMixture& mixture) {
  sg::Vec3 d = sg::Vec3::Zero();
  for (const auto& l : mixture.lobes) d += sg::luminance(l.amplitude) * l.axis;
  const double n = d.norm();
  if (!(n > 1e-12)) return sg::Vec3::UnitZ();
  return d / n;
}

sg::Vec3 mean_radiance(const sg::SGMixture& mixture) {
  constexpr std::size_t kN = 2048;
  const double golden = 3.0 - std::sqrt(5.0);  // turns per point, times pi
  sg::Vec3 acc = sg::Vec3::Zero();
  for (std::size_t i = 0; i < kN; ++i) {
    const double z = 1.0 - (2.0 * static_cast<double>(i) + 1.0) / static_cast<double>(kN);
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden * M_PI * static_cast<double>(i);
    sg::Vec3 w(r * std::cos(phi), r * std::sin(phi), z);
    w.normalize();
    acc += sg::sg_radiance(mixture, w);
  }
  return acc / static_cast<double>(kN);
}

namespace {

sg::Vec3 ratio(const sg::Vec3& num, const sg::Vec3& den) {
  sg::Vec3 r;
  for (int c = 0; c < 3; ++c) r[c] = den[c] == 0.0 ? 1.0 : num[c] / den[c];
  return r;
}

Image scaled(const Image& img, const sg::Vec3& k) {
  Image out = img;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= k[static_cast<int>(i % 3)];
  return out;
}

}  // namespace

RelightResult relight(const model::IntrinsicSet& d, const sg::SGMixture& new_light) {
  sg::validate(new_light);
  const sg::Vec3 n = mean_light_direction(d.illumination);
  RelightResult r;
  r.diffuse_ratio = ratio(sg::diffuse_irradiance(new_light, n), sg::diffuse_irradiance(d.illumination, n));
  r.specular_ratio = ratio(mean_radiance(new_light), mean_radiance(d.illumination));
  for (std::size_t v = 0; v < d.albedo.size(); ++v) {
    r.s_diff.push_back(scaled(d.s_diff[v], r.diffuse_ratio));
    r.s_spec.push_back(scaled(d.s_spec[v], r.specular_ratio));
    r.relit.push_back(objectives::recompose(d.albedo[v], r.s_diff.back(), r.s_spec.back()));
  }
  return r;
}

}  // namespace idt::pipeline
