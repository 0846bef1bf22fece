#include "idt/metrics.hpp"

#include "idt/io.hpp"
#include "idt/objectives.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace idt::metrics {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void require_same(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b)) throw std::invalid_argument(std::string(what) + ": shape mismatch");
  if (a.empty()) throw std::invalid_argument(std::string(what) + ": empty image");
}

double mse(const Image& a, const Image& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

Image log_map(const Image& img, double eps, const char* what) {
  Image out = img;
  for (auto& v : out.data) {
    if (v < 0.0) throw std::invalid_argument(std::string(what) + ": negative input");
    v = std::log(v + eps);
  }
  return out;
}

std::vector<double> gaussian_window() {
  std::vector<double> w(kSsimWindow);
  const double c = static_cast<double>(kSsimWindow / 2);
  double s = 0.0;
  for (std::size_t i = 0; i < kSsimWindow; ++i) {
    const double x = static_cast<double>(i) - c;
    w[i] = std::exp(-x * x / (2.0 * kSsimSigma * kSsimSigma));
    s += w[i];
  }
  for (auto& v : w) v /= s;
  return w;
}

// Valid-region separable filter of one channel.
std::vector<double> filter_valid(const std::vector<double>& src, std::size_t h, std::size_t w,
                                 const std::vector<double>& k) {
  const std::size_t n = k.size();
  const std::size_t ow = w - n + 1;
  const std::size_t oh = h - n + 1;
  std::vector<double> tmp(h * ow, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += k[i] * src[y * w + x + i];
      tmp[y * ow + x] = s;
    }
  }
  std::vector<double> out(oh * ow, 0.0);
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += k[i] * tmp[(y + i) * ow + x];
      out[y * ow + x] = s;
    }
  }
  return out;
}

double snap(double v) {
  const double r = std::round(v);
  return std::abs(v - r) < 1e-9 ? r : v;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

double psnr(const Image& a, const Image& b, double peak) {
  require_same(a, b, "psnr");
  if (!(peak > 0.0)) throw std::invalid_argument("psnr: peak must be positive");
  const double m = mse(a, b);
  if (m == 0.0) return kInf;
  return 10.0 * std::log10(peak * peak / m);
}

double ssim(const Image& a, const Image& b) {
  require_same(a, b, "ssim");
  if (a.height < kSsimWindow || a.width < kSsimWindow) {
    throw std::invalid_argument("ssim: image smaller than the 11x11 window");
  }
  const auto k = gaussian_window();
  const double c1 = (kSsimK1 * 1.0) * (kSsimK1 * 1.0);
  const double c2 = (kSsimK2 * 1.0) * (kSsimK2 * 1.0);
  const std::size_t n = a.pixels();
  double total = 0.0;
  for (std::size_t c = 0; c < a.channels; ++c) {
    std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = a.data[i * a.channels + c];
      y[i] = b.data[i * a.channels + c];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, a.height, a.width, k);
    const auto my = filter_valid(y, a.height, a.width, k);
    const auto mxx = filter_valid(xx, a.height, a.width, k);
    const auto myy = filter_valid(yy, a.height, a.width, k);
    const auto mxy = filter_valid(xy, a.height, a.width, k);
    double s = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = mxx[i] - mx[i] * mx[i];
      const double vy = myy[i] - my[i] * my[i];
      const double cov = mxy[i] - mx[i] * my[i];
      const double num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2);
      const double den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
      s += num / den;
    }
    total += s / static_cast<double>(mx.size());
  }
  return total / static_cast<double>(a.channels);
}

double mae(const Image& a, const Image& b) {
  require_same(a, b, "mae");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a.data[i] - b.data[i]);
  return s / static_cast<double>(a.size());
}

double log_rmse(const Image& pred, const Image& gt, double eps) {
  require_same(pred, gt, "log_rmse");
  return std::sqrt(mse(log_map(pred, eps, "log_rmse"), log_map(gt, eps, "log_rmse")));
}

double log_psnr(const Image& pred, const Image& gt, double eps) {
  require_same(pred, gt, "log_psnr");
  return psnr(log_map(pred, eps, "log_psnr"), log_map(gt, eps, "log_psnr"), 1.0);
}

std::size_t WarpResult::valid_count() const {
  std::size_t n = 0;
  for (auto m : valid_mask) n += m;
  return n;
}

WarpResult warp_to_reference(const Image& src_map, const scene::Camera& src_cam,
                             const scene::Camera& ref_cam, const Image& ref_depth,
                             double occlusion_tau, const Image* src_depth) {
  if (ref_depth.empty() || ref_depth.channels != 1) {
    throw std::invalid_argument("warp_to_reference: missing reference depth");
  }
  if (src_map.empty()) throw std::invalid_argument("warp_to_reference: empty source map");
  if (src_depth && (src_depth->height != src_map.height || src_depth->width != src_map.width ||
                    src_depth->channels != 1)) {
    throw std::invalid_argument("warp_to_reference: source depth does not match the source map");
  }
  src_cam.validate();
  ref_cam.validate();

  const std::size_t h = ref_depth.height;
  const std::size_t w = ref_depth.width;
  const std::size_t ch = src_map.channels;
  WarpResult out;
  out.warped = Image(h, w, ch, kNaN);
  out.valid_mask.assign(h * w, 0);
  const double max_x = static_cast<double>(src_map.width - 1);
  const double max_y = static_cast<double>(src_map.height - 1);

  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double d = ref_depth.at(y, x, 0);
      if (!(d > 0.0) || !std::isfinite(d)) continue;
      const auto world = scene::unproject(ref_cam, scene::Vec2(static_cast<double>(x), static_cast<double>(y)), d);
      const auto proj = scene::project(src_cam, world);
      if (!proj.valid) continue;
      const double u = snap(proj.pixel.x());
      const double v = snap(proj.pixel.y());
      if (!(u >= 0.0 && u <= max_x && v >= 0.0 && v <= max_y)) continue;
      const auto x0 = static_cast<std::size_t>(std::floor(u));
      const auto y0 = static_cast<std::size_t>(std::floor(v));
      const std::size_t x1 = std::min(x0 + 1, src_map.width - 1);
      const std::size_t y1 = std::min(y0 + 1, src_map.height - 1);
      const double fx = u - static_cast<double>(x0);
      const double fy = v - static_cast<double>(y0);
      const std::size_t tx[4] = {x0, x1, x0, x1};
      const std::size_t ty[4] = {y0, y0, y1, y1};
      const double tw[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
      bool ok = true;
      if (src_depth) {
        for (int t = 0; t < 4 && ok; ++t) {
          if (tw[t] == 0.0) continue;
          const double sd = src_depth->at(ty[t], tx[t], 0);
          ok = std::isfinite(sd) && std::abs(sd - proj.depth) <= occlusion_tau * proj.depth;
        }
      }
      if (!ok) continue;
      out.valid_mask[y * w + x] = 1;
      for (std::size_t c = 0; c < ch; ++c) {
        double s = 0.0;
        for (int t = 0; t < 4; ++t) {
          if (tw[t] != 0.0) s += tw[t] * src_map.at(ty[t], tx[t], c);
        }
        out.warped.at(y, x, c) = s;
      }
    }
  }
  return out;
}

ConsistencyResult consistency_score(const std::vector<Image>& maps,
                                    const std::vector<scene::Camera>& cameras,
                                    const std::vector<Image>& depths, double occlusion_tau,
                                    bool all_references) {
  if (maps.size() < 2) throw std::invalid_argument("consistency_score: needs at least 2 views");
  if (cameras.size() != maps.size() || depths.size() != maps.size()) {
    throw std::invalid_argument("consistency_score: geometry missing for some views");
  }
  const std::size_t refs = all_references ? maps.size() : 1;
  double score_sum = 0.0;
  std::size_t scored = 0;
  double coverage_sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t r = 0; r < refs; ++r) {
    for (std::size_t v = 0; v < maps.size(); ++v) {
      if (v == r) continue;
      const auto wr = warp_to_reference(maps[v], cameras[v], cameras[r], depths[r], occlusion_tau, &depths[v]);
      const Image& ref = maps[r];
      if (!wr.warped.same_shape(ref)) throw std::invalid_argument("consistency_score: map shapes differ");
      double s = 0.0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < wr.valid_mask.size(); ++i) {
        if (!wr.valid_mask[i]) continue;
        for (std::size_t c = 0; c < ref.channels; ++c) {
          s += std::abs(wr.warped.data[i * ref.channels + c] - ref.data[i * ref.channels + c]);
        }
        ++n;
      }
      ++pairs;
      coverage_sum += static_cast<double>(n) / static_cast<double>(wr.valid_mask.size());
      if (n == 0) continue;
      score_sum += s / static_cast<double>(n * ref.channels);
      ++scored;
    }
  }
  ConsistencyResult res;
  res.coverage = coverage_sum / static_cast<double>(pairs);
  if (scored > 0) res.score = score_sum / static_cast<double>(scored);
  return res;
}

MetricReport evaluate_batch(const model::IntrinsicSet& pred, const scene::MultiViewBatch& gt,
                            const EvalConfig& config) {
  const std::size_t views = gt.frames.size();
  if (pred.albedo.size() != views || pred.s_diff.size() != views || pred.s_spec.size() != views) {
    throw std::invalid_argument("evaluate_batch: view count mismatch");
  }
  std::vector<scene::Camera> cams;
  std::vector<Image> depths;
  std::vector<Image> recon;
  for (std::size_t v = 0; v < views; ++v) {
    cams.push_back(gt.frames[v].camera);
    depths.push_back(gt.frames[v].depth);
    recon.push_back(objectives::recompose(pred.albedo[v], pred.s_diff[v], pred.s_spec[v]));
  }

  auto row = [&](const char* name, const std::vector<Image>& p, auto gt_of, bool log_domain) {
    FactorRow r;
    r.factor = name;
    std::vector<double> ps, ss, ms, ls;
    for (std::size_t v = 0; v < views; ++v) {
      const Image& g = gt_of(gt.frames[v]);
      ps.push_back(log_domain ? log_psnr(p[v], g, config.log_eps) : psnr(p[v], g));
      ss.push_back(ssim(p[v], g));
      ms.push_back(mae(p[v], g));
      ls.push_back(log_rmse(p[v], g, config.log_eps));
    }
    r.psnr = mean_of(ps);
    r.ssim = mean_of(ss);
    r.mae = mean_of(ms);
    r.log_rmse = mean_of(ls);
    if (views >= 2) {
      const auto c = consistency_score(p, cams, depths, config.occlusion_tau, config.all_references);
      r.consistency = c.score;
      r.coverage = c.coverage;
    }
    return r;
  };

  MetricReport rep;
  rep.rows.push_back(row("albedo", pred.albedo, [](const scene::GroundTruthFrame& f) -> const Image& { return f.albedo; }, false));
  rep.rows.push_back(row("diffuse", pred.s_diff, [](const scene::GroundTruthFrame& f) -> const Image& { return f.s_diff; }, true));
  rep.rows.push_back(row("specular", pred.s_spec, [](const scene::GroundTruthFrame& f) -> const Image& { return f.s_spec; }, true));
  rep.rows.push_back(row("recon", recon, [](const scene::GroundTruthFrame& f) -> const Image& { return f.image; }, false));
  return rep;
}

std::string format_metric(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "undefined";
  return format_double(v);
}

std::string report_csv_header() {
  return "# values on linear RGB; consistency warps each view to view 0 with ground-truth depth\n"
         "scene,mode,factor,psnr,ssim,mae,log_rmse,consistency,coverage\n";
}

std::string report_csv_rows(const std::string& scene, const std::string& mode,
                            const MetricReport& report) {
  std::ostringstream os;
  for (const auto& r : report.rows) {
    os << scene << ',' << mode << ',' << r.factor << ',' << format_metric(r.psnr) << ','
       << format_metric(r.ssim) << ',' << format_metric(r.mae) << ',' << format_metric(r.log_rmse)
       << ',' << (r.consistency ? format_metric(*r.consistency) : std::string("undefined")) << ','
       << format_metric(r.coverage) << '\n';
  }
  return os.str();
}

}  // namespace idt::metrics
