#include "idt/metrics.hpp"
#include "idt/objectives.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

using namespace idt;
using namespace idt::metrics;
using scene::Camera;
using scene::Vec3;

namespace {

Image random_image(std::size_t h, std::size_t w, std::size_t c, std::mt19937_64& rng, double lo = 0.0,
                   double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Image img(h, w, c);
  for (auto& x : img.data) x = u(rng);
  return img;
}

// Direct 2-D windowed SSIM: weights from the explicit Gaussian, moments
// taken about the local mean.
double naive_ssim(const Image& a, const Image& b) {
  const int n = 11;
  double w[11][11];
  double ws = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      w[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * 1.5 * 1.5));
      ws += w[i][j];
    }
  }
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0;
  for (std::size_t c = 0; c < a.channels; ++c) {
    double acc = 0;
    std::size_t count = 0;
    for (std::size_t y = 0; y + n <= a.height; ++y) {
      for (std::size_t x = 0; x + n <= a.width; ++x) {
        double mx = 0, my = 0;
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < n; ++j) {
            mx += w[i][j] / ws * a.at(y + i, x + j, c);
            my += w[i][j] / ws * b.at(y + i, x + j, c);
          }
        }
        double vx = 0, vy = 0, cov = 0;
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < n; ++j) {
            const double dx = a.at(y + i, x + j, c) - mx, dy = b.at(y + i, x + j, c) - my;
            vx += w[i][j] / ws * dx * dx;
            vy += w[i][j] / ws * dy * dy;
            cov += w[i][j] / ws * dx * dy;
          }
        }
        acc += (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
    }
    total += acc / count;
  }
  return total / a.channels;
}

Camera plain_camera(std::size_t w, std::size_t h, const Vec3& center) {
  Camera c;
  c.intrinsics = Camera::from_fov(w, h, 50.0);
  c.rotation.setIdentity();
  c.translation = -center;
  return c;
}

// Map whose value at pixel (y, x) is x, which bilinear sampling reproduces exactly.
Image ramp(std::size_t h, std::size_t w) {
  Image img(h, w, 1);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) img.at(y, x, 0) = static_cast<double>(x);
  }
  return img;
}

scene::MultiViewBatch synthetic_batch(std::uint64_t seed, std::size_t views = 3) {
  scene::SynthConfig sc;
  sc.views = views;
  return scene::render_batch(scene::generate_scene(seed, sc), scene::make_rig(seed, sc), 64, 64);
}

}  // namespace

// ---- psnr / mae / log_rmse -------------------------------------------------

TEST(Psnr, Examples) {
  std::mt19937_64 rng(1);
  const Image a = random_image(8, 8, 3, rng);
  EXPECT_TRUE(std::isinf(psnr(a, a)));
  EXPECT_GT(psnr(a, a), 0.0);
  Image b = a;
  for (auto& x : b.data) x += 0.1;
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-9);
  const Image c = random_image(8, 8, 3, rng);
  double mse = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) mse += (a.data[i] - c.data[i]) * (a.data[i] - c.data[i]);
  mse /= a.data.size();
  EXPECT_NEAR(psnr(a, c), 10 * std::log10(1.0 / mse), 1e-9);
  EXPECT_NEAR(psnr(a, c, 2.0), 10 * std::log10(4.0 / mse), 1e-9);
  EXPECT_THROW(psnr(a, Image(4, 4, 3)), std::invalid_argument);
  EXPECT_THROW(psnr(a, c, 0.0), std::invalid_argument);
}

TEST(Mae, Examples) {
  std::mt19937_64 rng(2);
  const Image a = random_image(5, 6, 3, rng), c = random_image(5, 6, 3, rng);
  EXPECT_EQ(mae(a, a), 0.0);
  Image b = a;
  for (auto& x : b.data) x += 0.1;
  EXPECT_NEAR(mae(a, b), 0.1, 1e-12);
  double s = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += std::abs(a.data[i] - c.data[i]);
  EXPECT_NEAR(mae(a, c), s / a.data.size(), 1e-15);
}

TEST(LogRmse, Examples) {
  std::mt19937_64 rng(3);
  const Image g = random_image(5, 5, 3, rng, 0.1, 2.0);
  EXPECT_EQ(log_rmse(g, g, 1e-4), 0.0);
  Image p = g;
  for (auto& x : p.data) x *= std::exp(1.0);
  EXPECT_NEAR(log_rmse(p, g, 0.0), 1.0, 1e-12);
  const Image q = random_image(5, 5, 3, rng, 0.0, 2.0);
  double s = 0;
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    const double d = std::log(q.data[i] + 1e-4) - std::log(g.data[i] + 1e-4);
    s += d * d;
  }
  EXPECT_NEAR(log_rmse(q, g, 1e-4), std::sqrt(s / g.data.size()), 1e-12);
  Image neg = g;
  neg.data[0] = -1.0;
  EXPECT_THROW(log_rmse(neg, g, 1e-4), std::invalid_argument);
}

TEST(LogPsnr, IsPsnrOfLogMaps) {
  std::mt19937_64 rng(4);
  const Image p = random_image(6, 6, 3, rng, 0.0, 2.0), g = random_image(6, 6, 3, rng, 0.0, 2.0);
  Image lp = p, lg = g;
  for (auto& x : lp.data) x = std::log(x + 1e-4);
  for (auto& x : lg.data) x = std::log(x + 1e-4);
  EXPECT_NEAR(log_psnr(p, g, 1e-4), psnr(lp, lg), 1e-12);
}

// ---- ssim ------------------------------------------------------------------

TEST(Ssim, IdenticalIsExactlyOne) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 5; ++t) {
    const Image a = random_image(16, 20, t % 2 ? 1 : 3, rng, -2.0, 3.0);
    EXPECT_EQ(ssim(a, a), 1.0);
  }
}

TEST(Ssim, InvertedCheckerIsNegative) {
  Image a(24, 24, 1);
  for (std::size_t y = 0; y < 24; ++y) {
    for (std::size_t x = 0; x < 24; ++x) a.at(y, x, 0) = ((x / 3 + y / 3) % 2) ? 1.0 : 0.0;
  }
  Image b = a;
  for (auto& x : b.data) x = 1.0 - x;
  EXPECT_LT(ssim(a, b), 0.0);
}

TEST(Ssim, MatchesNaiveSlidingWindow) {
  std::mt19937_64 rng(6);
  for (std::size_t c : {1u, 3u}) {
    const Image a = random_image(17, 15, c, rng), b = random_image(17, 15, c, rng);
    EXPECT_NEAR(ssim(a, b), naive_ssim(a, b), 1e-9);
    Image blurred = a;
    for (auto& x : blurred.data) x = 0.7 * x + 0.1;
    EXPECT_NEAR(ssim(a, blurred), naive_ssim(a, blurred), 1e-9);
  }
}

TEST(Ssim, RejectsSmallImages) {
  EXPECT_THROW(ssim(Image(10, 20, 3), Image(10, 20, 3)), std::invalid_argument);
  EXPECT_THROW(ssim(Image(12, 12, 3), Image(12, 12, 1)), std::invalid_argument);
}

// ---- warping ---------------------------------------------------------------

TEST(Warp, IdentityCameraIsExact) {
  std::mt19937_64 rng(7);
  const Camera cam = plain_camera(32, 24, Vec3(0.1, -0.2, -3.0));
  const Image src = random_image(24, 32, 3, rng);
  const Image depth = random_image(24, 32, 1, rng, 1.0, 5.0);
  const WarpResult r = warp_to_reference(src, cam, cam, depth, 0.01, &depth);
  EXPECT_EQ(r.valid_count(), 24u * 32u);
  double worst = 0;
  for (std::size_t i = 0; i < src.data.size(); ++i) worst = std::max(worst, std::abs(r.warped.data[i] - src.data[i]));
  EXPECT_LE(worst, 1e-12);
}

TEST(Warp, GeneratorCameraIdentityIsExact) {
  const auto batch = synthetic_batch(8);
  const auto& f = batch.frames[1];
  const WarpResult r = warp_to_reference(f.albedo, f.camera, f.camera, f.depth, 0.01, &f.depth);
  std::size_t finite = 0;
  for (std::size_t i = 0; i < f.depth.data.size(); ++i) {
    if (!std::isfinite(f.depth.data[i])) {
      EXPECT_FALSE(r.valid_mask[i]);
      continue;
    }
    ++finite;
    ASSERT_TRUE(r.valid_mask[i]) << i;
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(r.warped.data[3 * i + c], f.albedo.data[3 * i + c], 1e-12);
  }
  EXPECT_EQ(r.valid_count(), finite);
}

TEST(Warp, TranslatedCameraMatchesStereoDisparity) {
  const std::size_t w = 64, h = 48;
  const double b = 0.3, d = 4.0;
  const Camera ref = plain_camera(w, h, Vec3(0, 0, 0));
  const Camera src = plain_camera(w, h, Vec3(b, 0, 0));
  const double f = ref.intrinsics.fx;
  const double disparity = f * b / d;
  const WarpResult r = warp_to_reference(ramp(h, w), src, ref, Image(h, w, 1, d), 0.01);
  std::size_t checked = 0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const bool inside = static_cast<double>(x) - disparity >= 0.0;
      ASSERT_EQ(static_cast<bool>(r.valid_mask[y * w + x]), inside) << x;
      if (!inside) {
        EXPECT_TRUE(std::isnan(r.warped.at(y, x, 0)));
        continue;
      }
      EXPECT_NEAR(static_cast<double>(x) - r.warped.at(y, x, 0), disparity, 0.01);
      ++checked;
    }
  }
  EXPECT_GT(checked, 0u);
}

TEST(Warp, OutOfBoundsAndBehindCameraAreMasked) {
  const Camera ref = plain_camera(16, 16, Vec3(0, 0, 0));
  Camera far_left = plain_camera(16, 16, Vec3(100, 0, 0));
  const WarpResult r = warp_to_reference(Image(16, 16, 1, 1.0), far_left, ref, Image(16, 16, 1, 2.0), 0.01);
  EXPECT_EQ(r.valid_count(), 0u);
  Camera behind = plain_camera(16, 16, Vec3(0, 0, 10));
  EXPECT_EQ(warp_to_reference(Image(16, 16, 1, 1.0), behind, ref, Image(16, 16, 1, 2.0), 0.01).valid_count(), 0u);
}

TEST(Warp, OcclusionTestUsesRelativeTolerance) {
  const Camera cam = plain_camera(16, 16, Vec3(0, 0, 0));
  const Image ref_depth(16, 16, 1, 4.0);
  Image src_depth(16, 16, 1, 4.0 * 1.009);
  EXPECT_EQ(warp_to_reference(Image(16, 16, 1), cam, cam, ref_depth, 0.01, &src_depth).valid_count(), 256u);
  src_depth = Image(16, 16, 1, 4.0 * 1.011);
  EXPECT_EQ(warp_to_reference(Image(16, 16, 1), cam, cam, ref_depth, 0.01, &src_depth).valid_count(), 0u);
}

TEST(Warp, Errors) {
  const Camera cam = plain_camera(8, 8, Vec3(0, 0, 0));
  EXPECT_THROW(warp_to_reference(Image(8, 8, 3), cam, cam, Image(), 0.01), std::invalid_argument);
  const Image d(8, 8, 1, 1.0), bad(4, 4, 1, 1.0);
  EXPECT_THROW(warp_to_reference(Image(8, 8, 3), cam, cam, d, 0.01, &bad), std::invalid_argument);
}

// ---- consistency -------------------------------------------------------------

TEST(Consistency, IdenticalViewsScoreZero) {
  std::mt19937_64 rng(8);
  const Camera cam = plain_camera(16, 16, Vec3(0, 0, -1));
  const Image m = random_image(16, 16, 3, rng);
  const Image d(16, 16, 1, 3.0);
  const auto r = consistency_score({m, m, m}, {cam, cam, cam}, {d, d, d}, 0.01);
  ASSERT_TRUE(r.score.has_value());
  EXPECT_EQ(*r.score, 0.0);
  EXPECT_EQ(r.coverage, 1.0);
}

TEST(Consistency, GroundTruthAlbedoBelowSpecular) {
  for (std::uint64_t seed : {11u, 12u}) {
    const auto batch = synthetic_batch(seed);
    std::vector<Image> alb, spec, depths;
    std::vector<Camera> cams;
    for (const auto& f : batch.frames) {
      alb.push_back(f.albedo);
      spec.push_back(f.s_spec);
      depths.push_back(f.depth);
      cams.push_back(f.camera);
    }
    const auto a = consistency_score(alb, cams, depths, kDefaultOcclusionTau);
    const auto s = consistency_score(spec, cams, depths, kDefaultOcclusionTau);
    ASSERT_TRUE(a.score && s.score);
    EXPECT_LT(*a.score, 1e-3);
    EXPECT_GT(*s.score, *a.score);
    EXPECT_GT(a.coverage, 0.2);
  }
}

TEST(Consistency, AllReferencesSymmetricUnderRelabeling) {
  const auto batch = synthetic_batch(13, 3);
  std::vector<Image> maps, depths;
  std::vector<Camera> cams;
  for (const auto& f : batch.frames) {
    maps.push_back(f.s_spec);
    depths.push_back(f.depth);
    cams.push_back(f.camera);
  }
  const auto base = consistency_score(maps, cams, depths, 0.01, true);
  for (const std::vector<std::size_t>& p : {std::vector<std::size_t>{1, 2, 0}, {2, 0, 1}, {0, 2, 1}}) {
    std::vector<Image> pm, pd;
    std::vector<Camera> pc;
    for (std::size_t i : p) {
      pm.push_back(maps[i]);
      pd.push_back(depths[i]);
      pc.push_back(cams[i]);
    }
    const auto r = consistency_score(pm, pc, pd, 0.01, true);
    EXPECT_NEAR(*r.score, *base.score, 1e-12);
    EXPECT_NEAR(r.coverage, base.coverage, 1e-12);
  }
}

TEST(Consistency, MaskedPixelsAreNeverRead) {
  const auto batch = synthetic_batch(14, 2);
  std::vector<Image> maps, depths;
  std::vector<Camera> cams;
  for (const auto& f : batch.frames) {
    maps.push_back(f.albedo);
    depths.push_back(f.depth);
    cams.push_back(f.camera);
  }
  const auto base = consistency_score(maps, cams, depths, 0.01);
  const double poison = std::numeric_limits<double>::quiet_NaN();
  // Reference pixels outside the valid mask and source pixels no valid tap touches.
  const auto wr = warp_to_reference(maps[1], cams[1], cams[0], depths[0], 0.01, &depths[1]);
  std::vector<std::uint8_t> touched(64 * 64, 0);
  for (std::size_t y = 0; y < 64; ++y) {
    for (std::size_t x = 0; x < 64; ++x) {
      if (!wr.valid_mask[y * 64 + x]) continue;
      const auto p = scene::project(cams[1], scene::unproject(cams[0], scene::Vec2(x, y), depths[0].at(y, x, 0)));
      for (int dy = -1; dy <= 2; ++dy) {
        for (int dx = -1; dx <= 2; ++dx) {
          const int ty = static_cast<int>(std::floor(p.pixel.y())) + dy, tx = static_cast<int>(std::floor(p.pixel.x())) + dx;
          if (ty >= 0 && ty < 64 && tx >= 0 && tx < 64) touched[ty * 64 + tx] = 1;
        }
      }
    }
  }
  std::vector<Image> poisoned = maps;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < 64 * 64; ++i) {
    if (!wr.valid_mask[i]) {
      for (std::size_t c = 0; c < 3; ++c) poisoned[0].data[3 * i + c] = poison;
      ++hit;
    }
    if (!touched[i]) {
      for (std::size_t c = 0; c < 3; ++c) poisoned[1].data[3 * i + c] = poison;
      ++hit;
    }
  }
  ASSERT_GT(hit, 0u);
  const auto r = consistency_score(poisoned, cams, depths, 0.01);
  ASSERT_TRUE(r.score.has_value());
  EXPECT_EQ(*r.score, *base.score);
}

TEST(Consistency, NoValidPixelIsUndefined) {
  const Camera ref = plain_camera(16, 16, Vec3(0, 0, 0));
  const Camera away = plain_camera(16, 16, Vec3(100, 0, 0));
  const Image d(16, 16, 1, 2.0);
  const auto r = consistency_score({Image(16, 16, 3), Image(16, 16, 3)}, {ref, away}, {d, d}, 0.01);
  EXPECT_FALSE(r.score.has_value());
  EXPECT_EQ(r.coverage, 0.0);
}

TEST(Consistency, Errors) {
  const Camera c = plain_camera(8, 8, Vec3(0, 0, 0));
  const Image d(8, 8, 1, 1.0);
  EXPECT_THROW(consistency_score({Image(8, 8, 3)}, {c}, {d}, 0.01), std::invalid_argument);
  EXPECT_THROW(consistency_score({Image(8, 8, 3), Image(8, 8, 3)}, {c}, {d, d}, 0.01), std::invalid_argument);
}

// ---- evaluate_batch ----------------------------------------------------------

namespace {

model::IntrinsicSet from_ground_truth(const scene::MultiViewBatch& b) {
  model::IntrinsicSet s;
  for (const auto& f : b.frames) {
    s.albedo.push_back(f.albedo);
    s.s_diff.push_back(f.s_diff);
    s.s_spec.push_back(f.s_spec);
  }
  s.illumination = b.illumination;
  return s;
}

}  // namespace

TEST(EvaluateBatch, PerfectPredictions) {
  const auto batch = synthetic_batch(15);
  const MetricReport r = evaluate_batch(from_ground_truth(batch), batch, EvalConfig{});
  ASSERT_EQ(r.rows.size(), 4u);
  EXPECT_EQ(r.rows[0].factor, "albedo");
  EXPECT_TRUE(std::isinf(r.rows[0].psnr));
  EXPECT_EQ(r.rows[0].ssim, 1.0);
  EXPECT_EQ(r.rows[0].mae, 0.0);
  EXPECT_TRUE(std::isinf(r.rows[3].psnr));
  ASSERT_TRUE(r.rows[0].consistency.has_value());
  EXPECT_LT(*r.rows[0].consistency, 1e-3);
}

TEST(EvaluateBatch, ZeroPredictionsGiveImagePsnr) {
  const auto batch = synthetic_batch(16);
  model::IntrinsicSet z = from_ground_truth(batch);
  for (auto* layer : {&z.albedo, &z.s_diff, &z.s_spec}) {
    for (auto& im : *layer) im = Image(im.height, im.width, 3, 0.0);
  }
  const MetricReport r = evaluate_batch(z, batch, EvalConfig{});
  double expect = 0;
  for (const auto& f : batch.frames) expect += psnr(Image(64, 64, 3, 0.0), f.image);
  EXPECT_NEAR(r.rows[3].psnr, expect / batch.frames.size(), 1e-12);
}

TEST(EvaluateBatch, SchemaIsStable) {
  const auto batch = synthetic_batch(17, 2);
  const auto a = report_csv_rows("s", "joint", evaluate_batch(from_ground_truth(batch), batch, EvalConfig{}));
  const auto b = report_csv_rows("s", "joint", evaluate_batch(from_ground_truth(batch), batch, EvalConfig{}));
  EXPECT_EQ(a, b);
  std::size_t lines = 0;
  for (char c : a) lines += c == '\n';
  EXPECT_EQ(lines, std::size(kReportFactors));
  const std::string header = report_csv_header();
  EXPECT_NE(header.find("scene,mode,factor,psnr,ssim,mae,log_rmse,consistency,coverage"), std::string::npos);
  EXPECT_EQ(std::size(kReportFactors) * std::size(kReportMetrics), 24u);
  EXPECT_EQ(format_metric(std::numeric_limits<double>::infinity()), "inf");
}

TEST(EvaluateBatch, SingleViewHasNoConsistency) {
  const auto batch = synthetic_batch(18, 1);
  const MetricReport r = evaluate_batch(from_ground_truth(batch), batch, EvalConfig{});
  for (const auto& row : r.rows) EXPECT_FALSE(row.consistency.has_value());
  model::IntrinsicSet bad = from_ground_truth(batch);
  bad.albedo.push_back(bad.albedo[0]);
  EXPECT_THROW(evaluate_batch(bad, batch, EvalConfig{}), std::invalid_argument);
}
