#pragma once

// Image-quality metrics, depth-based backward warping, and the cross-view
// consistency score. All values are computed on linear RGB.

#include "idt/image.hpp"
#include "idt/model.hpp"
#include "idt/scene.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace idt::metrics {

inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;
inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kDefaultOcclusionTau = 0.01;
inline constexpr double kLogEps = 1e-4;

// +inf when the images are identical.
double psnr(const Image& a, const Image& b, double peak = 1.0);
double ssim(const Image& a, const Image& b);
double mae(const Image& a, const Image& b);
double log_rmse(const Image& pred, const Image& gt, double eps);
// PSNR of log(x + eps) maps with unit peak.
double log_psnr(const Image& pred, const Image& gt, double eps);

struct WarpResult {
  Image warped;                // NaN wherever mask is false
  std::vector<std::uint8_t> valid_mask;
  std::size_t valid_count() const;
};

// Backward warp: every reference pixel is unprojected with ref_depth,
// projected into the source camera and bilinearly sampled from src_map.
// A pixel is valid when its reprojection has positive depth and lies inside
// the source image, and, when src_depth is given, every bilinear tap's depth
// is within occlusion_tau (relative) of the reprojected depth.
WarpResult warp_to_reference(const Image& src_map, const scene::Camera& src_cam,
                             const scene::Camera& ref_cam, const Image& ref_depth,
                             double occlusion_tau, const Image* src_depth = nullptr);

struct ConsistencyResult {
  std::optional<double> score;  // undefined when no pair has a valid pixel
  double coverage = 0.0;        // mean valid fraction over pairs
};

// Mean |warped - reference| over valid pixels, averaged over the pairs
// (v -> 0). With all_references, every view serves as reference in turn.
ConsistencyResult consistency_score(const std::vector<Image>& maps,
                                    const std::vector<scene::Camera>& cameras,
                                    const std::vector<Image>& depths, double occlusion_tau,
                                    bool all_references = false);

// ---- batch report ---------------------------------------------------------

inline constexpr const char* kReportFactors[] = {"albedo", "diffuse", "specular", "recon"};
inline constexpr const char* kReportMetrics[] = {"psnr", "ssim", "mae", "log_rmse", "consistency", "coverage"};

struct FactorRow {
  std::string factor;
  double psnr = 0.0;  // log-domain for diffuse and specular
  double ssim = 0.0;
  double mae = 0.0;
  double log_rmse = 0.0;
  std::optional<double> consistency;
  double coverage = 0.0;
};

struct MetricReport {
  std::vector<FactorRow> rows;  // one per entry of kReportFactors
};

struct EvalConfig {
  double occlusion_tau = kDefaultOcclusionTau;
  double log_eps = kLogEps;
  bool all_references = false;
};

MetricReport evaluate_batch(const model::IntrinsicSet& pred, const scene::MultiViewBatch& gt,
                            const EvalConfig& config);

std::string report_csv_header();
std::string report_csv_rows(const std::string& scene, const std::string& mode,
                            const MetricReport& report);
std::string format_metric(double v);

}  // namespace idt::metrics
