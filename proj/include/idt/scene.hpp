#pragma once

// Procedural multi-view scenes with exact intrinsic ground truth.
//
// Scenes are analytic planes and spheres lit by an SG mixture. Every pixel
// of a rendered frame satisfies  image = albedo * s_diff + s_spec  exactly.
// Background pixels have albedo 0, s_diff 0, depth +inf, and s_spec equal to
// the lobe radiance (without ambient) along the camera ray.

#include "idt/image.hpp"
#include "idt/sg.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <variant>
#include <vector>

namespace idt::scene {

using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;
using Mat3 = Eigen::Matrix3d;

struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
};

// World-to-camera pose: x_cam = rotation * x_world + translation.
// Camera axes: x right, y down, z forward; pixel centres at integer coords.
struct Camera {
  Intrinsics intrinsics;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 center() const { return -rotation.transpose() * translation; }
  void validate() const;

  static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up,
                        const Intrinsics& intrinsics);
  // Pinhole intrinsics for a square-pixel image with the given field of view.
  static Intrinsics from_fov(std::size_t width, std::size_t height, double fov_deg);
};

struct Projection {
  Vec2 pixel = Vec2::Zero();
  double depth = 0.0;
  bool valid = false;  // false for points at or behind the camera plane
};

Projection project(const Camera& camera, const Vec3& world_point);
Vec3 unproject(const Camera& camera, const Vec2& pixel, double depth);

struct Plane {
  Vec3 center = Vec3::Zero();
  Vec3 normal = Vec3::UnitY();
  Vec3 u_axis = Vec3::UnitX();  // in-plane, orthogonal to normal
  double half_u = 1.0;
  double half_v = 1.0;
  Vec3 albedo = Vec3::Constant(0.5);
  Vec3 albedo_alt = Vec3::Constant(0.5);
  double checker_size = 0.0;  // 0 for a single colour
  double gloss = 16.0;
  double specular = 0.0;
};

struct Sphere {
  Vec3 center = Vec3::Zero();
  double radius = 1.0;
  Vec3 albedo = Vec3::Constant(0.5);
  double gloss = 16.0;
  double specular = 0.0;
};

using Primitive = std::variant<Plane, Sphere>;

struct SceneSpec {
  std::vector<Primitive> primitives;
  sg::SGMixture illumination;
  std::uint64_t seed = 0;
};

void validate(const SceneSpec& scene);

struct SynthConfig {
  std::uint64_t seed = 0;
  std::size_t scenes = 1;
  std::size_t views = 4;
  std::size_t width = 64;
  std::size_t height = 64;

  std::size_t min_spheres = 1;
  std::size_t max_spheres = 3;
  double min_radius = 0.35;
  double max_radius = 0.7;
  double albedo_min = 0.15;
  double albedo_max = 0.9;
  bool checker_floor = true;
  double checker_size = 0.75;
  double gloss_min = 8.0;
  double gloss_max = 48.0;
  double specular_min = 0.05;
  double specular_max = 0.3;

  std::size_t lobes = sg::kDefaultLobes;
  double lobe_sharpness_min = 2.0;
  double lobe_sharpness_max = 12.0;
  double lobe_amplitude_min = 0.2;
  double lobe_amplitude_max = 0.8;
  double ambient_min = 0.05;
  double ambient_max = 0.2;

  double arc_radius = 4.5;
  double elevation_deg = 22.0;
  double baseline_deg = 16.0;  // total azimuth span of one rig
  double fov_deg = 50.0;

  void validate() const;
};

SceneSpec generate_scene(std::uint64_t seed, const SynthConfig& config);
std::vector<Camera> make_rig(std::uint64_t seed, const SynthConfig& config);

struct GroundTruthFrame {
  Image image;
  Image albedo;
  Image s_diff;
  Image s_spec;
  Image depth;  // one channel, +inf on background
  Camera camera;
};

GroundTruthFrame render_view(const SceneSpec& scene, const Camera& camera, std::size_t width,
                             std::size_t height);

struct MultiViewBatch {
  std::vector<GroundTruthFrame> frames;
  sg::SGMixture illumination;
};

MultiViewBatch render_batch(const SceneSpec& scene, const std::vector<Camera>& cameras,
                            std::size_t width, std::size_t height);

// Per-scene seed derived from the generator seed and the scene index.
std::uint64_t scene_seed(std::uint64_t generator_seed, std::size_t index);

// ---- dataset files --------------------------------------------------------

inline constexpr const char* kDatasetFormat = "IDTDATA1";

struct DatasetSummary {
  std::size_t scenes = 0;
  std::size_t views = 0;
  std::size_t width = 0;
  std::size_t height = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> scene_names;
};

DatasetSummary make_dataset(const SynthConfig& config, const std::filesystem::path& out_dir,
                            bool overwrite);
DatasetSummary read_manifest(const std::filesystem::path& dataset_dir);
MultiViewBatch load_scene(const std::filesystem::path& scene_dir, std::size_t views);

std::string format_camera(const Camera& camera);
Camera parse_camera(const std::string& text);

}  // namespace idt::scene
