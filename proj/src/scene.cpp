#include "idt/scene.hpp"

#include "idt/io.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <map>
#include <random>
#include <sstream>

namespace idt::scene {

namespace fs = std::filesystem;

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kInf = std::numeric_limits<double>::infinity();

double deg(double d) { return d * kPi / 180.0; }

struct Hit {
  double t = kInf;
  Vec3 normal = Vec3::Zero();
  Vec3 albedo = Vec3::Zero();
  double gloss = 1.0;
  double specular = 0.0;
};

void intersect(const Plane& pl, const Vec3& o, const Vec3& d, Hit& best) {
  const double denom = d.dot(pl.normal);
  if (std::abs(denom) < 1e-12) return;
  const double t = (pl.center - o).dot(pl.normal) / denom;
  if (!(t > 1e-9) || t >= best.t) return;
  const Vec3 p = o + t * d;
  const Vec3 v_axis = pl.normal.cross(pl.u_axis);
  const double u = (p - pl.center).dot(pl.u_axis);
  const double v = (p - pl.center).dot(v_axis);
  if (std::abs(u) > pl.half_u || std::abs(v) > pl.half_v) return;
  best.t = t;
  best.normal = denom < 0.0 ? pl.normal : Vec3(-pl.normal);
  bool alt = false;
  if (pl.checker_size > 0.0) {
    const auto cu = static_cast<long long>(std::floor(u / pl.checker_size));
    const auto cv = static_cast<long long>(std::floor(v / pl.checker_size));
    alt = ((cu + cv) & 1LL) != 0;
  }
  best.albedo = alt ? pl.albedo_alt : pl.albedo;
  best.gloss = pl.gloss;
  best.specular = pl.specular;
}

void intersect(const Sphere& s, const Vec3& o, const Vec3& d, Hit& best) {
  const Vec3 oc = o - s.center;
  const double b = oc.dot(d);
  const double c = oc.squaredNorm() - s.radius * s.radius;
  const double disc = b * b - c;
  if (disc < 0.0) return;
  const double sq = std::sqrt(disc);
  double t = -b - sq;
  if (!(t > 1e-9)) t = -b + sq;
  if (!(t > 1e-9) || t >= best.t) return;
  best.t = t;
  best.normal = (o + t * d - s.center).normalized();
  best.albedo = s.albedo;
  best.gloss = s.gloss;
  best.specular = s.specular;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

class Sampler {
 public:
  explicit Sampler(std::uint64_t seed) : rng_(seed) {}
  double uniform(double lo, double hi) {
    // 53-bit mantissa draw; independent of the standard library's distributions.
    const double u = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
  }
  std::size_t index(std::size_t lo, std::size_t hi) {
    return lo + static_cast<std::size_t>(rng_() % (hi - lo + 1));
  }
  Vec3 color(double lo, double hi) { return Vec3(uniform(lo, hi), uniform(lo, hi), uniform(lo, hi)); }

 private:
  std::mt19937_64 rng_;
};

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError("synth config: " + msg);
}

void check_range(double lo, double hi, const char* name, bool positive) {
  require(std::isfinite(lo) && std::isfinite(hi) && lo <= hi,
          std::string(name) + " range must satisfy min <= max");
  if (positive) require(lo > 0.0, std::string(name) + " must be positive");
}

}  // namespace

// ---- cameras --------------------------------------------------------------

void Camera::validate() const {
  const Mat3 rrt = rotation * rotation.transpose();
  if (!rotation.allFinite() || (rrt - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-9 ||
      std::abs(rotation.determinant() - 1.0) > 1e-9) {
    throw ConfigError("camera rotation must be orthonormal with determinant +1");
  }
  if (!(intrinsics.fx > 0.0) || !(intrinsics.fy > 0.0)) {
    throw ConfigError("camera focal lengths must be positive");
  }
  if (!translation.allFinite()) throw ConfigError("camera translation must be finite");
}

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up,
                       const Intrinsics& intrinsics) {
  const Vec3 z = (target - eye).normalized();
  const Vec3 x = z.cross(up).normalized();
  const Vec3 y = z.cross(x);
  Camera cam;
  cam.intrinsics = intrinsics;
  cam.rotation.row(0) = x.transpose();
  cam.rotation.row(1) = y.transpose();
  cam.rotation.row(2) = z.transpose();
  cam.translation = -cam.rotation * eye;
  return cam;
}

Intrinsics Camera::from_fov(std::size_t width, std::size_t height, double fov_deg) {
  const double f = 0.5 * static_cast<double>(width) / std::tan(0.5 * deg(fov_deg));
  return Intrinsics{f, f, 0.5 * (static_cast<double>(width) - 1.0),
                    0.5 * (static_cast<double>(height) - 1.0)};
}

Projection project(const Camera& camera, const Vec3& world_point) {
  const Vec3 pc = camera.rotation * world_point + camera.translation;
  Projection p;
  p.depth = pc.z();
  if (!(pc.z() > 0.0)) return p;
  const auto& k = camera.intrinsics;
  p.pixel = Vec2(k.fx * pc.x() / pc.z() + k.cx, k.fy * pc.y() / pc.z() + k.cy);
  p.valid = true;
  return p;
}

Vec3 unproject(const Camera& camera, const Vec2& pixel, double depth) {
  if (!(depth > 0.0)) throw std::invalid_argument("unproject: depth must be positive");
  const auto& k = camera.intrinsics;
  const Vec3 pc((pixel.x() - k.cx) / k.fx * depth, (pixel.y() - k.cy) / k.fy * depth, depth);
  return camera.rotation.transpose() * (pc - camera.translation);
}

// ---- scene specs ----------------------------------------------------------

void validate(const SceneSpec& scene) {
  if (scene.primitives.empty()) throw ConfigError("scene needs at least one primitive");
  auto check_albedo = [](const Vec3& a) {
    if (!a.allFinite() || (a.array() < 0.0).any() || (a.array() > 1.0).any()) {
      throw ConfigError("albedo must lie in [0,1]");
    }
  };
  for (const auto& prim : scene.primitives) {
    std::visit(
        [&](const auto& p) {
          check_albedo(p.albedo);
          if (!(p.gloss > 0.0)) throw ConfigError("gloss must be positive");
          if (!(p.specular >= 0.0)) throw ConfigError("specular weight must be nonnegative");
          if constexpr (std::is_same_v<std::decay_t<decltype(p)>, Plane>) {
            check_albedo(p.albedo_alt);
            if (std::abs(p.normal.norm() - 1.0) > 1e-9 || std::abs(p.u_axis.norm() - 1.0) > 1e-9 ||
                std::abs(p.normal.dot(p.u_axis)) > 1e-9) {
              throw ConfigError("plane axes must be orthonormal");
            }
          } else {
            if (!(p.radius > 0.0)) throw ConfigError("sphere radius must be positive");
          }
        },
        prim);
  }
  try {
    sg::validate(scene.illumination);
  } catch (const sg::SgError& e) {
    throw ConfigError(e.what());
  }
}

void SynthConfig::validate() const {
  require(scenes >= 1, "scenes must be >= 1");
  require(views >= 1, "views must be >= 1");
  require(width >= 8 && height >= 8, "resolution must be at least 8x8");
  require(min_spheres <= max_spheres, "sphere count range must satisfy min <= max");
  check_range(min_radius, max_radius, "radius", true);
  check_range(albedo_min, albedo_max, "albedo", false);
  require(albedo_min >= 0.0 && albedo_max <= 1.0, "albedo palette must lie in [0,1]");
  require(checker_size > 0.0, "checker size must be positive");
  check_range(gloss_min, gloss_max, "gloss", true);
  check_range(specular_min, specular_max, "specular", false);
  require(specular_min >= 0.0, "specular weight must be nonnegative");
  require(lobes >= 1, "lobe count must be >= 1");
  check_range(lobe_sharpness_min, lobe_sharpness_max, "lobe sharpness", true);
  check_range(lobe_amplitude_min, lobe_amplitude_max, "lobe amplitude", false);
  require(lobe_amplitude_min >= 0.0, "lobe amplitude must be nonnegative");
  check_range(ambient_min, ambient_max, "ambient", false);
  require(ambient_min >= 0.0, "ambient must be nonnegative");
  require(arc_radius > 0.0, "arc radius must be positive");
  require(baseline_deg >= 0.0 && baseline_deg < 180.0, "baseline must lie in [0,180)");
  require(elevation_deg > -80.0 && elevation_deg < 80.0, "elevation must lie in (-80,80)");
  require(fov_deg > 1.0 && fov_deg < 170.0, "field of view must lie in (1,170)");
}

std::uint64_t scene_seed(std::uint64_t generator_seed, std::size_t index) {
  return splitmix64(generator_seed ^ splitmix64(static_cast<std::uint64_t>(index) + 1));
}

SceneSpec generate_scene(std::uint64_t seed, const SynthConfig& config) {
  config.validate();
  Sampler rng(seed);
  SceneSpec scene;
  scene.seed = seed;

  Plane floor;
  floor.center = Vec3(0.0, 0.0, -0.5);
  floor.normal = Vec3::UnitY();
  floor.u_axis = Vec3::UnitX();
  floor.half_u = 6.0;
  floor.half_v = 6.0;
  floor.albedo = rng.color(config.albedo_min, config.albedo_max);
  floor.albedo_alt = rng.color(config.albedo_min, config.albedo_max);
  floor.checker_size = config.checker_floor ? config.checker_size : 0.0;
  floor.gloss = rng.uniform(config.gloss_min, config.gloss_max);
  floor.specular = rng.uniform(config.specular_min, config.specular_max);
  scene.primitives.emplace_back(floor);

  Plane wall;
  wall.center = Vec3(0.0, 2.5, -2.4);
  wall.normal = Vec3::UnitZ();
  wall.u_axis = Vec3::UnitX();
  wall.half_u = 6.0;
  wall.half_v = 2.5;
  wall.albedo = rng.color(config.albedo_min, config.albedo_max);
  wall.albedo_alt = wall.albedo;
  wall.gloss = rng.uniform(config.gloss_min, config.gloss_max);
  wall.specular = rng.uniform(config.specular_min, config.specular_max);
  scene.primitives.emplace_back(wall);

  const std::size_t count = rng.index(config.min_spheres, config.max_spheres);
  std::vector<Sphere> placed;
  for (std::size_t attempt = 0; placed.size() < count && attempt < 200; ++attempt) {
    Sphere s;
    s.radius = rng.uniform(config.min_radius, config.max_radius);
    s.center = Vec3(rng.uniform(-1.3, 1.3), s.radius, rng.uniform(-1.3, 0.9));
    s.albedo = rng.color(config.albedo_min, config.albedo_max);
    s.gloss = rng.uniform(config.gloss_min, config.gloss_max);
    s.specular = rng.uniform(config.specular_min, config.specular_max);
    bool overlaps = false;
    for (const auto& o : placed) {
      overlaps = overlaps || (o.center - s.center).norm() < o.radius + s.radius + 0.05;
    }
    if (!overlaps) placed.push_back(s);
  }
  for (const auto& s : placed) scene.primitives.emplace_back(s);

  for (std::size_t k = 0; k < config.lobes; ++k) {
    sg::SGLobe lobe;
    const double az = rng.uniform(-kPi, kPi);
    const double el = std::asin(rng.uniform(0.3, 0.95));
    lobe.axis = Vec3(std::cos(el) * std::sin(az), std::sin(el), std::cos(el) * std::cos(az));
    lobe.axis.normalize();
    lobe.sharpness = rng.uniform(config.lobe_sharpness_min, config.lobe_sharpness_max);
    const double level = rng.uniform(config.lobe_amplitude_min, config.lobe_amplitude_max);
    lobe.amplitude = level * Vec3(rng.uniform(0.8, 1.0), rng.uniform(0.8, 1.0), rng.uniform(0.8, 1.0));
    scene.illumination.lobes.push_back(lobe);
  }
  scene.illumination.ambient = Vec3::Constant(rng.uniform(config.ambient_min, config.ambient_max));
  scene.illumination = sg::canonicalize(scene.illumination);
  validate(scene);
  return scene;
}

std::vector<Camera> make_rig(std::uint64_t seed, const SynthConfig& config) {
  config.validate();
  Sampler rng(splitmix64(seed ^ 0x5bd1e995ULL));
  const double center_az = rng.uniform(-15.0, 15.0);
  const Vec3 target(0.0, 0.6, -0.3);
  const Intrinsics k = Camera::from_fov(config.width, config.height, config.fov_deg);
  std::vector<Camera> rig;
  for (std::size_t v = 0; v < config.views; ++v) {
    const double frac = config.views == 1 ? 0.5
                                          : static_cast<double>(v) /
                                                static_cast<double>(config.views - 1);
    const double az = deg(center_az + (frac - 0.5) * config.baseline_deg);
    const double el = deg(config.elevation_deg);
    const Vec3 eye = target + config.arc_radius * Vec3(std::cos(el) * std::sin(az), std::sin(el),
                                                       std::cos(el) * std::cos(az));
    rig.push_back(Camera::look_at(eye, target, Vec3::UnitY(), k));
  }
  return rig;
}

// ---- rendering ------------------------------------------------------------

GroundTruthFrame render_view(const SceneSpec& scene, const Camera& camera, std::size_t width,
                             std::size_t height) {
  validate(scene);
  camera.validate();
  if (width < 8 || height < 8) throw ConfigError("resolution must be at least 8x8");

  GroundTruthFrame f;
  f.camera = camera;
  f.image = Image(height, width, 3);
  f.albedo = Image(height, width, 3);
  f.s_diff = Image(height, width, 3);
  f.s_spec = Image(height, width, 3);
  f.depth = Image(height, width, 1, kInf);

  sg::SGMixture lobes_only = scene.illumination;
  lobes_only.ambient = Vec3::Zero();

  // Planes hit every pixel with one normal; memoise irradiance per normal.
  std::map<std::array<double, 3>, Vec3> irradiance_cache;
  auto irradiance = [&](const Vec3& n) {
    const std::array<double, 3> key{n.x(), n.y(), n.z()};
    auto it = irradiance_cache.find(key);
    if (it != irradiance_cache.end()) return it->second;
    const Vec3 e = sg::diffuse_irradiance(scene.illumination, n);
    irradiance_cache.emplace(key, e);
    return e;
  };

  const Vec3 origin = camera.center();
  const Mat3 rt = camera.rotation.transpose();
  const auto& k = camera.intrinsics;
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const Vec3 dir_cam((static_cast<double>(x) - k.cx) / k.fx,
                         (static_cast<double>(y) - k.cy) / k.fy, 1.0);
      const Vec3 dir = (rt * dir_cam).normalized();
      Hit hit;
      for (const auto& prim : scene.primitives) {
        std::visit([&](const auto& p) { intersect(p, origin, dir, hit); }, prim);
      }
      Vec3 albedo = Vec3::Zero();
      Vec3 diff = Vec3::Zero();
      Vec3 spec;
      if (std::isfinite(hit.t)) {
        const Vec3 p = origin + hit.t * dir;
        albedo = hit.albedo;
        diff = irradiance(hit.normal);
        spec = hit.specular *
               sg::specular_response(scene.illumination, hit.normal, -dir, hit.gloss);
        f.depth.at(y, x, 0) = (camera.rotation * p + camera.translation).z();
      } else {
        spec = sg::sg_radiance(lobes_only, dir);
      }
      for (std::size_t c = 0; c < 3; ++c) {
        f.albedo.at(y, x, c) = albedo[c];
        f.s_diff.at(y, x, c) = diff[c];
        f.s_spec.at(y, x, c) = spec[c];
        f.image.at(y, x, c) = albedo[c] * diff[c] + spec[c];
      }
    }
  }
  return f;
}

MultiViewBatch render_batch(const SceneSpec& scene, const std::vector<Camera>& cameras,
                            std::size_t width, std::size_t height) {
  MultiViewBatch batch;
  batch.illumination = scene.illumination;
  for (const auto& cam : cameras) batch.frames.push_back(render_view(scene, cam, width, height));
  return batch;
}

// ---- dataset files --------------------------------------------------------

std::string format_camera(const Camera& camera) {
  std::string out;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) out += format_double(camera.rotation(r, c)) + "\n";
    out += format_double(camera.translation[r]) + "\n";
  }
  const auto& k = camera.intrinsics;
  for (double v : {k.fx, k.fy, k.cx, k.cy}) out += format_double(v) + "\n";
  return out;
}

Camera parse_camera(const std::string& text) {
  std::istringstream in(text);
  double v[16];
  for (double& x : v) {
    if (!(in >> x)) throw FormatError("camera file: expected 16 numbers");
  }
  Camera cam;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) cam.rotation(r, c) = v[r * 4 + c];
    cam.translation[r] = v[r * 4 + 3];
  }
  cam.intrinsics = Intrinsics{v[12], v[13], v[14], v[15]};
  try {
    cam.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("camera file: ") + e.what());
  }
  return cam;
}

namespace {

std::string scene_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04zu", i);
  return buf;
}

std::string view_name(std::size_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "view_%02zu", v);
  return buf;
}

std::string format_manifest(const DatasetSummary& s) {
  std::ostringstream os;
  os << "format " << kDatasetFormat << '\n'
     << "seed " << s.seed << '\n'
     << "scenes " << s.scenes << '\n'
     << "views " << s.views << '\n'
     << "width " << s.width << '\n'
     << "height " << s.height << '\n';
  for (const auto& name : s.scene_names) os << "scene " << name << '\n';
  return os.str();
}

}  // namespace

DatasetSummary make_dataset(const SynthConfig& config, const fs::path& out_dir, bool overwrite) {
  config.validate();
  if (config.views < 2) throw ConfigError("dataset needs at least 2 views per scene");

  std::error_code ec;
  if (fs::exists(out_dir, ec)) {
    if (!fs::is_directory(out_dir, ec)) throw IoError(out_dir.string() + " is not a directory");
    if (!fs::is_empty(out_dir, ec)) {
      if (!overwrite) {
        throw ConfigError("output directory " + out_dir.string() +
                          " is not empty (set overwrite to replace it)");
      }
      fs::remove(out_dir / "manifest.txt", ec);
      for (const auto& entry : fs::directory_iterator(out_dir)) {
        if (entry.path().filename().string().rfind("scene_", 0) == 0) fs::remove_all(entry.path(), ec);
      }
    }
  }
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) {
    throw IoError("cannot create output directory " + out_dir.string());
  }

  DatasetSummary summary;
  summary.scenes = config.scenes;
  summary.views = config.views;
  summary.width = config.width;
  summary.height = config.height;
  summary.seed = config.seed;
  for (std::size_t i = 0; i < config.scenes; ++i) {
    const std::uint64_t seed = scene_seed(config.seed, i);
    const SceneSpec scene = generate_scene(seed, config);
    const auto batch = render_batch(scene, make_rig(seed, config), config.width, config.height);
    const fs::path sdir = out_dir / scene_name(i);
    fs::create_directories(sdir, ec);
    if (ec) throw IoError("cannot create " + sdir.string());
    sg::write_sgm(sdir / "sgm.txt", batch.illumination);
    for (std::size_t v = 0; v < batch.frames.size(); ++v) {
      const auto& f = batch.frames[v];
      const fs::path vdir = sdir / view_name(v);
      fs::create_directories(vdir, ec);
      if (ec) throw IoError("cannot create " + vdir.string());
      write_pfm(vdir / "image.pfm", f.image);
      write_pfm(vdir / "albedo.pfm", f.albedo);
      write_pfm(vdir / "sdiff.pfm", f.s_diff);
      write_pfm(vdir / "sspec.pfm", f.s_spec);
      write_pfm(vdir / "depth.pfm", f.depth);
      write_file_atomic(vdir / "camera.txt", format_camera(f.camera));
    }
    summary.scene_names.push_back(scene_name(i));
  }
  write_file_atomic(out_dir / "manifest.txt", format_manifest(summary));
  return summary;
}

DatasetSummary read_manifest(const fs::path& dataset_dir) {
  std::istringstream in(read_file(dataset_dir / "manifest.txt"));
  DatasetSummary s;
  std::string key;
  bool format_ok = false;
  while (in >> key) {
    if (key == "format") {
      std::string f;
      in >> f;
      if (f != kDatasetFormat) throw FormatError("manifest: unsupported format " + f);
      format_ok = true;
    } else if (key == "seed") {
      in >> s.seed;
    } else if (key == "scenes") {
      in >> s.scenes;
    } else if (key == "views") {
      in >> s.views;
    } else if (key == "width") {
      in >> s.width;
    } else if (key == "height") {
      in >> s.height;
    } else if (key == "scene") {
      std::string name;
      in >> name;
      s.scene_names.push_back(name);
    } else {
      throw FormatError("manifest: unknown key " + key);
    }
    if (!in) throw FormatError("manifest: malformed value for " + key);
  }
  if (!format_ok || s.scene_names.size() != s.scenes || s.views == 0) {
    throw FormatError("manifest: incomplete");
  }
  return s;
}

MultiViewBatch load_scene(const fs::path& scene_dir, std::size_t views) {
  MultiViewBatch batch;
  batch.illumination = sg::read_sgm(scene_dir / "sgm.txt");
  for (std::size_t v = 0; v < views; ++v) {
    const fs::path vdir = scene_dir / view_name(v);
    GroundTruthFrame f;
    f.image = read_pfm(vdir / "image.pfm");
    f.albedo = read_pfm(vdir / "albedo.pfm");
    f.s_diff = read_pfm(vdir / "sdiff.pfm");
    f.s_spec = read_pfm(vdir / "sspec.pfm");
    f.depth = read_pfm(vdir / "depth.pfm");
    f.camera = parse_camera(read_file(vdir / "camera.txt"));
    if (!f.image.same_shape(f.albedo) || !f.image.same_shape(f.s_diff) ||
        !f.image.same_shape(f.s_spec) || f.depth.height != f.image.height ||
        f.depth.width != f.image.width) {
      throw FormatError("scene " + scene_dir.string() + ": layer shapes disagree");
    }
    batch.frames.push_back(std::move(f));
  }
  return batch;
}

}  // namespace idt::scene
