#include "idt/sg.hpp"

#include "idt/io.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>

namespace idt::sg {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Cosine-weighted spiral points on the +z hemisphere, cached per sample count.
const std::vector<Vec3>& spiral_points(std::size_t n) {
  static std::mutex mu;
  static std::map<std::size_t, std::vector<Vec3>> cache;
  std::lock_guard lock(mu);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  const double golden = kPi * (3.0 - std::sqrt(5.0));
  std::vector<Vec3> pts(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = std::sqrt((static_cast<double>(i) + 0.5) / static_cast<double>(n));
    const double phi = golden * static_cast<double>(i);
    pts[i] = Vec3(r * std::cos(phi), r * std::sin(phi), std::sqrt(std::max(0.0, 1.0 - r * r)));
  }
  return cache.emplace(n, std::move(pts)).first->second;
}

// Tangent built from the first canonical lobe axis that is not parallel to n.
Vec3 tangent_for(const SGMixture& mixture, const Vec3& n) {
  std::vector<double> lum;
  std::vector<double> sharp;
  for (const auto& l : mixture.lobes) {
    lum.push_back(luminance(l.amplitude));
    sharp.push_back(l.sharpness);
  }
  for (std::size_t idx : canonical_order(lum, sharp)) {
    const Vec3& a = mixture.lobes[idx].axis;
    Vec3 t = a - a.dot(n) * n;
    if (t.norm() > 1e-6) return t.normalized();
  }
  const Vec3 helper = std::abs(n.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  return (helper - helper.dot(n) * n).normalized();
}

void require_unit(const Vec3& v, const char* what) {
  if (!v.allFinite() || std::abs(v.norm() - 1.0) > 1e-6) {
    throw SgError(std::string(what) + " must be a unit vector");
  }
}

}  // namespace

double luminance(const Vec3& rgb) {
  return 0.2126 * rgb.x() + 0.7152 * rgb.y() + 0.0722 * rgb.z();
}

void validate(const SGMixture& mixture) {
  if (mixture.lobes.empty()) throw SgError("mixture needs at least one lobe");
  for (const auto& l : mixture.lobes) {
    if (!l.axis.allFinite() || std::abs(l.axis.norm() - 1.0) > 1e-9) {
      throw SgError("lobe axis must be unit length");
    }
    if (!(l.sharpness > 0.0) || !std::isfinite(l.sharpness)) {
      throw SgError("lobe sharpness must be positive");
    }
    if (!l.amplitude.allFinite() || (l.amplitude.array() < 0.0).any()) {
      throw SgError("lobe amplitude must be nonnegative");
    }
  }
  if (!mixture.ambient.allFinite() || (mixture.ambient.array() < 0.0).any()) {
    throw SgError("ambient must be nonnegative");
  }
}

Vec3 sg_radiance(const SGMixture& mixture, const Vec3& direction) {
  require_unit(direction, "direction");
  Vec3 out = mixture.ambient;
  for (const auto& l : mixture.lobes) {
    out += l.amplitude * std::exp(l.sharpness * (direction.dot(l.axis) - 1.0));
  }
  return out.cwiseMax(0.0);
}

Vec3 diffuse_irradiance(const SGMixture& mixture, const Vec3& normal, std::size_t samples) {
  require_unit(normal, "normal");
  if (samples == 0) throw SgError("sample count must be positive");
  const Vec3 n = normal.normalized();
  const Vec3 t = tangent_for(mixture, n);
  const Vec3 b = n.cross(t);

  struct LocalLobe {
    Vec3 axis;
    double sharpness;
    Vec3 amplitude;
  };
  std::vector<LocalLobe> local;
  local.reserve(mixture.lobes.size());
  for (const auto& l : mixture.lobes) {
    local.push_back({Vec3(l.axis.dot(t), l.axis.dot(b), l.axis.dot(n)), l.sharpness, l.amplitude});
  }

  Vec3 acc = Vec3::Zero();
  for (const Vec3& w : spiral_points(samples)) {
    for (const auto& l : local) {
      acc += l.amplitude * std::exp(l.sharpness * (w.dot(l.axis) - 1.0));
    }
  }
  return (mixture.ambient + acc / static_cast<double>(samples)).cwiseMax(0.0);
}

Vec3 specular_response(const SGMixture& mixture, const Vec3& normal, const Vec3& view_dir,
                       double gloss) {
  require_unit(normal, "normal");
  require_unit(view_dir, "view direction");
  if (!(gloss > 0.0)) throw SgError("gloss must be positive");
  const double ndotv = normal.dot(view_dir);
  if (ndotv <= 0.0) return Vec3::Zero();
  const Vec3 r = (2.0 * ndotv * normal - view_dir).normalized();
  Vec3 out = mixture.ambient;
  for (const auto& l : mixture.lobes) {
    const double sharp = l.sharpness * gloss / (l.sharpness + gloss);
    out += l.amplitude * std::exp(sharp * (r.dot(l.axis) - 1.0));
  }
  return out.cwiseMax(0.0);
}

std::vector<std::size_t> canonical_order(std::span<const double> luminances,
                                         std::span<const double> sharpness) {
  std::vector<std::size_t> order(luminances.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (luminances[a] != luminances[b]) return luminances[a] > luminances[b];
    return sharpness[a] > sharpness[b];
  });
  return order;
}

SGMixture canonicalize(SGMixture mixture) {
  std::vector<double> lum;
  std::vector<double> sharp;
  for (const auto& l : mixture.lobes) {
    lum.push_back(luminance(l.amplitude));
    sharp.push_back(l.sharpness);
  }
  SGMixture out;
  out.ambient = mixture.ambient;
  for (std::size_t idx : canonical_order(lum, sharp)) out.lobes.push_back(mixture.lobes[idx]);
  return out;
}

double positive_map(double raw) {
  return std::max(raw, 0.0) + std::log1p(std::exp(-std::abs(raw)));
}

double positive_map_inverse(double value) {
  const double y = std::max(value, kPositiveFloor);
  // log(exp(y) - 1), stable for both small and large y.
  return y > 30.0 ? y + std::log1p(-std::exp(-y)) : std::log(std::expm1(y));
}

std::size_t packed_size(std::size_t lobes) { return kLobeParams * lobes + 3; }

std::vector<double> pack(const SGMixture& mixture) {
  validate(mixture);
  std::vector<double> raw;
  raw.reserve(packed_size(mixture.lobes.size()));
  for (const auto& l : mixture.lobes) {
    raw.insert(raw.end(), {l.axis.x(), l.axis.y(), l.axis.z()});
    raw.push_back(positive_map_inverse(l.sharpness));
    for (int c = 0; c < 3; ++c) raw.push_back(positive_map_inverse(l.amplitude[c]));
  }
  for (int c = 0; c < 3; ++c) raw.push_back(positive_map_inverse(mixture.ambient[c]));
  return raw;
}

SGMixture unpack(std::span<const double> raw, std::size_t lobes) {
  if (lobes == 0) throw SgError("unpack: lobe count must be positive");
  if (raw.size() != packed_size(lobes)) {
    throw SgError("unpack: expected " + std::to_string(packed_size(lobes)) + " values, got " +
                  std::to_string(raw.size()));
  }
  SGMixture m;
  for (std::size_t k = 0; k < lobes; ++k) {
    const double* p = raw.data() + kLobeParams * k;
    SGLobe l;
    const Vec3 a(p[0], p[1], p[2]);
    const double len = a.norm();
    l.axis = len < 1e-12 || !std::isfinite(len) ? Vec3::UnitZ() : Vec3(a / len);
    l.sharpness = std::max(positive_map(p[3]), std::numeric_limits<double>::min());
    l.amplitude = Vec3(positive_map(p[4]), positive_map(p[5]), positive_map(p[6]));
    m.lobes.push_back(l);
  }
  const double* amb = raw.data() + kLobeParams * lobes;
  m.ambient = Vec3(positive_map(amb[0]), positive_map(amb[1]), positive_map(amb[2]));
  return m;
}

SGMixture rotated(const SGMixture& mixture, const Eigen::Matrix3d& rotation) {
  SGMixture out = mixture;
  for (auto& l : out.lobes) l.axis = rotation * l.axis;
  return out;
}

std::string format_sgm(const SGMixture& mixture) {
  std::ostringstream os;
  os << mixture.lobes.size() << '\n';
  os << format_double(mixture.ambient.x()) << ' ' << format_double(mixture.ambient.y()) << ' '
     << format_double(mixture.ambient.z()) << '\n';
  for (const auto& l : mixture.lobes) {
    os << format_double(l.axis.x()) << ' ' << format_double(l.axis.y()) << ' '
       << format_double(l.axis.z()) << ' ' << format_double(l.sharpness) << ' '
       << format_double(l.amplitude.x()) << ' ' << format_double(l.amplitude.y()) << ' '
       << format_double(l.amplitude.z()) << '\n';
  }
  return os.str();
}

SGMixture parse_sgm(const std::string& text) {
  std::istringstream in(text);
  long long k = 0;
  if (!(in >> k) || k < 1) throw FormatError("sgm: bad lobe count");
  SGMixture m;
  if (!(in >> m.ambient.x() >> m.ambient.y() >> m.ambient.z())) {
    throw FormatError("sgm: bad ambient line");
  }
  for (long long i = 0; i < k; ++i) {
    SGLobe l;
    if (!(in >> l.axis.x() >> l.axis.y() >> l.axis.z() >> l.sharpness >> l.amplitude.x() >>
          l.amplitude.y() >> l.amplitude.z())) {
      throw FormatError("sgm: bad lobe line " + std::to_string(i + 1));
    }
    const double len = l.axis.norm();
    if (std::abs(len - 1.0) > 1e-12 && len > 0.0) l.axis /= len;
    m.lobes.push_back(l);
  }
  try {
    validate(m);
  } catch (const SgError& e) {
    throw FormatError(std::string("sgm: ") + e.what());
  }
  return m;
}

SGMixture read_sgm(const std::filesystem::path& path) { return parse_sgm(read_file(path)); }

void write_sgm(const std::filesystem::path& path, const SGMixture& mixture) {
  write_file_atomic(path, format_sgm(mixture));
}

}  // namespace idt::sg
