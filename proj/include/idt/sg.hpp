#pragma once

// Spherical Gaussian mixture illumination.
//
// A lobe evaluates to  mu * exp(lambda * (dot(w, axis) - 1))  and a mixture is
// the sum of its lobes plus a constant ambient term. Mixtures are kept in a
// canonical order (descending luminance of mu, ties by descending lambda) so
// that parameter vectors of two mixtures can be compared lobe by lobe.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstddef>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace idt::sg {

using Vec3 = Eigen::Vector3d;

inline constexpr std::size_t kIrradianceSamples = 2048;
inline constexpr std::size_t kDefaultLobes = 3;
// Floats per lobe in a packed vector: axis(3) sharpness(1) amplitude(3).
inline constexpr std::size_t kLobeParams = 7;
// Smallest value the positive map is inverted at; pack() clamps to it.
inline constexpr double kPositiveFloor = 1e-8;

class SgError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct SGLobe {
  Vec3 axis = Vec3::UnitZ();
  double sharpness = 1.0;
  Vec3 amplitude = Vec3::Zero();
};

struct SGMixture {
  std::vector<SGLobe> lobes;
  Vec3 ambient = Vec3::Zero();
};

double luminance(const Vec3& rgb);

// Throws SgError if a lobe or the ambient term violates the invariants.
void validate(const SGMixture& mixture);

Vec3 sg_radiance(const SGMixture& mixture, const Vec3& direction);

// Cosine-weighted hemisphere integral of the radiance, divided by pi.
// Ambient is integrated analytically; lobes use a deterministic
// cosine-weighted spiral quadrature in a frame tied to the normal and the
// mixture so the result is equivariant under a joint rotation.
Vec3 diffuse_irradiance(const SGMixture& mixture, const Vec3& normal,
                        std::size_t samples = kIrradianceSamples);

// Radiance at the mirror direction r = 2(n.v)n - v of a mixture whose lobe
// sharpness is convolved with a gloss lobe: lambda' = lambda*gloss/(lambda+gloss).
// Amplitudes and ambient are kept. Zero when n.v <= 0.
Vec3 specular_response(const SGMixture& mixture, const Vec3& normal, const Vec3& view_dir,
                       double gloss);

SGMixture canonicalize(SGMixture mixture);
// Permutation that sorts lobes into canonical order: result[i] is the source
// index of the i-th canonical lobe.
std::vector<std::size_t> canonical_order(std::span<const double> luminances,
                                         std::span<const double> sharpness);

// softplus and its inverse (inverse clamps its input at kPositiveFloor).
double positive_map(double raw);
double positive_map_inverse(double value);

std::size_t packed_size(std::size_t lobes);
// Raw vector of length 7K+3 such that unpack(pack(m), K) reproduces m.
std::vector<double> pack(const SGMixture& mixture);
SGMixture unpack(std::span<const double> raw, std::size_t lobes);

// Mixture rotated by R (axes only).
SGMixture rotated(const SGMixture& mixture, const Eigen::Matrix3d& rotation);

// Text format: "K", ambient RGB, then K lines "xi_x xi_y xi_z lambda mu_r mu_g mu_b".
std::string format_sgm(const SGMixture& mixture);
SGMixture parse_sgm(const std::string& text);
SGMixture read_sgm(const std::filesystem::path& path);
void write_sgm(const std::filesystem::path& path, const SGMixture& mixture);

}  // namespace idt::sg
