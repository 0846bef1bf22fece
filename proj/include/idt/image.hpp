#pragma once

// Float64 images in interleaved HWC layout and PFM (float32) file I/O.

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

namespace idt {

struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
      : height(h), width(w), channels(c), data(h * w * c, fill) {}

  std::size_t pixels() const { return height * width; }
  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }

  double& at(std::size_t y, std::size_t x, std::size_t c) {
    return data[(y * width + x) * channels + c];
  }
  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return data[(y * width + x) * channels + c];
  }

  friend bool operator==(const Image&, const Image&) = default;
};

// PFM: "PF" (3 channels) or "Pf" (1 channel), little-endian (scale -1.0),
// rows stored bottom to top.
std::string encode_pfm(const Image& image);
Image decode_pfm(const std::string& bytes);
void write_pfm(const std::filesystem::path& path, const Image& image);
Image read_pfm(const std::filesystem::path& path);

// Rounds every sample through float32, as a PFM round trip would.
Image to_float32_precision(const Image& image);

}  // namespace idt
