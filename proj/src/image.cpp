#include "idt/image.hpp"

#include "idt/io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <sstream>

namespace idt {

namespace {

static_assert(std::endian::native == std::endian::little, "PFM writer assumes a little-endian host");

}  // namespace

std::string encode_pfm(const Image& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw FormatError("pfm: only 1- or 3-channel images are supported");
  }
  if (image.empty()) throw FormatError("pfm: empty image");
  std::string out = image.channels == 3 ? "PF\n" : "Pf\n";
  out += std::to_string(image.width) + " " + std::to_string(image.height) + "\n-1.0\n";
  const std::size_t header = out.size();
  out.resize(header + image.size() * sizeof(float));
  char* dst = out.data() + header;
  const std::size_t row = image.width * image.channels;
  for (std::size_t y = 0; y < image.height; ++y) {
    const std::size_t src_row = image.height - 1 - y;
    for (std::size_t i = 0; i < row; ++i) {
      const float f = static_cast<float>(image.data[src_row * row + i]);
      std::memcpy(dst, &f, sizeof f);
      dst += sizeof f;
    }
  }
  return out;
}

Image decode_pfm(const std::string& bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  const std::string magic = token();
  std::size_t channels = 0;
  if (magic == "PF") {
    channels = 3;
  } else if (magic == "Pf") {
    channels = 1;
  } else {
    throw FormatError("pfm: bad magic");
  }
  long long w = 0;
  long long h = 0;
  double scale = 0.0;
  try {
    w = std::stoll(token());
    h = std::stoll(token());
    scale = std::stod(token());
  } catch (const std::exception&) {
    throw FormatError("pfm: malformed header");
  }
  if (w <= 0 || h <= 0) throw FormatError("pfm: bad dimensions");
  if (scale >= 0.0) throw FormatError("pfm: big-endian files are not supported");
  ++pos;  // single whitespace byte after the scale
  Image img(static_cast<std::size_t>(h), static_cast<std::size_t>(w), channels);
  if (bytes.size() - pos < img.size() * sizeof(float)) throw FormatError("pfm: truncated data");
  const char* src = bytes.data() + pos;
  const std::size_t row = img.width * channels;
  for (std::size_t y = 0; y < img.height; ++y) {
    const std::size_t dst_row = img.height - 1 - y;
    for (std::size_t i = 0; i < row; ++i) {
      float f;
      std::memcpy(&f, src, sizeof f);
      src += sizeof f;
      img.data[dst_row * row + i] = f;
    }
  }
  return img;
}

void write_pfm(const std::filesystem::path& path, const Image& image) {
  write_file_atomic(path, encode_pfm(image));
}

Image read_pfm(const std::filesystem::path& path) { return decode_pfm(read_file(path)); }

Image to_float32_precision(const Image& image) {
  Image out = image;
  for (auto& v : out.data) v = static_cast<float>(v);
  return out;
}

}  // namespace idt
