#pragma once

// Image files: binary PPM (P6) read and written in-house, PNG through libpng's
// simplified API. Images are (1, 3, H, W) doubles in [0, 1].

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lsnet/tensor.hpp"

namespace lsnet {

/// Unreadable or inconsistent input data. Carries the offending path.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace io {

using Image = Tensor<double>;
namespace fs = std::filesystem;

namespace detail {

inline std::string lower_extension(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

inline Image from_interleaved(const std::vector<std::uint8_t>& px, std::size_t h, std::size_t w) {
  Image img(Shape(1, 3, h, w));
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t c = 0; c < 3; ++c) img.plane(0, c)[i] = px[i * 3 + c] / 255.0;
  return img;
}

inline std::vector<std::uint8_t> to_interleaved(const Image& img) {
  const std::size_t P = img.shape().plane();
  std::vector<std::uint8_t> px(P * 3);
  for (std::size_t i = 0; i < P; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(img.plane(0, c)[i], 0.0, 1.0);
      px[i * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  return px;
}

// Skips whitespace and '#' comments between PPM header fields.
inline std::size_t ppm_field(std::istream& in, const fs::path& path) {
  for (;;) {
    const int c = in.peek();
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  std::size_t v = 0;
  if (!(in >> v)) throw DataError(path.string() + ": malformed PPM header");
  return v;
}

inline Image read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path.string());
  char magic[2] = {};
  in.read(magic, 2);
  if (magic[0] != 'P' || magic[1] != '6') throw DataError(path.string() + ": not a binary PPM (P6)");
  const std::size_t w = ppm_field(in, path), h = ppm_field(in, path), maxval = ppm_field(in, path);
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw DataError(path.string() + ": bad PPM extents");
  in.get();  // single whitespace byte before the raster
  const std::size_t bytes = maxval < 256 ? 1 : 2;
  std::vector<unsigned char> raw(w * h * 3 * bytes);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw DataError(path.string() + ": truncated PPM");
  Image img(Shape(1, 3, h, w));
  for (std::size_t i = 0; i < w * h; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const std::size_t k = (i * 3 + c) * bytes;
      const double v = bytes == 1 ? raw[k] : static_cast<double>(raw[k] << 8 | raw[k + 1]);
      img.plane(0, c)[i] = v / static_cast<double>(maxval);
    }
  return img;
}

inline void write_ppm(const fs::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write image " + path.string());
  out << "P6\n" << img.shape()[3] << ' ' << img.shape()[2] << "\n255\n";
  const auto px = to_interleaved(img);
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!out) throw DataError("cannot write image " + path.string());
}

inline Image read_png(const fs::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str()))
    throw DataError(path.string() + ": " + png.message);
  png.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, px.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw DataError(path.string() + ": " + msg);
  }
  return from_interleaved(px, png.height, png.width);
}

inline void write_png(const fs::path& path, const Image& img) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.shape()[3]);
  png.height = static_cast<png_uint_32>(img.shape()[2]);
  png.format = PNG_FORMAT_RGB;
  const auto px = to_interleaved(img);
  if (!png_image_write_to_file(&png, path.c_str(), 0, px.data(), 0, nullptr))
    throw DataError("cannot write image " + path.string() + ": " + png.message);
}

inline void require_rgb(const Image& img, const fs::path& path) {
  const Shape& s = img.shape();
  if (s[0] != 1 || s[1] != 3 || s[2] == 0 || s[3] == 0)
    throw DataError("cannot write " + path.string() + ": expected a (1, 3, H, W) image, got " + s.str());
}

}  // namespace detail

/// Reads a .ppm or .png file. Any other extension is sniffed by magic bytes.
inline Image read_image(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("image not found: " + path.string());
  const std::string ext = detail::lower_extension(path);
  if (ext == ".ppm") return detail::read_ppm(path);
  if (ext == ".png") return detail::read_png(path);
  std::ifstream in(path, std::ios::binary);
  char magic[2] = {};
  in.read(magic, 2);
  if (magic[0] == 'P' && magic[1] == '6') return detail::read_ppm(path);
  return detail::read_png(path);
}

/// Writes 8-bit RGB, values clamped to [0, 1] and rounded. Format follows the
/// extension: .ppm for PPM, anything else PNG.
inline void write_image(const fs::path& path, const Image& img) {
  detail::require_rgb(img, path);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (detail::lower_extension(path) == ".ppm")
    detail::write_ppm(path, img);
  else
    detail::write_png(path, img);
}

/// Bilinear resampling with half-pixel centers; exact copy when the size is
/// unchanged.
inline Image resize_bilinear(const Image& img, std::size_t height, std::size_t width) {
  const Shape s = img.shape();
  if (s[2] == height && s[3] == width) return img;
  require_shape(height > 0 && width > 0, "resize_bilinear: target extents must be positive");
  Image out(Shape(s[0], s[1], height, width));
  const double sy = static_cast<double>(s[2]) / static_cast<double>(height);
  const double sx = static_cast<double>(s[3]) / static_cast<double>(width);
  auto axis = [](double pos, std::size_t n, std::size_t& i0, std::size_t& i1, double& f) {
    pos = std::clamp(pos, 0.0, static_cast<double>(n - 1));
    i0 = static_cast<std::size_t>(pos);
    i1 = std::min(i0 + 1, n - 1);
    f = pos - static_cast<double>(i0);
  };
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t c = 0; c < s[1]; ++c) {
      const auto src = img.plane(n, c);
      auto dst = out.plane(n, c);
      for (std::size_t i = 0; i < height; ++i) {
        std::size_t y0, y1;
        double fy;
        axis((static_cast<double>(i) + 0.5) * sy - 0.5, s[2], y0, y1, fy);
        for (std::size_t j = 0; j < width; ++j) {
          std::size_t x0, x1;
          double fx;
          axis((static_cast<double>(j) + 0.5) * sx - 0.5, s[3], x0, x1, fx);
          const double top = src[y0 * s[3] + x0] * (1 - fx) + src[y0 * s[3] + x1] * fx;
          const double bot = src[y1 * s[3] + x0] * (1 - fx) + src[y1 * s[3] + x1] * fx;
          dst[i * width + j] = top * (1 - fy) + bot * fy;
        }
      }
    }
  return out;
}

}  // namespace io
}  // namespace lsnet
