#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <png.h>

#include "lesionsynth/error.hpp"

namespace lesionsynth {

/// Integer pixel rectangle, half-open: columns [x, x + w), rows [y, y + h).
struct PixelRect {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  bool contains(int px, int py) const noexcept {
    return px >= x && px < x + w && py >= y && py < y + h;
  }
  long area() const noexcept { return static_cast<long>(w) * h; }
  friend bool operator==(const PixelRect &, const PixelRect &) = default;
};

/// 8-bit single-channel image, row-major.
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  GrayImage() = default;
  GrayImage(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {
    if (w < 0 || h < 0)
      throw ImageError("negative image dimensions");
  }

  std::uint8_t &at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  bool empty() const noexcept { return pixels.empty(); }
  friend bool operator==(const GrayImage &, const GrayImage &) = default;
};

inline GrayImage crop(const GrayImage &img, const PixelRect &r) {
  if (r.x < 0 || r.y < 0 || r.w <= 0 || r.h <= 0 || r.x + r.w > img.width ||
      r.y + r.h > img.height)
    throw ImageError("crop rectangle outside image");
  GrayImage out(r.w, r.h);
  for (int y = 0; y < r.h; ++y)
    std::copy_n(&img.pixels[static_cast<std::size_t>(r.y + y) * img.width + r.x], r.w,
                &out.pixels[static_cast<std::size_t>(y) * r.w]);
  return out;
}

/// Nearest-neighbour resampling using pixel-centre alignment.
inline GrayImage resize_nearest(const GrayImage &src, int w, int h) {
  if (src.empty() || w <= 0 || h <= 0)
    throw ImageError("resize of empty image or to empty size");
  GrayImage out(w, h);
  for (int y = 0; y < h; ++y) {
    const int sy = static_cast<int>((2L * y + 1) * src.height / (2L * h));
    for (int x = 0; x < w; ++x) {
      const int sx = static_cast<int>((2L * x + 1) * src.width / (2L * w));
      out.at(x, y) = src.at(sx, sy);
    }
  }
  return out;
}

/// Bilinear resampling using pixel-centre alignment; same size is the identity.
inline GrayImage resize_bilinear(const GrayImage &src, int w, int h) {
  if (src.empty() || w <= 0 || h <= 0)
    throw ImageError("resize of empty image or to empty size");
  if (w == src.width && h == src.height)
    return src;
  GrayImage out(w, h);
  const double sx_scale = static_cast<double>(src.width) / w;
  const double sy_scale = static_cast<double>(src.height) / h;
  for (int y = 0; y < h; ++y) {
    double fy = std::clamp((y + 0.5) * sy_scale - 0.5, 0.0, src.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double ty = fy - y0;
    for (int x = 0; x < w; ++x) {
      double fx = std::clamp((x + 0.5) * sx_scale - 0.5, 0.0, src.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double tx = fx - x0;
      const double top = src.at(x0, y0) * (1 - tx) + src.at(x1, y0) * tx;
      const double bot = src.at(x0, y1) * (1 - tx) + src.at(x1, y1) * tx;
      out.at(x, y) = static_cast<std::uint8_t>(std::lround(top * (1 - ty) + bot * ty));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// PGM (binary P5, maxval <= 255)

namespace detail {

inline void skip_pnm_space(std::istream &in) {
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string ignored;
      std::getline(in, ignored);
    } else if (c != EOF && std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

inline int read_pnm_int(std::istream &in, const char *field) {
  skip_pnm_space(in);
  int v = -1;
  if (!(in >> v) || v < 0)
    throw ImageError(std::string("PGM: bad ") + field);
  return v;
}

} // namespace detail

inline GrayImage decode_pgm(const std::vector<std::uint8_t> &bytes) {
  std::string buf(bytes.begin(), bytes.end());
  std::istringstream in(buf);
  char magic[2] = {};
  in.read(magic, 2);
  if (!in || magic[0] != 'P')
    throw ImageError("PGM: missing magic");
  if (magic[1] == '6')
    throw ImageError("multi-channel image (PPM) not supported; grayscale only");
  if (magic[1] != '5')
    throw ImageError("PGM: only binary P5 is supported");
  const int w = detail::read_pnm_int(in, "width");
  const int h = detail::read_pnm_int(in, "height");
  const int maxval = detail::read_pnm_int(in, "maxval");
  if (maxval <= 0 || maxval > 255)
    throw ImageError("PGM: only 8-bit images are supported");
  in.get(); // single whitespace before raster
  GrayImage img(w, h);
  in.read(reinterpret_cast<char *>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
    throw ImageError("PGM: truncated raster");
  return img;
}

inline std::vector<std::uint8_t> encode_pgm(const GrayImage &img) {
  const std::string header =
      "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

// ---------------------------------------------------------------------------
// PNG via libpng's simplified API

inline GrayImage decode_png(const std::vector<std::uint8_t> &bytes) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw ImageError(std::string("PNG: ") + image.message);
  if (image.format & (PNG_FORMAT_FLAG_COLOR | PNG_FORMAT_FLAG_ALPHA)) {
    png_image_free(&image);
    throw ImageError("multi-channel PNG not supported; grayscale only");
  }
  image.format = PNG_FORMAT_GRAY;
  GrayImage img(static_cast<int>(image.width), static_cast<int>(image.height));
  if (!png_image_finish_read(&image, nullptr, img.pixels.data(), 0, nullptr))
    throw ImageError(std::string("PNG: ") + image.message);
  return img;
}

inline std::vector<std::uint8_t> encode_png(const GrayImage &img) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, img.pixels.data(), 0, nullptr))
    throw ImageError(std::string("PNG: ") + image.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, img.pixels.data(), 0, nullptr))
    throw ImageError(std::string("PNG: ") + image.message);
  out.resize(size);
  return out;
}

// ---------------------------------------------------------------------------
// File helpers

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes to a sibling temporary file and renames it into place.
inline void write_file_atomic(const std::filesystem::path &path,
                              const std::vector<std::uint8_t> &bytes) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out)
      throw Error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char *>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out)
      throw Error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

/// Decodes a PGM (P5) or grayscale PNG, sniffing the format from its magic bytes.
inline GrayImage decode_image(const std::vector<std::uint8_t> &bytes) {
  static constexpr std::uint8_t png_sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::equal(png_sig, png_sig + 8, bytes.begin()))
    return decode_png(bytes);
  if (bytes.size() >= 2 && bytes[0] == 'P')
    return decode_pgm(bytes);
  throw ImageError("unrecognised image format");
}

inline GrayImage load_image(const std::filesystem::path &path) {
  try {
    return decode_image(read_file_bytes(path));
  } catch (const ImageError &e) {
    throw ImageError(path.string() + ": " + e.what());
  }
}

inline void save_image(const std::filesystem::path &path, const GrayImage &img) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  write_file_atomic(path, ext == ".png" ? encode_png(img) : encode_pgm(img));
}

} // namespace lesionsynth
