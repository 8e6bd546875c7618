#pragma once

// 8-bit RGB PNG load/save, plain-text disparity grids, and dataset manifests.

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "passr/tensor.hpp"

namespace passr {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.string().c_str(), mode));
  if (!f) throw IoError("cannot open " + path.string());
  return f;
}

// Clamp to [0, 1] then round half away from zero to an 8-bit level.
inline std::uint8_t to_byte(double v) {
  if (!(v > 0.0)) return 0;  // also maps NaN to 0
  if (v >= 1.0) return 255;
  return static_cast<std::uint8_t>(std::round(v * 255.0));
}

inline void write_png(const std::filesystem::path& path, std::size_t h, std::size_t w, int color_type,
                      std::size_t channels, const std::vector<std::uint8_t>& bytes) {
  if (h == 0 || w == 0) throw IoError("cannot save an empty image");
  FilePtr f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng error writing " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < h; ++y) {
    png_write_row(png, const_cast<png_bytep>(bytes.data() + y * w * channels));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

// Reads an 8-bit RGB PNG into H x W x 3 with values k / 255.
inline Tensor<float> load_image(const std::filesystem::path& path) {
  detail::FilePtr f = detail::open_file(path, "rb");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw IoError(path.string() + " is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  // Declared before setjmp so a libpng error unwinds them normally.
  Tensor<float> img;
  std::vector<std::uint8_t> row;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng error reading " + path.string());
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (depth != 8 || color != PNG_COLOR_TYPE_RGB) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(path.string() + ": expected 8-bit RGB, got bit depth " + std::to_string(depth) +
                  " colour type " + std::to_string(color));
  }
  row.resize(static_cast<std::size_t>(w) * 3);
  img = Tensor<float>({h, w, 3});
  for (png_uint_32 y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (std::size_t n = 0; n < row.size(); ++n) img[y * row.size() + n] = static_cast<float>(row[n]) / 255.0f;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline std::vector<std::uint8_t> quantize_image(const Tensor<float>& img) {
  std::vector<std::uint8_t> bytes(img.size());
  for (std::size_t n = 0; n < img.size(); ++n) bytes[n] = detail::to_byte(img[n]);
  return bytes;
}

// Writes H x W x 3 as 8-bit RGB.
inline void save_image(const std::filesystem::path& path, const Tensor<float>& img) {
  if (img.rank() != 3 || img.extent(2) != 3) {
    throw ShapeError("save_image expects H x W x 3, got " + to_string(img.shape()));
  }
  detail::write_png(path, img.extent(0), img.extent(1), PNG_COLOR_TYPE_RGB, 3, quantize_image(img));
}

// Writes an H x W map as 8-bit grayscale, linearly mapping [lo, hi] to [0, 255].
inline void save_gray(const std::filesystem::path& path, const Tensor<float>& map, float lo = 0.0f,
                      float hi = 1.0f) {
  if (map.rank() != 2) throw ShapeError("save_gray expects H x W, got " + to_string(map.shape()));
  const float range = hi > lo ? hi - lo : 1.0f;
  std::vector<std::uint8_t> bytes(map.size());
  for (std::size_t n = 0; n < map.size(); ++n) bytes[n] = detail::to_byte((map[n] - lo) / range);
  detail::write_png(path, map.extent(0), map.extent(1), PNG_COLOR_TYPE_GRAY, 1, bytes);
}

// Disparity grid text format: "H W" header line, then H lines of W floats.
inline void save_grid(const std::filesystem::path& path, const Tensor<float>& grid) {
  if (grid.rank() != 2) throw ShapeError("save_grid expects H x W");
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string());
  out << grid.extent(0) << ' ' << grid.extent(1) << '\n'
      << std::setprecision(std::numeric_limits<float>::max_digits10);
  for (std::size_t y = 0; y < grid.extent(0); ++y) {
    for (std::size_t x = 0; x < grid.extent(1); ++x) out << (x ? " " : "") << grid(y, x);
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

inline Tensor<float> load_grid(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::size_t h = 0, w = 0;
  if (!(in >> h >> w) || h == 0 || w == 0) throw IoError(path.string() + ": bad grid header");
  Tensor<float> grid({h, w});
  for (std::size_t n = 0; n < h * w; ++n) {
    if (!(in >> grid[n])) throw IoError(path.string() + ": grid has fewer than H*W values");
  }
  float extra;
  if (in >> extra) throw IoError(path.string() + ": grid has more than H*W values");
  return grid;
}

// One manifest line: "left right [disparity]", whitespace separated, paths
// relative to the manifest's directory. Blank lines and '#' comments skipped.
struct ManifestEntry {
  std::filesystem::path left, right;
  std::filesystem::path disparity;  // empty when absent
};

inline std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  const std::filesystem::path base = path.parent_path();
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::vector<std::string> parts;
    for (std::string p; fields >> p;) parts.push_back(p);
    if (parts.empty()) continue;
    if (parts.size() < 2 || parts.size() > 3) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected 2 or 3 paths");
    }
    ManifestEntry e{base / parts[0], base / parts[1], {}};
    if (parts.size() == 3) e.disparity = base / parts[2];
    entries.push_back(std::move(e));
  }
  return entries;
}

// Paths are written relative to the manifest's directory when possible.
inline void save_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open manifest " + path.string());
  const std::filesystem::path base = path.parent_path().empty() ? "." : path.parent_path();
  auto rel = [&](const std::filesystem::path& p) {
    const auto r = std::filesystem::relative(p, base);
    return (r.empty() ? p : r).generic_string();
  };
  for (const auto& e : entries) {
    out << rel(e.left) << ' ' << rel(e.right);
    if (!e.disparity.empty()) out << ' ' << rel(e.disparity);
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace passr
