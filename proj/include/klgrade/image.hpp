#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace klg {

enum class ImageSource { synthetic, dicom, crop };

std::string to_string(ImageSource source);

// Single-channel raster, row-major, values < 2^bit_depth.
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  int bit_depth = 8;
  std::vector<std::uint16_t> pixels;
  ImageSource source = ImageSource::synthetic;

  static GrayImage blank(std::size_t width, std::size_t height, int bit_depth = 8,
                         ImageSource source = ImageSource::synthetic);

  std::uint16_t at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
  std::uint16_t& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  std::uint32_t max_value() const { return (1u << bit_depth) - 1u; }
  // Throws ValueError when the invariants do not hold.
  void validate() const;

  bool operator==(const GrayImage&) const = default;
};

// Half-open integer rectangle [x0, x1) x [y0, y1); may extend past the image
// before clamping.
struct PixelRect {
  long x0 = 0;
  long y0 = 0;
  long x1 = 0;
  long y1 = 0;

  long width() const { return x1 - x0; }
  long height() const { return y1 - y0; }
  bool operator==(const PixelRect&) const = default;
};

// Box in normalized image coordinates: center and extent, all in [0,1].
struct Box {
  double cx = 0.5;
  double cy = 0.5;
  double w = 1.0;
  double h = 1.0;

  double x0() const { return cx - w / 2; }
  double x1() const { return cx + w / 2; }
  double y0() const { return cy - h / 2; }
  double y1() const { return cy + h / 2; }
  bool operator==(const Box&) const = default;
};

double box_iou(const Box& a, const Box& b);

// Round a normalized box to a pixel rectangle (edges rounded half up),
// clamped inside width x height, at least 1x1.
PixelRect box_to_pixels(const Box& box, std::size_t width, std::size_t height);

// Exact sub-raster after clamping the rectangle to the image; source = crop.
GrayImage crop(const GrayImage& img, PixelRect rect);

// Affine rescale to 8-bit [0,255], round half up; constant images map to 0.
GrayImage minmax_normalize(const GrayImage& img);

// Area-averaging resample of a float raster to out_w x out_h.
std::vector<double> resize_area(std::span<const double> src, std::size_t w, std::size_t h,
                                std::size_t out_w, std::size_t out_h);
std::vector<double> resize_area(const GrayImage& img, std::size_t out_w, std::size_t out_h);

// Horizontal mirror.
GrayImage mirror(const GrayImage& img);

// Binary PGM (P5), 8-bit (maxval 255) or 16-bit big-endian (maxval 65535).
std::vector<std::uint8_t> encode_pgm(const GrayImage& img);
GrayImage decode_pgm(std::span<const std::uint8_t> bytes);
void write_pgm(const std::filesystem::path& path, const GrayImage& img);
GrayImage read_pgm(const std::filesystem::path& path);

}  // namespace klg
