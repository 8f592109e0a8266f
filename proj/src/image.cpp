#include "klgrade/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

#include "klgrade/checkpoint.hpp"
#include "klgrade/error.hpp"

namespace klg {

std::string to_string(ImageSource source) {
  switch (source) {
    case ImageSource::synthetic: return "synthetic";
    case ImageSource::dicom: return "dicom";
    case ImageSource::crop: return "crop";
  }
  return "unknown";
}

GrayImage GrayImage::blank(std::size_t width, std::size_t height, int bit_depth,
                           ImageSource source) {
  if (width == 0 || height == 0) throw ValueError("image extent must be positive");
  if (bit_depth != 8 && bit_depth != 16) throw ValueError("bit depth must be 8 or 16");
  GrayImage img;
  img.width = width;
  img.height = height;
  img.bit_depth = bit_depth;
  img.pixels.assign(width * height, 0);
  img.source = source;
  return img;
}

void GrayImage::validate() const {
  if (width == 0 || height == 0) throw ValueError("image extent must be positive");
  if (bit_depth != 8 && bit_depth != 16) throw ValueError("bit depth must be 8 or 16");
  if (pixels.size() != width * height) throw ValueError("pixel count does not match extent");
  const auto maxv = max_value();
  for (auto v : pixels)
    if (v > maxv) throw ValueError("pixel value exceeds bit depth");
}

double box_iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
  const double iy = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
  const double inter = ix * iy;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

PixelRect box_to_pixels(const Box& box, std::size_t width, std::size_t height) {
  auto edge = [](double v, std::size_t extent) {
    const double e = std::floor(v * static_cast<double>(extent) + 0.5);
    return static_cast<long>(std::clamp(e, 0.0, static_cast<double>(extent)));
  };
  auto fix = [](long& lo, long& hi, long extent) {
    if (hi <= lo) hi = lo + 1;
    if (hi > extent) {
      hi = extent;
      lo = extent - 1;
    }
  };
  PixelRect r{edge(box.x0(), width), edge(box.y0(), height), edge(box.x1(), width),
              edge(box.y1(), height)};
  fix(r.x0, r.x1, static_cast<long>(width));
  fix(r.y0, r.y1, static_cast<long>(height));
  return r;
}

GrayImage crop(const GrayImage& img, PixelRect r) {
  const long w = static_cast<long>(img.width), h = static_cast<long>(img.height);
  r.x0 = std::clamp(r.x0, 0L, w);
  r.x1 = std::clamp(r.x1, 0L, w);
  r.y0 = std::clamp(r.y0, 0L, h);
  r.y1 = std::clamp(r.y1, 0L, h);
  if (r.width() <= 0 || r.height() <= 0) throw ValueError("crop: zero-area box after clamping");
  GrayImage out = GrayImage::blank(static_cast<std::size_t>(r.width()),
                                   static_cast<std::size_t>(r.height()), img.bit_depth,
                                   ImageSource::crop);
  for (long y = r.y0; y < r.y1; ++y)
    for (long x = r.x0; x < r.x1; ++x)
      out.at(static_cast<std::size_t>(x - r.x0), static_cast<std::size_t>(y - r.y0)) =
          img.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y));
  return out;
}

GrayImage minmax_normalize(const GrayImage& img) {
  GrayImage out = img;
  out.bit_depth = 8;
  if (img.pixels.empty()) return out;
  const auto [lo_it, hi_it] = std::minmax_element(img.pixels.begin(), img.pixels.end());
  const double lo = *lo_it, hi = *hi_it;
  if (hi == lo) {
    std::fill(out.pixels.begin(), out.pixels.end(), 0);
    return out;
  }
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const double v = std::floor((img.pixels[i] - lo) * 255.0 / (hi - lo) + 0.5);
    out.pixels[i] = static_cast<std::uint16_t>(std::clamp(v, 0.0, 255.0));
  }
  return out;
}

std::vector<double> resize_area(std::span<const double> src, std::size_t w, std::size_t h,
                                std::size_t out_w, std::size_t out_h) {
  if (src.size() != w * h || out_w == 0 || out_h == 0) throw ValueError("resize_area: bad extent");
  // Separable: each output cell averages the source span it covers, weighting
  // partially covered source pixels by their overlap.
  auto weights = [](std::size_t n_in, std::size_t n_out) {
    std::vector<std::vector<std::pair<std::size_t, double>>> taps(n_out);
    const double ratio = static_cast<double>(n_in) / static_cast<double>(n_out);
    for (std::size_t o = 0; o < n_out; ++o) {
      const double a = o * ratio, b = (o + 1) * ratio;
      for (auto i = static_cast<std::size_t>(std::floor(a));
           i < n_in && static_cast<double>(i) < b; ++i) {
        const double overlap = std::min(b, i + 1.0) - std::max(a, static_cast<double>(i));
        if (overlap > 0.0) taps[o].emplace_back(i, overlap / ratio);
      }
    }
    return taps;
  };
  const auto tx = weights(w, out_w);
  const auto ty = weights(h, out_h);
  std::vector<double> rows(h * out_w, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      double acc = 0.0;
      for (auto [i, wt] : tx[ox]) acc += wt * src[y * w + i];
      rows[y * out_w + ox] = acc;
    }
  std::vector<double> out(out_w * out_h, 0.0);
  for (std::size_t oy = 0; oy < out_h; ++oy)
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      double acc = 0.0;
      for (auto [j, wt] : ty[oy]) acc += wt * rows[j * out_w + ox];
      out[oy * out_w + ox] = acc;
    }
  return out;
}

std::vector<double> resize_area(const GrayImage& img, std::size_t out_w, std::size_t out_h) {
  std::vector<double> src(img.pixels.begin(), img.pixels.end());
  return resize_area(src, img.width, img.height, out_w, out_h);
}

GrayImage mirror(const GrayImage& img) {
  GrayImage out = img;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) out.at(img.width - 1 - x, y) = img.at(x, y);
  return out;
}

std::vector<std::uint8_t> encode_pgm(const GrayImage& img) {
  img.validate();
  const std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) +
                             "\n" + std::to_string(img.max_value()) + "\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (auto v : img.pixels) {
    if (img.bit_depth == 16) out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  }
  return out;
}

GrayImage decode_pgm(std::span<const std::uint8_t> bytes) {
  std::size_t at = 0;
  auto skip_space = [&] {
    while (at < bytes.size()) {
      if (bytes[at] == '#') {
        while (at < bytes.size() && bytes[at] != '\n') ++at;
      } else if (std::isspace(bytes[at])) {
        ++at;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&]() -> std::size_t {
    skip_space();
    std::size_t v = 0, digits = 0;
    while (at < bytes.size() && std::isdigit(bytes[at])) {
      v = v * 10 + (bytes[at++] - '0');
      if (++digits > 9) throw IoError("PGM header value too large");
    }
    if (digits == 0) throw IoError("PGM header malformed");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw IoError("not a binary PGM (P5)");
  at = 2;
  const auto w = read_uint(), h = read_uint(), maxval = read_uint();
  if (at >= bytes.size() || !std::isspace(bytes[at])) throw IoError("PGM header malformed");
  ++at;
  if (w == 0 || h == 0) throw IoError("PGM extent must be positive");
  if (maxval == 0 || maxval > 65535) throw IoError("PGM maxval out of range");
  const int depth = maxval < 256 ? 8 : 16;
  const std::size_t bpp = depth == 8 ? 1 : 2;
  if ((bytes.size() - at) / bpp / w < h) throw IoError("PGM pixel data truncated");
  GrayImage img = GrayImage::blank(w, h, depth);
  for (std::size_t i = 0; i < w * h; ++i) {
    std::uint16_t v = bytes[at++];
    if (bpp == 2) v = static_cast<std::uint16_t>((v << 8) | bytes[at++]);
    if (v > maxval) throw IoError("PGM pixel exceeds maxval");
    img.pixels[i] = v;
  }
  return img;
}

void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  write_file_bytes(path, encode_pgm(img));
}

GrayImage read_pgm(const std::filesystem::path& path) {
  return decode_pgm(read_file_bytes(path));
}

}  // namespace klg
