#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include <gtest/gtest.h>

#include "klgrade/dicom.hpp"
#include "klgrade/error.hpp"
#include "klgrade/image.hpp"
#include "klgrade/rng.hpp"
#include "support/dicom_goldens.hpp"
#include "support/dicom_writer.hpp"

using namespace klg;
using klg::testing::mono_dicom;
using klg::testing::MonoSpec;
using klg::testing::golden_4x4;

namespace {

GrayImage raster(std::size_t w, std::size_t h, std::vector<std::uint16_t> px, int depth = 8) {
  GrayImage g = GrayImage::blank(w, h, depth);
  g.pixels = std::move(px);
  return g;
}

DicomError::Kind error_kind(const std::vector<std::uint8_t>& bytes) {
  try {
    parse_dicom(bytes);
  } catch (const DicomError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected a DicomError";
  return DicomError::Kind::corrupt;
}

}  // namespace

TEST(Dicom, GoldenHandAssembled) {
  const auto img = parse_dicom(golden_4x4()).image;
  ASSERT_EQ(img.width, 4u);
  ASSERT_EQ(img.height, 4u);
  EXPECT_EQ(img.bit_depth, 16);
  EXPECT_EQ(img.source, ImageSource::dicom);
  for (std::uint16_t v = 0; v < 16; ++v) EXPECT_EQ(img.pixels[v], v);
}

TEST(Dicom, ReferenceWriterAgreesWithGolden) {
  std::vector<std::uint16_t> v(16);
  std::iota(v.begin(), v.end(), 0);
  EXPECT_EQ(parse_dicom(mono_dicom({}, v)).image, parse_dicom(golden_4x4()).image);
}

TEST(Dicom, Monochrome1Inverted) {
  std::vector<std::uint16_t> v(16);
  std::iota(v.begin(), v.end(), 0);
  MonoSpec s;
  s.photometric = "MONOCHROME1";
  const auto img = parse_dicom(mono_dicom(s, v)).image;
  for (std::uint16_t i = 0; i < 16; ++i) EXPECT_EQ(img.pixels[i], 65535 - i);
}

TEST(Dicom, EightBitAndRectangular) {
  MonoSpec s;
  s.rows = 2;
  s.cols = 3;
  s.bits = s.stored = 8;
  const auto img = parse_dicom(mono_dicom(s, {0, 10, 20, 30, 40, 255})).image;
  EXPECT_EQ(img.width, 3u);
  EXPECT_EQ(img.height, 2u);
  EXPECT_EQ(img.bit_depth, 8);
  EXPECT_EQ(img.at(2, 1), 255);
  EXPECT_EQ(img.at(1, 0), 10);
}

TEST(Dicom, MetadataExposed) {
  const auto d = parse_dicom(golden_4x4());
  EXPECT_EQ(d.metadata.at("0028,0004"), "MONOCHROME2");
  EXPECT_EQ(d.metadata.at("0028,0010"), "4");
}

TEST(Dicom, MissingMagicIsNotDicom) {
  auto f = golden_4x4();
  f[128] = 'X';
  EXPECT_EQ(error_kind(f), DicomError::Kind::not_dicom);
  EXPECT_EQ(error_kind({}), DicomError::Kind::not_dicom);
  EXPECT_FALSE(looks_like_dicom(f));
}

TEST(Dicom, CompressedSyntaxIsUnsupportedAndNamed) {
  MonoSpec s;
  s.syntax = "1.2.840.10008.1.2.4.50";
  try {
    parse_dicom(mono_dicom(s, std::vector<std::uint16_t>(16, 0)));
    FAIL();
  } catch (const DicomError& e) {
    EXPECT_EQ(e.kind(), DicomError::Kind::unsupported);
    EXPECT_NE(std::string(e.what()).find("1.2.840.10008.1.2.4.50"), std::string::npos) << e.what();
  }
}

TEST(Dicom, ColorIsUnsupported) {
  MonoSpec s;
  s.photometric = "RGB";
  EXPECT_EQ(error_kind(mono_dicom(s, std::vector<std::uint16_t>(16, 0))), DicomError::Kind::unsupported);
}

TEST(Dicom, TruncatedPixelsAreCorrupt) {
  auto f = golden_4x4();
  f.resize(f.size() - 6);
  EXPECT_EQ(error_kind(f), DicomError::Kind::corrupt);
  // Declared length consistent with the file but shorter than rows*cols.
  MonoSpec s;
  EXPECT_EQ(error_kind(mono_dicom(s, std::vector<std::uint16_t>(10, 0))), DicomError::Kind::corrupt);
}

TEST(Dicom, HugeDeclaredLengthIsCorruptNotAllocated) {
  auto f = golden_4x4();
  const std::size_t len_at = f.size() - 32 - 4;
  f[len_at + 3] = 0x7F;
  EXPECT_EQ(error_kind(f), DicomError::Kind::corrupt);
}

TEST(Dicom, FuzzedBytesNeverEscapeAsOtherErrors) {
  Rng rng(99);
  const auto base = golden_4x4();
  for (int trial = 0; trial < 500; ++trial) {
    auto f = base;
    const auto flips = 1 + rng.below(8);
    for (std::uint64_t k = 0; k < flips; ++k) f[rng.below(f.size())] = static_cast<std::uint8_t>(rng.below(256));
    if (rng.uniform() < 0.3) f.resize(rng.below(f.size()));
    try {
      const auto img = parse_dicom(f).image;
      img.validate();
    } catch (const DicomError&) {
    }
  }
}

TEST(Normalize, Examples) {
  const auto out = minmax_normalize(raster(3, 1, {10, 60, 110}));
  EXPECT_EQ(out.pixels, (std::vector<std::uint16_t>{0, 128, 255}));
  EXPECT_EQ(out.bit_depth, 8);
  const auto flat = minmax_normalize(raster(2, 2, {7, 7, 7, 7}));
  EXPECT_EQ(flat.pixels, (std::vector<std::uint16_t>{0, 0, 0, 0}));
}

TEST(Normalize, RangeAndIdempotence) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const int depth = trial % 2 ? 16 : 8;
    const std::size_t w = 1 + rng.below(9), h = 1 + rng.below(9);
    std::vector<std::uint16_t> px(w * h);
    for (auto& p : px) p = static_cast<std::uint16_t>(rng.below(depth == 16 ? 65536 : 256));
    const auto img = raster(w, h, px, depth);
    const auto n = minmax_normalize(img);
    const auto [lo, hi] = std::minmax_element(px.begin(), px.end());
    if (*lo == *hi) continue;
    EXPECT_EQ(*std::min_element(n.pixels.begin(), n.pixels.end()), 0);
    EXPECT_EQ(*std::max_element(n.pixels.begin(), n.pixels.end()), 255);
    EXPECT_EQ(minmax_normalize(n), n);
  }
}

TEST(Crop, Examples) {
  std::vector<std::uint16_t> px(16);
  std::iota(px.begin(), px.end(), 0);
  const auto img = raster(4, 4, px);
  auto full = crop(img, {0, 0, 4, 4});
  EXPECT_EQ(full.pixels, img.pixels);
  EXPECT_EQ(full.source, ImageSource::crop);
  EXPECT_EQ(crop(img, {1, 2, 3, 4}).pixels, (std::vector<std::uint16_t>{9, 10, 13, 14}));
  const auto clamped = crop(img, {-3, 2, 9, 9});
  EXPECT_EQ(clamped.width, 4u);
  EXPECT_EQ(clamped.height, 2u);
  EXPECT_THROW(crop(img, {5, 0, 8, 4}), ValueError);
  EXPECT_THROW(crop(img, {2, 2, 2, 3}), ValueError);
}

TEST(BoxToPixels, Examples) {
  EXPECT_EQ(box_to_pixels({0.5, 0.5, 1, 1}, 100, 100), (PixelRect{0, 0, 100, 100}));
  const auto r = box_to_pixels({0.25, 0.5, 0.5, 1}, 128, 192);
  EXPECT_EQ(r.x0, 0);
  EXPECT_EQ(r.x1, 64);
  const auto tiny = box_to_pixels({0.3, 0.3, 1e-9, 1e-9}, 50, 50);
  EXPECT_EQ(tiny.width(), 1);
  EXPECT_EQ(tiny.height(), 1);
}

TEST(BoxToPixels, AlwaysInsideFuzz) {
  Rng rng(8);
  for (int trial = 0; trial < 2000; ++trial) {
    const Box b{rng.uniform(-0.5, 1.5), rng.uniform(-0.5, 1.5), rng.uniform(0, 2), rng.uniform(0, 2)};
    const std::size_t w = 1 + rng.below(300), h = 1 + rng.below(300);
    const auto r = box_to_pixels(b, w, h);
    EXPECT_GE(r.x0, 0);
    EXPECT_GE(r.y0, 0);
    EXPECT_LE(r.x1, static_cast<long>(w));
    EXPECT_LE(r.y1, static_cast<long>(h));
    EXPECT_GE(r.width(), 1);
    EXPECT_GE(r.height(), 1);
  }
}

TEST(Resize, AreaAverageMatchesBruteForce) {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t w = 1 + rng.below(20), h = 1 + rng.below(20);
    const std::size_t ow = 1 + rng.below(12), oh = 1 + rng.below(12);
    std::vector<double> src(w * h);
    for (auto& v : src) v = rng.uniform(0, 255);
    const auto out = resize_area(src, w, h, ow, oh);
    // Oracle: supersample every source pixel onto a common grid of w*ow x h*oh cells.
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double sum = 0.0;
        for (std::size_t cy = oy * h; cy < (oy + 1) * h; ++cy)
          for (std::size_t cx = ox * w; cx < (ox + 1) * w; ++cx) sum += src[(cy / oh) * w + cx / ow];
        EXPECT_NEAR(out[oy * ow + ox], sum / static_cast<double>(w * h), 1e-9);
      }
  }
}

TEST(Pgm, RoundTripBitIdentical) {
  Rng rng(2);
  for (int depth : {8, 16}) {
    std::vector<std::uint16_t> px(7 * 5);
    for (auto& p : px) p = static_cast<std::uint16_t>(rng.below(depth == 16 ? 65536 : 256));
    const auto img = raster(7, 5, px, depth);
    const auto bytes = encode_pgm(img);
    EXPECT_EQ(decode_pgm(bytes), img);
    EXPECT_EQ(encode_pgm(decode_pgm(bytes)), bytes);
    const auto path = std::filesystem::temp_directory_path() / ("klg_pgm_" + std::to_string(depth) + ".pgm");
    write_pgm(path, img);
    EXPECT_EQ(read_pgm(path), img);
    std::filesystem::remove(path);
  }
}

TEST(Pgm, TruncatedIsIoError) {
  auto bytes = encode_pgm(raster(4, 4, std::vector<std::uint16_t>(16, 3)));
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(decode_pgm(bytes), IoError);
}
