#include <cmath>

#include <gtest/gtest.h>

#include "klgrade/error.hpp"
#include "klgrade/locator.hpp"
#include "klgrade/rng.hpp"
#include "klgrade/synthgen.hpp"

using namespace klg;

namespace {

using Examples = std::shared_ptr<const std::vector<LocatorExample>>;

SyntheticSample sample(std::uint64_t seed) {
  return compose_bilateral(severity_for_grade(static_cast<int>(seed % 5), seed),
                           severity_for_grade(static_cast<int>((seed + 2) % 5), seed + 1), seed);
}

Examples examples(std::size_t n, std::uint64_t seed) {
  std::vector<LocatorExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = sample(seed + i);
    out.push_back(make_locator_example(s.image, s.left, s.right));
  }
  return std::make_shared<const std::vector<LocatorExample>>(std::move(out));
}

GrayImage noise_image(Rng& rng) {
  auto img = GrayImage::blank(128, 192);
  for (auto& v : img.pixels) v = static_cast<std::uint16_t>(rng.below(256));
  return img;
}

bool inside_unit(const Box& b) {
  return b.w > 0 && b.h > 0 && b.x0() >= 0 && b.x1() <= 1 && b.y0() >= 0 && b.y1() <= 1;
}

double bce(double z, double t) { return std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z))); }

}  // namespace

TEST(Locate, ExactlyTwoInBoundsOnRandomWeights) {
  Rng rng(4);
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto loc = make_locator(seed);
    const auto [l, r] = locate(loc, noise_image(rng));
    EXPECT_EQ(l.side, Side::left);
    EXPECT_EQ(r.side, Side::right);
    for (const auto* d : {&l, &r}) {
      EXPECT_TRUE(inside_unit(d->box));
      EXPECT_GE(d->score, 0.0);
      EXPECT_LE(d->score, 1.0);
      EXPECT_EQ(d->mask.size(), d->grid * d->grid);
      const auto px = box_to_pixels(d->box, 128, 192);
      EXPECT_GE(px.x0, 0);
      EXPECT_LE(px.x1, 128);
      EXPECT_GE(px.width(), 1);
    }
  }
}

TEST(Locate, RejectsIncompatibleNetwork) {
  LocatorNet untrained;
  EXPECT_THROW(locate(untrained, GrayImage::blank(128, 192)), ValueError);
  auto loc = make_locator(1);
  loc.arch.hidden = 32;
  EXPECT_THROW(locate(loc, GrayImage::blank(128, 192)), ValueError);
}

TEST(Locate, BatchMatchesSingle) {
  const auto loc = make_locator(3);
  const auto s = sample(9);
  const std::vector<std::vector<double>> inputs{locator_input(s.image)};
  const auto [l, r] = locate(loc, s.image);
  const auto batch = locate_batch(loc, inputs);
  EXPECT_EQ(batch[0].first.box.cx, l.box.cx);
  EXPECT_EQ(batch[0].second.mask, r.mask);
}

TEST(LocatorExample, SlotsOrderedByImagePosition) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = sample(seed);
    const auto a = make_locator_example(s.image, s.left, s.right);
    const auto b = make_locator_example(s.image, s.right, s.left);
    EXPECT_LT(a.boxes[0].cx, a.boxes[1].cx);
    EXPECT_EQ(a.boxes[0].cx, b.boxes[0].cx);
    // Patient-left knee is on the image right.
    EXPECT_EQ(a.left_target[0], 0.0);
    EXPECT_EQ(a.left_target[1], 1.0);
    for (const auto& cells : a.mask_cells) {
      ASSERT_EQ(cells.size(), 256u);
      for (double c : cells) {
        ASSERT_GE(c, 0.0);
        ASSERT_LE(c, 1.0);
      }
    }
  }
  const auto s = sample(1);
  EXPECT_THROW(make_locator_example(s.image, s.left, s.left), ValueError);
}

TEST(LocatorLoss, ZeroWeightsLeaveSideLoss) {
  const auto data = examples(6, 30);
  const auto loc = make_locator(8);
  const DataView<LocatorExample> view(data);
  const double got = locator_loss_value(loc, view, {0.0, 0.0});
  const std::size_t width = loc.arch.slot_width();
  double oracle = 0;
  for (const auto& e : *data) {
    const auto out = loc.net.forward(Tensor::from({1, 1, 48, 32}, e.input));
    for (std::size_t s = 0; s < 2; ++s) oracle += 0.5 * bce(out.data()[s * width + width - 1], e.left_target[s]);
  }
  oracle /= static_cast<double>(data->size());
  EXPECT_NEAR(got, oracle, 1e-12);
  EXPECT_GT(locator_loss_value(loc, view), got);
}

TEST(LocatorLoss, EmptyDatasetRaises) {
  const Examples empty = std::make_shared<const std::vector<LocatorExample>>();
  const auto loc = make_locator(1);
  EXPECT_THROW(locator_loss_value(loc, DataView<LocatorExample>(empty)), ValueError);
  EXPECT_THROW(train_locator(DataView<LocatorExample>(empty), DataView<LocatorExample>(empty), default_locator_config()),
               ValueError);
}

TEST(TrainLocator, SameSeedSameWeights) {
  const auto data = examples(12, 50);
  auto cfg = default_locator_config();
  cfg.train.epochs = 2;
  cfg.train.batch_size = 4;
  const auto a = train_locator(DataView(data), DataView(data), cfg);
  const auto b = train_locator(DataView(data), DataView(data), cfg);
  EXPECT_EQ(encode_checkpoint(to_checkpoint(a)), encode_checkpoint(to_checkpoint(b)));
}

TEST(UpsampleMask, NearestNeighbourIntoBox) {
  Detection d;
  d.grid = 2;
  d.mask = {1, 0, 0, 1};
  d.box = {0.5, 0.5, 1.0, 1.0};
  const auto m = upsample_mask(d, 4, 4);
  const std::vector<std::uint8_t> expected{1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1};
  EXPECT_EQ(m, expected);
  d.box = {0.25, 0.25, 0.5, 0.5};
  const auto q = upsample_mask(d, 4, 4);
  EXPECT_EQ(std::count(q.begin(), q.end(), 1), 2);
  EXPECT_EQ(q[0], 1);
  EXPECT_EQ(q[5], 1);
}

TEST(DetectionJson, FlaggedAsPredicted) {
  Detection d;
  d.side = Side::right;
  d.grid = 2;
  d.mask = {1, 1, 1, 1};
  d.box = {0.25, 0.5, 0.5, 1.0};
  d.score = 0.75;
  const auto j = detection_to_json(d, 128, 192);
  EXPECT_EQ(j.at("predicted"), true);
  EXPECT_EQ(j.at("side"), "right");
  EXPECT_DOUBLE_EQ(j.at("score").get<double>(), 0.75);
  EXPECT_FALSE(j.contains("grade"));
}

TEST(LocatorCheckpoint, RoundTrip) {
  const auto loc = make_locator(21);
  const auto back = locator_from_checkpoint(decode_checkpoint(encode_checkpoint(to_checkpoint(loc))));
  EXPECT_EQ(back.arch, loc.arch);
  const auto s = sample(2);
  EXPECT_EQ(locate(back, s.image).first.box.cx, locate(loc, s.image).first.box.cx);
  EXPECT_EQ(locator_arch_from_json(to_json(loc.arch)), loc.arch);
}
