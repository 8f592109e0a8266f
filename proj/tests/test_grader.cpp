#include <cmath>
#include <filesystem>
#include <limits>

#include <gtest/gtest.h>

#include "klgrade/checkpoint.hpp"
#include "klgrade/error.hpp"
#include "klgrade/grader.hpp"
#include "klgrade/ops.hpp"
#include "klgrade/pipeline.hpp"
#include "klgrade/rng.hpp"

using namespace klg;
namespace fs = std::filesystem;

namespace {

// Small arch so training tests stay fast.
GraderArch tiny_arch() {
  GraderArch a;
  a.input_size = 32;
  a.stem_channels = 4;
  a.growth = 4;
  a.blocks = 2;
  a.transition_channels = 8;
  a.regression_hidden = 16;
  return a;
}

using Examples = std::shared_ptr<const std::vector<GradeExample>>;

std::vector<GradeExample> random_example_list(std::size_t n, std::size_t side, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GradeExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    GradeExample e;
    e.grade = static_cast<int>(rng.below(5));
    e.input.resize(side * side);
    for (auto& v : e.input) v = rng.uniform();
    out.push_back(std::move(e));
  }
  return out;
}

Examples random_examples(std::size_t n, std::size_t side, std::uint64_t seed) {
  return std::make_shared<const std::vector<GradeExample>>(random_example_list(n, side, seed));
}

std::vector<double> flat_weights(const Network& net) {
  std::vector<double> w;
  for (const auto& p : net.parameters()) w.insert(w.end(), p.data().begin(), p.data().end());
  return w;
}

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("klg_test_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST(RoundAndClamp, Examples) {
  EXPECT_EQ(round_and_clamp(2.49), 2);
  EXPECT_EQ(round_and_clamp(2.5), 3);
  EXPECT_EQ(round_and_clamp(4.7), 4);
  EXPECT_EQ(round_and_clamp(-0.3), 0);
  EXPECT_EQ(round_and_clamp(-0.5), 0);
  EXPECT_EQ(round_and_clamp(1e300), 4);
  EXPECT_EQ(round_and_clamp(-std::numeric_limits<double>::infinity()), 0);
}

TEST(RoundAndClamp, TotalAndMonotone) {
  Rng rng(8);
  std::vector<double> xs;
  for (int i = 0; i < 10000; ++i) xs.push_back(rng.uniform(-10, 10));
  std::sort(xs.begin(), xs.end());
  int prev = 0;
  for (double x : xs) {
    const int g = round_and_clamp(x);
    ASSERT_GE(g, 0);
    ASSERT_LE(g, 4);
    ASSERT_GE(g, prev);
    prev = g;
  }
}

TEST(GraderNet, HeadWidths) {
  const auto reg = build_grader_network(HeadKind::regression);
  const auto& layers = reg.layers();
  ASSERT_GE(layers.size(), 3u);
  EXPECT_EQ(layers[layers.size() - 3].kind, LayerKind::dense);
  EXPECT_EQ(layers[layers.size() - 3].out_channels, 128u);
  EXPECT_EQ(layers[layers.size() - 2].kind, LayerKind::relu);
  EXPECT_EQ(layers.back().kind, LayerKind::dense);
  EXPECT_EQ(layers.back().out_channels, 1u);
  EXPECT_EQ(reg.output_shape(), (Shape{1}));
  const auto cls = build_grader_network(HeadKind::classification);
  EXPECT_EQ(cls.output_shape(), (Shape{5}));
}

TEST(GraderNet, DenseBlocksObeyChannelRule) {
  const auto net = build_grader_network(HeadKind::classification);
  std::size_t channels = 1;
  for (const auto& l : net.layers()) {
    if (l.kind == LayerKind::dense_block) {
      EXPECT_EQ(l.in_channels, channels);
      EXPECT_EQ(l.output_channels(), l.in_channels + l.layers * l.growth);
    }
    if (l.kind == LayerKind::conv2d) EXPECT_EQ(l.in_channels, channels);
    if (l.kind == LayerKind::conv2d || l.kind == LayerKind::dense_block) channels = l.output_channels();
  }
}

TEST(HeadKind, Strings) {
  EXPECT_EQ(head_kind_from_string(to_string(HeadKind::regression)), HeadKind::regression);
  EXPECT_EQ(head_kind_from_string(to_string(HeadKind::classification)), HeadKind::classification);
  EXPECT_THROW(head_kind_from_string("ordinal"), ValueError);
}

TEST(Predict, ClassificationArgmaxFuzz) {
  const auto g = make_grader(HeadKind::classification, 5);
  const auto data = random_examples(1000, 64, 3);
  std::vector<std::vector<double>> inputs;
  for (const auto& e : *data) inputs.push_back(e.input);
  const auto preds = predict_inputs(g, inputs);
  ASSERT_EQ(preds.size(), 1000u);
  for (const auto& p : preds) {
    ASSERT_EQ(p.raw.size(), 5u);
    double s = 0;
    for (double v : p.raw) {
      ASSERT_GE(v, 0.0);
      s += v;
    }
    ASSERT_NEAR(s, 1.0, 1e-9);
    ASSERT_EQ(p.grade, static_cast<int>(std::max_element(p.raw.begin(), p.raw.end()) - p.raw.begin()));
  }
}

TEST(Predict, RegressionGradeIsRoundedRaw) {
  const auto g = make_grader(HeadKind::regression, 6);
  const auto data = random_examples(50, 64, 4);
  std::vector<std::vector<double>> inputs;
  for (const auto& e : *data) inputs.push_back(e.input);
  for (const auto& p : predict_inputs(g, inputs)) {
    ASSERT_EQ(p.raw.size(), 1u);
    ASSERT_EQ(p.grade, round_and_clamp(p.raw[0]));
  }
}

TEST(Predict, BatchingDoesNotChangeResults) {
  const auto g = make_grader(HeadKind::classification, 9);
  const auto data = random_examples(70, 64, 5);
  std::vector<std::vector<double>> inputs;
  for (const auto& e : *data) inputs.push_back(e.input);
  const auto all = predict_inputs(g, inputs);
  for (std::size_t i : {0u, 63u, 64u, 69u})
    EXPECT_EQ(all[i].raw, predict_inputs(g, std::span(inputs).subspan(i, 1))[0].raw);
}

TEST(Predict, InputContract) {
  const auto g = make_grader(HeadKind::regression, 1);
  EXPECT_THROW(predict(g, GrayImage::blank(32, 32)), ShapeError);
  auto wide = GrayImage::blank(64, 64);
  wide.bit_depth = 16;
  EXPECT_THROW(predict(g, wide), ValueError);
  const auto prepared = prepare_crop(GrayImage::blank(100, 90));
  EXPECT_EQ(prepared.width, 64u);
  EXPECT_EQ(prepared.bit_depth, 8);
  EXPECT_NO_THROW(predict(g, prepared));
}

TEST(OrdinalPenalty, LossLevelStructure) {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const double g = static_cast<double>(rng.below(5));
    const double r1 = g + rng.uniform(-2, 2);
    double r2 = g + rng.uniform(-4, 4);
    if (std::abs(r1 - g) == std::abs(r2 - g)) continue;
    const double near = std::abs(r1 - g) < std::abs(r2 - g) ? r1 : r2, far = near == r1 ? r2 : r1;
    const double ln = ops::mse(Tensor::from({1, 1}, {near}), std::vector<double>{g}).item();
    const double lf = ops::mse(Tensor::from({1, 1}, {far}), std::vector<double>{g}).item();
    ASSERT_LT(ln, lf);
  }
  // Point-mass predictions on classes 1 and 3 away from the label cost the same.
  auto point_mass = [](int c) {
    std::vector<double> l(5, 0.0);
    l[static_cast<std::size_t>(c)] = 40.0;
    return Tensor::from({1, 5}, l);
  };
  const std::vector<int> label{0};
  EXPECT_DOUBLE_EQ(ops::cross_entropy(point_mass(1), label).item(), ops::cross_entropy(point_mass(3), label).item());
}

TEST(TrainGrader, ZeroEpochsReturnsInitialNet) {
  const auto data = random_examples(20, 32, 1);
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.seed = 77;
  const auto trained = train_grader(HeadKind::regression, DataView(data), DataView(data), cfg, tiny_arch());
  EXPECT_EQ(flat_weights(trained.net), flat_weights(make_grader(HeadKind::regression, 77, tiny_arch()).net));
}

TEST(TrainGrader, SameSeedSameCheckpoint) {
  const auto data = random_examples(40, 32, 2);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.seed = 3;
  const auto a = train_grader(HeadKind::classification, DataView(data), DataView(data), cfg, tiny_arch());
  const auto b = train_grader(HeadKind::classification, DataView(data), DataView(data), cfg, tiny_arch());
  EXPECT_EQ(encode_checkpoint(to_checkpoint(a)), encode_checkpoint(to_checkpoint(b)));
}

TEST(TrainGrader, Errors) {
  const Examples empty = std::make_shared<const std::vector<GradeExample>>();
  TrainConfig cfg;
  EXPECT_THROW(train_grader(HeadKind::regression, DataView(empty), DataView(empty), cfg, tiny_arch()), ValueError);
  auto list = random_example_list(4, 32, 1);
  list[2].grade = 5;
  const Examples bad = std::make_shared<const std::vector<GradeExample>>(list);
  EXPECT_THROW(train_grader(HeadKind::classification, DataView(bad),
                            DataView<GradeExample>(), cfg, tiny_arch()),
               ValueError);
}

TEST(TrainGrader, HistoryHasInitialEntry) {
  const auto data = random_examples(24, 32, 6);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  TrainResult result;
  train_grader(HeadKind::regression, DataView(data), DataView(data), cfg, tiny_arch(), &result);
  ASSERT_EQ(result.history.size(), 4u);
  EXPECT_TRUE(std::isnan(result.history[0].train_loss));
  EXPECT_LE(result.best_epoch, 3u);
  double best = result.history[0].val_loss;
  for (const auto& h : result.history) best = std::min(best, h.val_loss);
  EXPECT_EQ(result.history[result.best_epoch].val_loss, best);
}

TEST(FineTune, ZeroEpochsKeepsMetrics) {
  const auto data = random_examples(30, 32, 8);
  const auto start = make_grader(HeadKind::regression, 4, tiny_arch());
  const auto before = flat_weights(start.net);
  FineTuneConfig cfg;
  cfg.train.epochs = 0;
  const auto tuned = fine_tune(start, DataView(data), DataView(data), cfg);
  EXPECT_EQ(grader_loss(tuned, DataView(data)), grader_loss(start, DataView(data)));
  EXPECT_EQ(flat_weights(start.net), before);
}

TEST(FineTune, LeavesOriginalUntouched) {
  const auto data = random_examples(30, 32, 8);
  const auto start = make_grader(HeadKind::regression, 4, tiny_arch());
  const auto before = flat_weights(start.net);
  FineTuneConfig cfg;
  cfg.train.epochs = 2;
  cfg.train.batch_size = 8;
  const auto tuned = fine_tune(start, DataView(data), DataView(data), cfg);
  EXPECT_EQ(flat_weights(start.net), before);
  EXPECT_NE(flat_weights(tuned.net), before);
  cfg.lr_scale = 0;
  EXPECT_THROW(fine_tune(start, DataView(data), DataView(data), cfg), ValueError);
}

TEST(Checkpoint, NetworkRoundTripIsBitExact) {
  Checkpoint c{build_grader_network(HeadKind::classification), 42, {{"note", "x"}}};
  c.net.initialize(42);
  const auto bytes = encode_checkpoint(c);
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.seed, 42u);
  EXPECT_EQ(back.tags, c.tags);
  EXPECT_EQ(back.net.layers(), c.net.layers());
  EXPECT_EQ(flat_weights(back.net), flat_weights(c.net));
  EXPECT_EQ(encode_checkpoint(back), bytes);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_THROW(decode_checkpoint(truncated), IoError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), IoError);
}

TEST(Checkpoint, GraderSaveLoadAndRefusal) {
  const auto g = make_grader(HeadKind::regression, 11);
  const auto path = temp_path("grader.ckpt");
  save_grader(path, g);
  const auto back = load_grader(path);
  EXPECT_EQ(back.head, HeadKind::regression);
  EXPECT_EQ(back.arch, g.arch);
  const auto data = random_examples(3, 64, 1);
  std::vector<std::vector<double>> inputs;
  for (const auto& e : *data) inputs.push_back(e.input);
  EXPECT_EQ(predict_inputs(back, inputs)[2].raw, predict_inputs(g, inputs)[2].raw);
  EXPECT_NO_THROW(load_grader(path, HeadKind::regression, GraderArch{}));
  EXPECT_THROW(load_grader(path, HeadKind::classification, GraderArch{}), Error);
  auto other = GraderArch{};
  other.growth = 4;
  EXPECT_THROW(load_grader(path, HeadKind::regression, other), Error);
  fs::remove(path);
  EXPECT_THROW(load_grader(path), IoError);
}

TEST(Checkpoint, ArchJsonRoundTrip) {
  const auto a = tiny_arch();
  EXPECT_EQ(grader_arch_from_json(to_json(a)), a);
}

TEST(Schedule, CosineDecay) {
  TrainConfig c;
  c.epochs = 4;
  c.learning_rate = 1.0;
  EXPECT_DOUBLE_EQ(scheduled_learning_rate(c, 1), 1.0);
  EXPECT_NEAR(scheduled_learning_rate(c, 3), 0.5, 1e-15);
  EXPECT_GT(scheduled_learning_rate(c, 4), 0.0);
  for (std::size_t e = 2; e <= 4; ++e) EXPECT_LT(scheduled_learning_rate(c, e), scheduled_learning_rate(c, e - 1));
  c.lr_schedule = "constant";
  EXPECT_EQ(scheduled_learning_rate(c, 4), 1.0);
  c.lr_schedule = "step";
  EXPECT_THROW(validate(c), ValueError);
}
