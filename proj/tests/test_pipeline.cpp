#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>

#include <gtest/gtest.h>
#include <unistd.h>

#include "klgrade/checkpoint.hpp"
#include "klgrade/dicom.hpp"
#include "klgrade/error.hpp"
#include "klgrade/pipeline.hpp"
#include "klgrade/rng.hpp"
#include "support/dicom_writer.hpp"

using namespace klg;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("klg_pipe_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<std::size_t> all_of(const Split& s) {
  std::vector<std::size_t> v;
  for (const auto* part : {&s.train, &s.val, &s.test}) v.insert(v.end(), part->begin(), part->end());
  std::sort(v.begin(), v.end());
  return v;
}

json tiny_config(const std::string& kind, const fs::path& out) {
  json arch = {{"input_size", 32}, {"stem_channels", 4}, {"growth", 4}, {"layers_per_block", 1},
               {"blocks", 2},      {"transition_channels", 8},          {"regression_hidden", 8}};
  return {{"name", kind},
          {"kind", kind},
          {"seed", 5},
          {"generator", {{"n", 14}, {"target_n", 12}, {"grade_weights", "oai"}}},
          {"locator", {{"epochs", 1}, {"batch_size", 4}}},
          {"grader", {{"epochs", 1}, {"batch_size", 8}, {"arch", arch}}},
          {"finetune", {{"epochs", 1}}},
          {"metrics", {{"bootstrap_resamples", 50}}},
          {"output_dir", out.string()}};
}

std::map<std::string, std::vector<std::uint8_t>> report_bytes(const fs::path& dir) {
  std::map<std::string, std::vector<std::uint8_t>> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() != ".ckpt")
      out[fs::relative(e.path(), dir).generic_string()] = read_file_bytes(e.path());
  return out;
}

}  // namespace

TEST(Split, HundredItems) {
  const auto s = split(100, SplitSpec{});
  EXPECT_EQ(s.train.size(), 70u);
  EXPECT_EQ(s.val.size(), 10u);
  EXPECT_EQ(s.test.size(), 20u);
}

TEST(Split, RemainderGoesToTrain) {
  const auto s = split(9, SplitSpec{});
  EXPECT_EQ(s.val.size(), 0u);
  EXPECT_EQ(s.test.size(), 1u);
  EXPECT_EQ(s.train.size(), 8u);
}

TEST(Split, StratifiedSingleGroupIsPartition) {
  SplitSpec spec;
  spec.stratified = true;
  const std::vector<int> labels(5, 2);
  const auto s = split(5, spec, labels);
  EXPECT_EQ(all_of(s), (std::vector<std::size_t>{0, 1, 2, 3, 4}));
}

TEST(Split, SameSeedSameSplit) {
  SplitSpec spec;
  spec.seed = 99;
  const auto a = split(300, spec), b = split(300, spec);
  EXPECT_EQ(a.test, b.test);
  EXPECT_EQ(a.val, b.val);
  spec.seed = 100;
  EXPECT_NE(split(300, spec).test, a.test);
}

TEST(Split, InvalidSpecs) {
  SplitSpec s;
  s.val_frac = -0.1;
  s.train_frac = 0.9;
  EXPECT_THROW(split(10, s), ValueError);
  s = {};
  s.train_frac = 0.8;
  EXPECT_THROW(split(10, s), ValueError);
  SplitSpec strat;
  strat.stratified = true;
  EXPECT_THROW(split(3, strat, std::vector<int>{1, 2}), ValueError);
}

TEST(Split, PropertyPartitionAndProportions) {
  Rng rng(31);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = rng.below(400);
    const double a = rng.uniform(), b = rng.uniform() * (1 - a);
    SplitSpec spec{1 - a - b, a, b, rng.next_u64(), rng.uniform() < 0.5};
    // Re-normalize exactly so the fractions sum to 1 within 1e-9.
    spec.train_frac = 1.0 - spec.val_frac - spec.test_frac;
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(rng.below(5));
    const auto s = split(n, spec, labels);
    std::vector<std::size_t> expect(n);
    std::iota(expect.begin(), expect.end(), std::size_t{0});
    ASSERT_EQ(all_of(s), expect);
    for (const auto* part : {&s.train, &s.val, &s.test}) ASSERT_TRUE(std::is_sorted(part->begin(), part->end()));
    if (!spec.stratified) {
      ASSERT_EQ(s.val.size(), static_cast<std::size_t>(std::floor(n * spec.val_frac + 1e-9)));
      ASSERT_EQ(s.test.size(), static_cast<std::size_t>(std::floor(n * spec.test_frac + 1e-9)));
    } else {
      std::array<double, 5> group{}, in_val{}, in_test{};
      for (auto l : labels) group[l] += 1;
      for (auto i : s.val) in_val[labels[i]] += 1;
      for (auto i : s.test) in_test[labels[i]] += 1;
      for (int g = 0; g < 5; ++g) {
        ASSERT_LE(std::abs(in_val[g] - group[g] * spec.val_frac), 1.0);
        ASSERT_LE(std::abs(in_test[g] - group[g] * spec.test_frac), 1.0);
      }
    }
  }
}

TEST(Leakage, AccessLogSeesOnlyWhatWasRead) {
  auto items = std::make_shared<const std::vector<int>>(std::vector<int>{10, 11, 12, 13});
  AccessLog log;
  DataView<int> train(items, {0, 2}, &log);
  log.set_phase("train");
  EXPECT_EQ(train[1], 12);
  EXPECT_EQ(log.indices("train"), (std::set<std::size_t>{2}));
  EXPECT_TRUE(log.indices("finetune").empty());
  EXPECT_THROW(DataView<int>(items, {7}), ValueError);
}

TEST(Config, ViolationsAreAllListed) {
  const json bad = {{"kind", "sideways"},
                    {"seed", -3},
                    {"bogus", 1},
                    {"split", {{"train", 0.5}, {"val", 0.1}, {"test", 0.1}}},
                    {"grader", {{"heads", {"ordinal"}}, {"learning_rate", -1}}}};
  const auto v = check_experiment_config(bad);
  auto mentions = [&](const std::string& what) {
    return std::any_of(v.begin(), v.end(), [&](const std::string& s) { return s.find(what) != std::string::npos; });
  };
  EXPECT_TRUE(mentions("config.kind"));
  EXPECT_TRUE(mentions("config.seed"));
  EXPECT_TRUE(mentions("bogus"));
  EXPECT_TRUE(mentions("config.split"));
  EXPECT_TRUE(mentions("config.grader.heads"));
  EXPECT_TRUE(mentions("config.grader.learning_rate"));
  EXPECT_TRUE(mentions("generator or ingest"));
  try {
    parse_experiment_config(bad);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.violations(), v);
  }
}

TEST(Config, DefaultsAndPresets) {
  const auto c = parse_experiment_config({{"kind", "domain_shift"}, {"seed", 9}, {"generator", json::object()}});
  EXPECT_EQ(c.heads, std::vector<HeadKind>{HeadKind::regression});
  EXPECT_EQ(c.split.seed, 9u);
  EXPECT_DOUBLE_EQ(c.split.train_frac, 0.7);
  EXPECT_DOUBLE_EQ(c.finetune.lr_scale, 0.1);
  EXPECT_EQ(c.name, "domain_shift");
  const auto h = parse_experiment_config({{"kind", "compare_heads"}, {"generator", {{"grade_weights", "target"}}}});
  EXPECT_EQ(h.heads.size(), 2u);
  EXPECT_EQ(h.generator->grade_weights, std::vector<double>(kTargetGradeCounts.begin(), kTargetGradeCounts.end()));
  EXPECT_FALSE(check_experiment_config({{"kind", "two_stage"}, {"generator", {{"grade_weights", "nope"}}}}).empty());
  EXPECT_THROW(load_experiment_config(scratch("missing.json")), ConfigError);
}

TEST(Dataset, WriteReadRoundTrip) {
  const auto dir = scratch("ds");
  std::vector<AnnotatedImage> imgs;
  const std::vector<double> w(kOaiGradeCounts.begin(), kOaiGradeCounts.end());
  for (std::size_t i = 0; i < 3; ++i) imgs.push_back(to_annotated(sample_one(i, w, DomainProfile::source(), 4), "s" + std::to_string(i)));
  write_dataset(dir, imgs, {{"note", "test"}});
  EXPECT_TRUE(fs::exists(dir / "s1.json"));
  const auto manifest = json::parse(read_file_bytes(dir / "manifest.json"));
  EXPECT_EQ(manifest.at("samples")[1].at("seed"), *imgs[1].seed);
  const auto back = read_dataset(dir);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].image.pixels, imgs[i].image.pixels);
    EXPECT_EQ(back[i].left.grade, imgs[i].left.grade);
    EXPECT_EQ(back[i].right.mask, imgs[i].right.mask);
  }
  fs::remove_all(dir);
}

TEST(Infer, ExactlyTwoKneesAndStageAttribution) {
  const auto loc = make_locator(2);
  const auto g = make_grader(HeadKind::regression, 3);
  const std::vector<double> w(kOaiGradeCounts.begin(), kOaiGradeCounts.end());
  const auto s = sample_one(0, w, DomainProfile::source(), 8);
  const auto r = infer_radiograph(loc, g, s.image, "x");
  ASSERT_EQ(r.knees.size(), 2u);
  EXPECT_EQ(r.knees[0].side, Side::left);
  EXPECT_EQ(r.knees[1].side, Side::right);
  EXPECT_EQ(r.head, "regression");
  const auto j = to_json(r);
  EXPECT_EQ(j.at("knees").size(), 2u);
  try {
    infer_radiograph(LocatorNet{}, g, s.image, "x");
    FAIL() << "expected StageError";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "locate");
  }
  const auto one = infer_crop(g, crop(s.image, box_to_pixels(s.left.box, 128, 192)), "crop");
  EXPECT_EQ(one.knees.size(), 1u);
}

TEST(Infer, DicomAndPgmGiveIdenticalReports) {
  const auto loc = make_locator(2);
  const auto g = make_grader(HeadKind::classification, 3);
  const std::vector<double> w(kOaiGradeCounts.begin(), kOaiGradeCounts.end());
  const auto s = sample_one(1, w, DomainProfile::source(), 8);
  klg::testing::MonoSpec spec;
  spec.rows = 192;
  spec.cols = 128;
  spec.bits = spec.stored = 8;
  const auto dir = scratch("dcm");
  fs::create_directories(dir);
  write_file_bytes(dir / "a.dcm", klg::testing::mono_dicom(spec, s.image.pixels));
  write_pgm(dir / "a.pgm", s.image);
  const auto from_dicom = to_json(infer_radiograph(loc, g, read_image(dir / "a.dcm"), "a"));
  const auto from_pgm = to_json(infer_radiograph(loc, g, read_image(dir / "a.pgm"), "a"));
  EXPECT_EQ(from_dicom.dump(), from_pgm.dump());
  fs::remove_all(dir);
}

TEST(Experiment, CompareHeadsSharesSplitAndIsDeterministic) {
  const auto out1 = scratch("e1"), out2 = scratch("e2");
  const auto r1 = run_experiment(parse_experiment_config(tiny_config("compare_heads", out1)));
  const auto r2 = run_experiment(parse_experiment_config(tiny_config("compare_heads", out2)));
  ASSERT_EQ(r1.reports.size(), 2u);
  EXPECT_EQ(r1.reports[0].samples, r1.reports[1].samples);
  EXPECT_EQ(r1.reports[0].confusion.total(), r1.reports[1].confusion.total());
  EXPECT_EQ(report_bytes(out1), report_bytes(out2));
  const auto manifest = json::parse(read_file_bytes(out1 / "compare_heads" / "manifest.json"));
  EXPECT_EQ(manifest.at("leakage_check"), "passed");
  fs::remove_all(out1);
  fs::remove_all(out2);
}

TEST(Experiment, DomainShiftProducesThreeReports) {
  const auto out = scratch("ds_exp");
  const auto r = run_experiment(parse_experiment_config(tiny_config("domain_shift", out)));
  ASSERT_EQ(r.reports.size(), 3u);
  EXPECT_EQ(r.reports[0].name, "source_on_source");
  EXPECT_EQ(r.reports[1].name, "source_on_target");
  EXPECT_EQ(r.reports[2].name, "finetuned_on_target");
  EXPECT_TRUE(r.summary.contains("degradation_ratio"));
  fs::remove_all(out);
}

TEST(Experiment, TwoStageWritesKneeReports) {
  const auto out = scratch("ts_exp");
  const auto r = run_experiment(parse_experiment_config(tiny_config("two_stage", out)));
  ASSERT_EQ(r.reports.size(), 1u);
  const auto reports = json::parse(read_file_bytes(out / "two_stage" / "reports" / "knee_reports.json"));
  ASSERT_FALSE(reports.empty());
  for (const auto& rep : reports) EXPECT_EQ(rep.at("knees").size(), 2u);
  EXPECT_TRUE(r.reports[0].localization.has_value());
  fs::remove_all(out);
}
