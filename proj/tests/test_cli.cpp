#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "klgrade/checkpoint.hpp"
#include "klgrade/grader.hpp"
#include "klgrade/locator.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;  // stdout
  std::string err;  // stderr
};

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("klg_cli_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Run cli(const std::string& args) {
  static const fs::path io = scratch("io");
  const auto out = io / "stdout", err = io / "stderr";
  const std::string cmd = std::string(KLG_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  EXPECT_EQ(cli("gen --bogus 1").code, 2);
  EXPECT_EQ(cli("gen --grade-weights 1,2 --out " + q(scratch("w"))).code, 2);
  EXPECT_EQ(cli("gen --grade-weights 0,0,0,0,0 --out " + q(scratch("w"))).code, 2);
  EXPECT_EQ(cli("gen --profile moon --out " + q(scratch("w"))).code, 2);
  EXPECT_EQ(cli("train-grader --out " + q(scratch("w"))).code, 2);
}

TEST(Cli, EveryCommandTakesSeedAndOut) {
  for (const char* c : {"gen", "train-locator", "train-grader", "finetune", "eval", "infer", "experiment"}) {
    const auto r = cli(std::string(c) + " --help");
    EXPECT_EQ(r.code, 0) << c;
    EXPECT_NE(r.out.find("--seed"), std::string::npos) << c;
    EXPECT_NE(r.out.find("--out"), std::string::npos) << c;
    EXPECT_NE(r.out.find("--threads"), std::string::npos) << c;
  }
}

TEST(Cli, GenWritesManifestAndIsReproducible) {
  const auto a = scratch("gen_a"), b = scratch("gen_b");
  ASSERT_EQ(cli("gen --n 10 --seed 4 --out " + q(a)).code, 0);
  ASSERT_EQ(cli("gen --n 10 --seed 4 --out " + q(b)).code, 0);
  const auto manifest = json::parse(slurp(a / "manifest.json"));
  EXPECT_EQ(manifest.at("samples").size(), 10u);
  EXPECT_EQ(manifest.at("provenance").at("generator").at("grade_weights"), json({1, 1, 1, 1, 1}));
  EXPECT_EQ(slurp(a / "manifest.json"), slurp(b / "manifest.json"));
  EXPECT_EQ(slurp(a / "sample_00003.pgm"), slurp(b / "sample_00003.pgm"));
  EXPECT_EQ(slurp(a / "sample_00003.json"), slurp(b / "sample_00003.json"));
}

TEST(Cli, GenHonoursOutDirEnvironment) {
  const auto dir = scratch("env_out");
  const std::string cmd = std::string("KLG_OUT_DIR=") + q(dir) + " " + KLG_CLI + " gen --n 2 2>/dev/null";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
}

TEST(Cli, InferToleratesOneCorruptFile) {
  const auto data = scratch("infer_data"), models = scratch("models"), out = scratch("infer_out");
  ASSERT_EQ(cli("gen --n 4 --seed 3 --out " + q(data)).code, 0);
  klg::save_locator(models / "loc.ckpt", klg::make_locator(1));
  klg::save_grader(models / "grader.ckpt", klg::make_grader(klg::HeadKind::regression, 1));
  const auto inputs = scratch("inputs");
  for (int i = 0; i < 4; ++i) {
    const std::string name = "sample_0000" + std::to_string(i) + ".pgm";
    fs::copy_file(data / name, inputs / name);
  }
  std::ofstream(inputs / "broken.pgm") << "P5\n128 192\n255\nshort";
  const std::string models_args = "--locator " + q(models / "loc.ckpt") + " --grader " + q(models / "grader.ckpt");
  const auto r = cli("infer " + models_args + " --input " + q(inputs) + " --out " + q(out));
  EXPECT_EQ(r.code, 0) << r.err;
  std::size_t reports = 0;
  for (const auto& e : fs::directory_iterator(out))
    if (e.path().string().ends_with(".report.json")) {
      ++reports;
      EXPECT_EQ(json::parse(slurp(e.path())).at("knees").size(), 2u);
    }
  EXPECT_EQ(reports, 4u);
  const auto errors = json::parse(slurp(out / "errors.json"));
  ASSERT_EQ(errors.size(), 1u);
  EXPECT_EQ(errors[0].at("input"), "broken.pgm");

  const auto bad_only = scratch("bad_only");
  fs::copy_file(inputs / "broken.pgm", bad_only / "broken.pgm");
  EXPECT_EQ(cli("infer " + models_args + " --input " + q(bad_only) + " --out " + q(scratch("o2"))).code, 1);
  EXPECT_EQ(cli("infer --grader " + q(models / "grader.ckpt") + " --input " + q(inputs)).code, 2);
}

TEST(Cli, ExperimentConfigErrors) {
  EXPECT_EQ(cli("experiment --config " + q(scratch("none") / "missing.json")).code, 2);
  const auto dir = scratch("cfg");
  std::ofstream(dir / "bad.json") << R"({"kind": "compare_heads", "seed": "x", "extra": 1})";
  const auto r = cli("experiment --config " + q(dir / "bad.json"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("config.seed"), std::string::npos);
  EXPECT_NE(r.err.find("extra"), std::string::npos);
  EXPECT_NE(r.err.find("generator or ingest"), std::string::npos);
  std::ofstream(dir / "garbage.json") << "{not json";
  EXPECT_EQ(cli("experiment --config " + q(dir / "garbage.json")).code, 2);
}

TEST(Cli, ExperimentRunsAndPrintsSummary) {
  const auto dir = scratch("exp");
  const json cfg = {{"name", "tiny"},
                    {"kind", "compare_heads"},
                    {"generator", {{"n", 10}}},
                    {"grader",
                     {{"epochs", 1},
                      {"arch",
                       {{"input_size", 32}, {"stem_channels", 4}, {"growth", 4}, {"layers_per_block", 1},
                        {"blocks", 1}, {"transition_channels", 4}, {"regression_hidden", 4}}}}},
                    {"metrics", {{"bootstrap_resamples", 20}}}};
  std::ofstream(dir / "tiny.json") << cfg.dump();
  const auto a = cli("experiment --config " + q(dir / "tiny.json") + " --seed 7 --out " + q(dir / "a"));
  const auto b = cli("experiment --config " + q(dir / "tiny.json") + " --seed 7 --out " + q(dir / "b"));
  ASSERT_EQ(a.code, 0) << a.err;
  const auto summary = json::parse(a.out);
  EXPECT_TRUE(summary.at("heads").contains("classification"));
  EXPECT_TRUE(summary.at("heads").contains("regression"));
  EXPECT_EQ(a.out, b.out);
  EXPECT_EQ(slurp(dir / "a" / "tiny" / "reports" / "regression.json"), slurp(dir / "b" / "tiny" / "reports" / "regression.json"));
}
