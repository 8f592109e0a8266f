// klgrade: generate data, train/fine-tune/evaluate the two stages, run
// experiments. Logs go to stderr; results go to files under --out.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "klgrade/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace klg;

namespace {

// Bad flags or arguments: exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void log_line(const std::string& s) { std::cerr << s << std::endl; }

void write_text(const fs::path& path, const std::string& text) {
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
  log_line("wrote " + path.string());
}

std::vector<double> parse_weights(const std::string& text) {
  if (text.empty() || text == "uniform") return std::vector<double>(kNumGrades, 1.0);
  if (text == "oai") return {kOaiGradeCounts.begin(), kOaiGradeCounts.end()};
  if (text == "target") return {kTargetGradeCounts.begin(), kTargetGradeCounts.end()};
  std::vector<double> w;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      w.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("--grade-weights: '" + item + "' is not a number");
    }
  }
  try {
    validate_grade_weights(w);
  } catch (const ValueError& e) {
    throw UsageError(std::string("--grade-weights: ") + e.what());
  }
  return w;
}

std::vector<AnnotatedImage> load_data(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw UsageError("--data: not a directory: " + dir.string());
  auto images = read_dataset(dir);
  if (images.empty()) throw UsageError("--data: dataset is empty");
  return images;
}

// 90:10 train/val split for the standalone training commands.
Split train_val(std::size_t n, std::uint64_t seed) {
  SplitSpec spec{0.9, 0.1, 0.0, seed, false};
  return split(n, spec);
}

struct Common {
  std::uint64_t seed = 1;
  std::string out;
  std::size_t threads = 1;

  fs::path out_dir() const { return out.empty() ? default_output_dir() : fs::path(out); }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  cmd->add_option("--out", c.out, "Output directory (default $" + std::string(kOutDirEnv) + " or ./klgrade_out)");
  cmd->add_option("--threads", c.threads, "Worker thread cap")->check(CLI::Range(1, 256))->capture_default_str();
}

void add_train_flags(CLI::App* cmd, TrainConfig& t) {
  cmd->add_option("--epochs", t.epochs, "Training epochs")->capture_default_str();
  cmd->add_option("--batch-size", t.batch_size, "Minibatch size")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--lr", t.learning_rate, "Learning rate")->check(CLI::PositiveNumber)->capture_default_str();
}

// ---- commands ----

struct GenArgs {
  Common common;
  std::size_t n = 10;
  std::string profile = "source";
  std::string weights = "uniform";
};

int cmd_gen(const GenArgs& a) {
  const auto weights = parse_weights(a.weights);
  DomainProfile profile;
  try {
    profile = DomainProfile::by_name(a.profile);
  } catch (const ValueError& e) {
    throw UsageError(std::string("--profile: ") + e.what());
  }
  const fs::path dir = a.common.out_dir();
  log_line("generating " + std::to_string(a.n) + " radiographs (" + a.profile + ") into " + dir.string());
  const auto samples = sample_dataset(a.n, weights, profile, a.common.seed);
  std::vector<AnnotatedImage> images;
  char id[32];
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::snprintf(id, sizeof id, "sample_%05zu", i);
    images.push_back(to_annotated(samples[i], id));
  }
  write_dataset(dir, images, {{"generator", {{"n", a.n}, {"profile", a.profile}, {"grade_weights", weights},
                                             {"seed", a.common.seed}}}});
  return 0;
}

struct TrainLocatorArgs {
  Common common;
  std::string data;
  LocatorTrainConfig config = default_locator_config();
};

int cmd_train_locator(TrainLocatorArgs a) {
  const auto images = load_data(a.data);
  auto items = std::make_shared<std::vector<LocatorExample>>();
  for (const auto& im : images) items->push_back(make_locator_example(im.image, im.left, im.right));
  const auto s = train_val(items->size(), a.common.seed);
  std::shared_ptr<const std::vector<LocatorExample>> ptr = items;
  a.config.train.seed = a.common.seed;
  a.config.train.log = log_line;
  const auto loc = train_locator({ptr, s.train}, {ptr, s.val}, a.config);
  const auto path = a.common.out_dir() / "locator.ckpt";
  save_locator(path, loc);
  log_line("wrote " + path.string());
  return 0;
}

struct TrainGraderArgs {
  Common common;
  std::string data;
  std::string head = "regression";
  TrainConfig config;
};

int cmd_train_grader(TrainGraderArgs a) {
  const HeadKind head = head_kind_from_string(a.head);
  const auto images = load_data(a.data);
  auto items = std::make_shared<const std::vector<GradeExample>>(grader_examples(images));
  const auto s = train_val(items->size(), a.common.seed);
  a.config.seed = a.common.seed;
  a.config.log = log_line;
  const auto g = train_grader(head, {items, s.train}, {items, s.val}, a.config);
  const auto path = a.common.out_dir() / ("grader_" + a.head + ".ckpt");
  save_grader(path, g);
  log_line("wrote " + path.string());
  return 0;
}

struct FinetuneArgs {
  Common common;
  std::string grader;
  std::string data;
  FineTuneConfig config;
};

int cmd_finetune(FinetuneArgs a) {
  const auto g = load_grader(a.grader);
  const auto images = load_data(a.data);
  auto items = std::make_shared<const std::vector<GradeExample>>(grader_examples(images, g.arch.input_size));
  const auto s = train_val(items->size(), a.common.seed);
  a.config.train.seed = a.common.seed;
  a.config.train.log = log_line;
  const auto tuned = fine_tune(g, {items, s.train}, {items, s.val}, a.config);
  const auto path = a.common.out_dir() / "grader_finetuned.ckpt";
  save_grader(path, tuned);
  log_line("wrote " + path.string());
  return 0;
}

struct EvalArgs {
  Common common;
  std::string grader;
  std::string locator;
  std::string data;
  std::string name = "eval";
};

int cmd_eval(const EvalArgs& a) {
  const auto g = load_grader(a.grader);
  const auto images = load_data(a.data);
  std::vector<int> actual, predicted;
  std::optional<LocalizationMetrics> loc_metrics;
  if (a.locator.empty()) {
    const auto ex = grader_examples(images, g.arch.input_size);
    std::vector<std::vector<double>> inputs;
    for (const auto& e : ex) {
      inputs.push_back(e.input);
      actual.push_back(e.grade);
    }
    for (const auto& p : predict_inputs(g, inputs)) predicted.push_back(p.grade);
  } else {
    const auto loc = load_locator(a.locator);
    auto le = evaluate_localization(loc, images);
    loc_metrics = le.metrics;
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto r = infer_radiograph(loc, g, images[i].image, images[i].id);
      for (const auto& k : r.knees) {
        actual.push_back(images[i].knee(k.side).grade);
        predicted.push_back(k.grade);
      }
    }
  }
  BootstrapOptions boot;
  boot.seed = a.common.seed;
  auto report = evaluate(a.name, actual, predicted, boot);
  report.localization = loc_metrics;
  const fs::path dir = a.common.out_dir();
  write_text(dir / (a.name + ".json"), eval_report_text(report));
  write_text(dir / (a.name + "_confusion.csv"), confusion_csv(report.confusion));
  return 0;
}

struct InferArgs {
  Common common;
  std::string grader;
  std::string locator;
  std::string input;
  bool pre_cropped = false;
};

int cmd_infer(const InferArgs& a) {
  if (!a.pre_cropped && a.locator.empty()) throw UsageError("--locator is required unless --pre-cropped is given");
  const auto g = load_grader(a.grader);
  std::optional<LocatorNet> loc;
  if (!a.pre_cropped) loc = load_locator(a.locator);

  std::vector<fs::path> inputs;
  if (fs::is_directory(a.input)) {
    for (const auto& e : fs::directory_iterator(a.input))
      if (e.is_regular_file()) inputs.push_back(e.path());
    std::sort(inputs.begin(), inputs.end());
  } else if (fs::exists(a.input)) {
    inputs.push_back(a.input);
  } else {
    throw UsageError("--input: no such file or directory: " + a.input);
  }

  const fs::path dir = a.common.out_dir();
  json errors = json::array();
  std::size_t ok = 0;
  for (const auto& path : inputs) {
    try {
      const GrayImage img = read_image(path);
      const std::string id = path.stem().string();
      const auto report = loc ? infer_radiograph(*loc, g, img, id) : infer_crop(g, img, id);
      write_text(dir / (id + ".report.json"), to_json(report).dump(2) + "\n");
      ++ok;
    } catch (const Error& e) {
      log_line("error: " + path.string() + ": " + e.what());
      errors.push_back({{"input", path.filename().string()}, {"error", e.what()}});
    }
  }
  write_text(dir / "errors.json", errors.dump(2) + "\n");
  if (ok == 0) {
    log_line("error: no input could be processed");
    return 1;
  }
  return 0;
}

struct ExperimentArgs {
  Common common;
  std::string config;
};

int cmd_experiment(const ExperimentArgs& a, const CLI::App& cmd) {
  // Flags override the document before validation so derived seeds follow --seed.
  auto doc = load_experiment_json(a.config);
  if (doc.is_object()) {
    if (cmd.count("--seed")) doc["seed"] = a.common.seed;
    if (!a.common.out.empty()) doc["output_dir"] = a.common.out;
    if (cmd.count("--threads")) doc["threads"] = a.common.threads;
  }
  const auto cfg = parse_experiment_config(doc);
  const auto result = run_experiment(cfg, log_line);
  std::cout << result.summary.dump(2) << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"klgrade: two-stage knee KL grading toolkit"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* c_gen = app.add_subcommand("gen", "Generate a synthetic bilateral radiograph dataset");
  add_common(c_gen, gen.common);
  c_gen->add_option("--n", gen.n, "Number of radiographs")->capture_default_str();
  c_gen->add_option("--profile", gen.profile, "Domain profile: source, target, identity")->capture_default_str();
  c_gen->add_option("--grade-weights", gen.weights, "oai, target, uniform, or five comma-separated weights")
      ->capture_default_str();

  TrainLocatorArgs tl;
  auto* c_tl = app.add_subcommand("train-locator", "Train the knee locator on a dataset directory");
  add_common(c_tl, tl.common);
  c_tl->add_option("--data", tl.data, "Dataset directory")->required();
  add_train_flags(c_tl, tl.config.train);
  c_tl->add_option("--box-weight", tl.config.weights.box, "Box loss weight")->capture_default_str();
  c_tl->add_option("--mask-weight", tl.config.weights.mask, "Mask loss weight")->capture_default_str();

  TrainGraderArgs tg;
  auto* c_tg = app.add_subcommand("train-grader", "Train a KL grader on ground-truth knee crops");
  add_common(c_tg, tg.common);
  c_tg->add_option("--data", tg.data, "Dataset directory")->required();
  c_tg->add_option("--head", tg.head, "classification or regression")
      ->check(CLI::IsMember({"classification", "regression"}))
      ->capture_default_str();
  add_train_flags(c_tg, tg.config);

  FinetuneArgs ft;
  ft.config.train.epochs = 8;
  auto* c_ft = app.add_subcommand("finetune", "Fine-tune a grader on another dataset");
  add_common(c_ft, ft.common);
  c_ft->add_option("--grader", ft.grader, "Pretrained grader checkpoint")->required();
  c_ft->add_option("--data", ft.data, "Target dataset directory")->required();
  add_train_flags(c_ft, ft.config.train);
  c_ft->add_option("--lr-scale", ft.config.lr_scale, "Fine-tune rate as a fraction of --lr")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "Evaluate a grader (and optionally a locator) on a dataset");
  add_common(c_ev, ev.common);
  c_ev->add_option("--grader", ev.grader, "Grader checkpoint")->required();
  c_ev->add_option("--locator", ev.locator, "Locator checkpoint; grades pipeline crops when given");
  c_ev->add_option("--data", ev.data, "Dataset directory")->required();
  c_ev->add_option("--name", ev.name, "Report name")->capture_default_str();

  InferArgs inf;
  auto* c_inf = app.add_subcommand("infer", "Grade radiographs (PGM or DICOM)");
  add_common(c_inf, inf.common);
  c_inf->add_option("--locator", inf.locator, "Locator checkpoint");
  c_inf->add_option("--grader", inf.grader, "Grader checkpoint")->required();
  c_inf->add_option("--input", inf.input, "Image file or directory")->required();
  c_inf->add_flag("--pre-cropped", inf.pre_cropped, "Inputs are single knee crops; skip the locator");

  ExperimentArgs ex;
  auto* c_ex = app.add_subcommand("experiment", "Run an experiment from a JSON config");
  add_common(c_ex, ex.common);
  c_ex->add_option("--config", ex.config, "Experiment config file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (c_gen->parsed()) return cmd_gen(gen);
    if (c_tl->parsed()) return cmd_train_locator(tl);
    if (c_tg->parsed()) return cmd_train_grader(tg);
    if (c_ft->parsed()) return cmd_finetune(ft);
    if (c_ev->parsed()) return cmd_eval(ev);
    if (c_inf->parsed()) return cmd_infer(inf);
    if (c_ex->parsed()) return cmd_experiment(ex, *c_ex);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
