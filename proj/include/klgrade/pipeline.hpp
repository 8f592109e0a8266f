#pragma once

// Orchestration: dataset splits, two-stage inference (locate -> crop ->
// normalize -> grade), dataset directories, and config-driven experiments.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "klgrade/error.hpp"
#include "klgrade/grader.hpp"
#include "klgrade/locator.hpp"
#include "klgrade/metrics.hpp"
#include "klgrade/synthgen.hpp"

namespace klg {

// ---- splits ----

struct SplitSpec {
  double train_frac = 0.7;
  double val_frac = 0.1;
  double test_frac = 0.2;
  std::uint64_t seed = 0;
  bool stratified = false;

  void validate() const;
};

struct Split {
  std::vector<std::size_t> train, val, test;  // ascending indices
};

// Floor allocation of val and test, remainder to train. Stratified mode
// allocates within each label group.
Split split(std::size_t n, const SplitSpec& spec, std::span<const int> labels = {});

// ---- annotated images ----

struct AnnotatedImage {
  std::string id;
  GrayImage image;
  KneeAnnotation left;
  KneeAnnotation right;
  std::optional<std::uint64_t> seed;  // generator seed, when synthetic

  const KneeAnnotation& knee(Side s) const { return s == Side::left ? left : right; }
};

AnnotatedImage to_annotated(const SyntheticSample& s, std::string id);

// Ground-truth crop of one knee, ready for the grader.
GradeExample grader_example(const GrayImage& img, const Box& box, int grade, std::size_t input_size = 64);

// Two crops per image (left, right).
std::vector<GradeExample> grader_examples(std::span<const AnnotatedImage> images,
                                          std::size_t input_size = 64);

// ---- dataset directories ----

// One PGM and one JSON annotation sidecar per image, plus manifest.json
// listing the files, per-sample seeds and the provenance record.
void write_dataset(const std::filesystem::path& dir, std::span<const AnnotatedImage> images,
                   const nlohmann::json& provenance);
// Reads a dataset directory; images may be PGM or DICOM.
std::vector<AnnotatedImage> read_dataset(const std::filesystem::path& dir);

// PGM or DICOM, chosen by content.
GrayImage read_image(const std::filesystem::path& path);

// ---- two-stage inference ----

// Error raised by one pipeline stage; what() starts with the stage name.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& message)
      : Error(stage + ": " + message), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct KneeResult {
  Side side = Side::left;
  Box box;
  double side_score = 0.0;
  int grade = 0;
  std::vector<double> raw;
};

struct KneeReport {
  std::string image_id;
  std::string locator_id;
  std::string grader_id;
  std::string head;
  std::vector<KneeResult> knees;  // left then right; one entry for pre-cropped input
};

// Short content hash of a network's weights, used as a model id.
std::string model_id(const std::string& prefix, const Network& net);

KneeReport infer_radiograph(const LocatorNet& locator, const GraderNet& grader, const GrayImage& img,
                            const std::string& image_id);
// Pre-cropped single knee: the locator is bypassed.
KneeReport infer_crop(const GraderNet& grader, const GrayImage& crop, const std::string& image_id);

nlohmann::json to_json(const KneeReport& report);

// Detections for many images, plus localization metrics against ground truth.
struct LocalizationEval {
  std::vector<std::pair<Detection, Detection>> detections;
  LocalizationMetrics metrics;
};
LocalizationEval evaluate_localization(const LocatorNet& locator, std::span<const AnnotatedImage> images);

// ---- experiments ----

enum class ExperimentKind { compare_heads, domain_shift, two_stage };

std::string to_string(ExperimentKind kind);

struct GeneratorConfig {
  std::size_t n = 1250;
  std::string profile = "source";
  std::vector<double> grade_weights;  // empty -> uniform
  // domain_shift only
  std::size_t target_n = 1250;
  std::string target_profile = "target";
  std::vector<double> target_grade_weights;
};

struct ExperimentConfig {
  std::string name = "experiment";
  ExperimentKind kind = ExperimentKind::compare_heads;
  std::uint64_t seed = 1;
  std::optional<GeneratorConfig> generator;
  std::optional<std::filesystem::path> ingest_dir;         // instead of the generator
  std::optional<std::filesystem::path> target_ingest_dir;  // domain_shift with ingest
  SplitSpec split;
  LocatorTrainConfig locator;
  TrainConfig grader;
  std::vector<HeadKind> heads{HeadKind::classification, HeadKind::regression};
  bool warm_start_regression = false;  // regression trunk from the trained classifier
  GraderArch grader_arch;
  FineTuneConfig finetune;
  BootstrapOptions bootstrap;
  std::filesystem::path output_dir = "klgrade_out";
  std::size_t threads = 1;
};

// Thrown for invalid configs; carries every violation found.
class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> violations);
  const std::vector<std::string>& violations() const { return violations_; }

 private:
  std::vector<std::string> violations_;
};

// Every schema violation in a config document (empty when valid).
std::vector<std::string> check_experiment_config(const nlohmann::json& j);
// Parses after checking; throws ConfigError listing all violations.
ExperimentConfig parse_experiment_config(const nlohmann::json& j);
// Reads the document only; unreadable files and bad JSON raise ConfigError.
nlohmann::json load_experiment_json(const std::filesystem::path& path);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Output directory used when a config or flag gives none.
std::filesystem::path default_output_dir();
inline constexpr const char* kOutDirEnv = "KLG_OUT_DIR";

struct ExperimentResult {
  std::vector<EvalReport> reports;
  nlohmann::json summary;
  std::vector<std::filesystem::path> files;
};

using LogFn = std::function<void(const std::string&)>;

ExperimentResult run_experiment(const ExperimentConfig& config, const LogFn& log = {});

}  // namespace klg
