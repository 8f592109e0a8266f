#pragma once

// Evaluation quantities: confusion-matrix metrics, Cohen's kappa (overall and
// one-vs-rest per grade), MAE with percentile-bootstrap CI, the share of
// misclassifications between neighbouring grades, and localization metrics.
//
// Zero-denominator conventions:
//   precision / recall / F1 with an empty denominator -> 0
//   kappa with p_e == 1 -> 1 if p_o == 1 else 0
//   DICE of two empty masks -> 1
//   neighbor fraction with no misclassifications -> 1

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "klgrade/annotation.hpp"
#include "klgrade/image.hpp"

namespace klg {

// Square count matrix; rows = actual grade, columns = predicted grade.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 5);

  static ConfusionMatrix from_counts(std::vector<std::vector<std::uint64_t>> counts);
  static ConfusionMatrix from_pairs(std::span<const int> actual, std::span<const int> predicted,
                                    std::size_t classes = 5);

  void add(int actual, int predicted, std::uint64_t count = 1);
  std::uint64_t at(std::size_t actual, std::size_t predicted) const;
  std::size_t classes() const { return n_; }
  std::uint64_t total() const;
  std::uint64_t row_sum(std::size_t k) const;
  std::uint64_t col_sum(std::size_t k) const;

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double kappa = 0.0;
};

struct PrfResult {
  std::vector<ClassScores> per_class;  // kappa left 0; filled by evaluate()
  ClassScores macro;
};

PrfResult prf(const ConfusionMatrix& cm);
double cohen_kappa(const ConfusionMatrix& cm);
// One-vs-rest binarization of grade k, then Cohen's kappa.
double per_grade_kappa(const ConfusionMatrix& cm, std::size_t k);

double mae(std::span<const double> predicted, std::span<const double> actual);
double mae(std::span<const int> predicted, std::span<const int> actual);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

// Percentile bootstrap of the mean of `values`.
Interval bootstrap_ci(std::span<const double> values, double level = 0.95,
                      std::size_t resamples = 2000, std::uint64_t seed = 0);

double neighbor_fraction(const ConfusionMatrix& cm);

double dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);
// Mean over boxes and the four coordinates (cx, cy, w, h).
double bbox_mse(std::span<const Box> predicted, std::span<const Box> actual);
double side_accuracy(std::span<const Side> predicted, std::span<const Side> actual);

struct LocalizationMetrics {
  double bbox_mse = 0.0;
  double dice = 0.0;
  double side_accuracy = 0.0;
  double iou_pass_rate = 0.0;  // share of images with both knees at IoU >= 0.5
};

struct EvalReport {
  std::string name;
  ConfusionMatrix confusion;
  std::vector<ClassScores> per_grade;
  ClassScores macro;
  double overall_kappa = 0.0;
  double accuracy = 0.0;
  double mae = 0.0;
  Interval mae_ci;
  double mae_ci_level = 0.95;
  double neighbor_fraction = 1.0;
  std::size_t samples = 0;
  std::optional<LocalizationMetrics> localization;
};

inline constexpr int kEvalReportSchemaVersion = 1;

struct BootstrapOptions {
  double level = 0.95;
  std::size_t resamples = 2000;
  std::uint64_t seed = 0;
};

EvalReport evaluate(std::string name, std::span<const int> actual, std::span<const int> predicted,
                    const BootstrapOptions& bootstrap = {});

nlohmann::json to_json(const EvalReport& report);
// Fixed-format JSON text (stable key order, 2-space indent, trailing newline).
std::string eval_report_text(const EvalReport& report);
// Header "pred_0,...,pred_4"; row i holds the counts for actual grade i.
std::string confusion_csv(const ConfusionMatrix& cm);

}  // namespace klg
