#include "klgrade/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <sstream>

#include "klgrade/error.hpp"
#include "klgrade/rng.hpp"

namespace klg {

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : n_(classes), counts_(classes * classes, 0) {
  if (classes == 0) throw ValueError("confusion matrix needs at least one class");
}

ConfusionMatrix ConfusionMatrix::from_counts(std::vector<std::vector<std::uint64_t>> counts) {
  ConfusionMatrix cm(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i].size() != counts.size()) throw ValueError("confusion matrix must be square");
    for (std::size_t j = 0; j < counts.size(); ++j) cm.counts_[i * cm.n_ + j] = counts[i][j];
  }
  return cm;
}

ConfusionMatrix ConfusionMatrix::from_pairs(std::span<const int> actual, std::span<const int> predicted,
                                            std::size_t classes) {
  if (actual.size() != predicted.size()) throw ValueError("actual/predicted length mismatch");
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < actual.size(); ++i) cm.add(actual[i], predicted[i]);
  return cm;
}

void ConfusionMatrix::add(int actual, int predicted, std::uint64_t count) {
  if (actual < 0 || predicted < 0 || static_cast<std::size_t>(actual) >= n_ ||
      static_cast<std::size_t>(predicted) >= n_)
    throw ValueError("grade outside confusion matrix range");
  counts_[static_cast<std::size_t>(actual) * n_ + static_cast<std::size_t>(predicted)] += count;
}

std::uint64_t ConfusionMatrix::at(std::size_t a, std::size_t p) const { return counts_.at(a * n_ + p); }

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t k) const {
  std::uint64_t t = 0;
  for (std::size_t j = 0; j < n_; ++j) t += at(k, j);
  return t;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t k) const {
  std::uint64_t t = 0;
  for (std::size_t i = 0; i < n_; ++i) t += at(i, k);
  return t;
}

namespace {

double ratio(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

double kappa_from(double p_o, double p_e) {
  if (p_e >= 1.0) return p_o >= 1.0 ? 1.0 : 0.0;
  return (p_o - p_e) / (1.0 - p_e);
}

}  // namespace

PrfResult prf(const ConfusionMatrix& cm) {
  PrfResult r;
  const std::size_t n = cm.classes();
  for (std::size_t k = 0; k < n; ++k) {
    ClassScores s;
    const double tp = static_cast<double>(cm.at(k, k));
    s.precision = ratio(tp, static_cast<double>(cm.col_sum(k)));
    s.recall = ratio(tp, static_cast<double>(cm.row_sum(k)));
    s.f1 = ratio(2.0 * s.precision * s.recall, s.precision + s.recall);
    r.per_class.push_back(s);
  }
  for (const auto& s : r.per_class) {
    r.macro.precision += s.precision;
    r.macro.recall += s.recall;
    r.macro.f1 += s.f1;
  }
  r.macro.precision /= static_cast<double>(n);
  r.macro.recall /= static_cast<double>(n);
  r.macro.f1 /= static_cast<double>(n);
  return r;
}

double cohen_kappa(const ConfusionMatrix& cm) {
  const double total = static_cast<double>(cm.total());
  if (total == 0.0) throw ValueError("kappa of an empty confusion matrix");
  double agree = 0.0, chance = 0.0;
  for (std::size_t k = 0; k < cm.classes(); ++k) {
    agree += static_cast<double>(cm.at(k, k));
    chance += (static_cast<double>(cm.row_sum(k)) / total) * (static_cast<double>(cm.col_sum(k)) / total);
  }
  return kappa_from(agree / total, chance);
}

double per_grade_kappa(const ConfusionMatrix& cm, std::size_t k) {
  if (k >= cm.classes()) throw ValueError("grade outside confusion matrix range");
  const auto total = cm.total();
  if (total == 0) throw ValueError("kappa of an empty confusion matrix");
  const auto tp = cm.at(k, k);
  const auto fn = cm.row_sum(k) - tp;
  const auto fp = cm.col_sum(k) - tp;
  const auto tn = total - tp - fn - fp;
  return cohen_kappa(ConfusionMatrix::from_counts({{tp, fn}, {fp, tn}}));
}

double mae(std::span<const double> predicted, std::span<const double> actual) {
  if (predicted.size() != actual.size()) throw ValueError("mae: length mismatch");
  if (predicted.empty()) throw ValueError("mae: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) s += std::abs(predicted[i] - actual[i]);
  return s / static_cast<double>(predicted.size());
}

double mae(std::span<const int> predicted, std::span<const int> actual) {
  std::vector<double> p(predicted.begin(), predicted.end()), a(actual.begin(), actual.end());
  return mae(p, a);
}

Interval bootstrap_ci(std::span<const double> values, double level, std::size_t resamples,
                      std::uint64_t seed) {
  if (values.empty()) throw ValueError("bootstrap_ci: empty input");
  if (!(level > 0.0 && level < 1.0)) throw ValueError("bootstrap_ci: level must be in (0,1)");
  if (resamples == 0) throw ValueError("bootstrap_ci: need at least one resample");
  const std::size_t n = values.size();
  std::vector<double> means(resamples);
  for (std::size_t b = 0; b < resamples; ++b) {
    Rng rng(derive_seed(seed, b, 0xB007));
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += values[rng.below(n)];
    means[b] = s / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  // Nearest-rank percentiles of the sorted bootstrap means.
  const double alpha = (1.0 - level) / 2.0;
  auto pick = [&](double q) {
    const double rank = std::ceil(q * static_cast<double>(resamples));
    const auto idx = static_cast<std::size_t>(std::clamp(rank, 1.0, static_cast<double>(resamples))) - 1;
    return means[idx];
  };
  return {pick(alpha), pick(1.0 - alpha)};
}

double neighbor_fraction(const ConfusionMatrix& cm) {
  std::uint64_t off = 0, near = 0;
  for (std::size_t i = 0; i < cm.classes(); ++i)
    for (std::size_t j = 0; j < cm.classes(); ++j) {
      if (i == j) continue;
      off += cm.at(i, j);
      if (i + 1 == j || j + 1 == i) near += cm.at(i, j);
    }
  if (off == 0) return 1.0;
  return static_cast<double>(near) / static_cast<double>(off);
}

double dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size()) throw ValueError("dice: mask shape mismatch");
  std::uint64_t inter = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    sa += x;
    sb += y;
    inter += x && y;
  }
  if (sa + sb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(sa + sb);
}

double bbox_mse(std::span<const Box> predicted, std::span<const Box> actual) {
  if (predicted.size() != actual.size()) throw ValueError("bbox_mse: length mismatch");
  if (predicted.empty()) throw ValueError("bbox_mse: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const auto& p = predicted[i];
    const auto& a = actual[i];
    for (double d : {p.cx - a.cx, p.cy - a.cy, p.w - a.w, p.h - a.h}) s += d * d;
  }
  return s / (4.0 * static_cast<double>(predicted.size()));
}

double side_accuracy(std::span<const Side> predicted, std::span<const Side> actual) {
  if (predicted.size() != actual.size()) throw ValueError("side_accuracy: length mismatch");
  if (predicted.empty()) throw ValueError("side_accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == actual[i];
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

EvalReport evaluate(std::string name, std::span<const int> actual, std::span<const int> predicted,
                    const BootstrapOptions& bootstrap) {
  if (actual.empty()) throw ValueError("evaluate: no samples");
  EvalReport r;
  r.name = std::move(name);
  r.samples = actual.size();
  r.confusion = ConfusionMatrix::from_pairs(actual, predicted, kNumGrades);
  const auto scores = prf(r.confusion);
  r.per_grade = scores.per_class;
  r.macro = scores.macro;
  r.macro.kappa = 0.0;
  for (std::size_t k = 0; k < r.per_grade.size(); ++k) {
    r.per_grade[k].kappa = per_grade_kappa(r.confusion, k);
    r.macro.kappa += r.per_grade[k].kappa;
  }
  r.macro.kappa /= static_cast<double>(r.per_grade.size());
  r.overall_kappa = cohen_kappa(r.confusion);
  std::uint64_t diag = 0;
  for (std::size_t k = 0; k < r.confusion.classes(); ++k) diag += r.confusion.at(k, k);
  r.accuracy = static_cast<double>(diag) / static_cast<double>(r.samples);
  std::vector<double> errors(actual.size());
  for (std::size_t i = 0; i < actual.size(); ++i) errors[i] = std::abs(predicted[i] - actual[i]);
  r.mae = mae(predicted, actual);
  r.mae_ci_level = bootstrap.level;
  r.mae_ci = bootstrap_ci(errors, bootstrap.level, bootstrap.resamples, bootstrap.seed);
  r.neighbor_fraction = neighbor_fraction(r.confusion);
  return r;
}

namespace {

nlohmann::json scores_json(const ClassScores& s) {
  return {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}, {"kappa", s.kappa}};
}

}  // namespace

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["schema_version"] = kEvalReportSchemaVersion;
  j["name"] = r.name;
  j["samples"] = r.samples;
  auto rows = nlohmann::json::array();
  for (std::size_t i = 0; i < r.confusion.classes(); ++i) {
    auto row = nlohmann::json::array();
    for (std::size_t k = 0; k < r.confusion.classes(); ++k) row.push_back(r.confusion.at(i, k));
    rows.push_back(row);
  }
  j["confusion"] = rows;
  auto per = nlohmann::json::array();
  for (std::size_t k = 0; k < r.per_grade.size(); ++k) {
    auto s = scores_json(r.per_grade[k]);
    s["grade"] = k;
    per.push_back(s);
  }
  j["per_grade"] = per;
  j["macro"] = scores_json(r.macro);
  j["overall_kappa"] = r.overall_kappa;
  j["accuracy"] = r.accuracy;
  j["mae"] = r.mae;
  j["mae_ci"] = {{"lo", r.mae_ci.lo}, {"hi", r.mae_ci.hi}, {"level", r.mae_ci_level}};
  j["neighbor_fraction"] = r.neighbor_fraction;
  if (r.localization) {
    j["localization"] = {{"bbox_mse", r.localization->bbox_mse},
                         {"dice", r.localization->dice},
                         {"side_accuracy", r.localization->side_accuracy},
                         {"iou_pass_rate", r.localization->iou_pass_rate}};
  } else {
    j["localization"] = nullptr;
  }
  return j;
}

std::string eval_report_text(const EvalReport& report) { return to_json(report).dump(2) + "\n"; }

std::string confusion_csv(const ConfusionMatrix& cm) {
  std::ostringstream os;
  for (std::size_t k = 0; k < cm.classes(); ++k) os << (k ? "," : "") << "pred_" << k;
  os << "\n";
  for (std::size_t i = 0; i < cm.classes(); ++i) {
    for (std::size_t k = 0; k < cm.classes(); ++k) os << (k ? "," : "") << cm.at(i, k);
    os << "\n";
  }
  return os.str();
}

}  // namespace klg
