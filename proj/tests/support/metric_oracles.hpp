#pragma once

// Brute-force re-computations of the evaluation metrics. Each works on the
// expanded list of (actual, predicted) pairs rather than on matrix algebra.

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "klgrade/metrics.hpp"
#include "klgrade/rng.hpp"

namespace klg::testing {

using Pairs = std::vector<std::pair<int, int>>;

inline Pairs expand(const ConfusionMatrix& cm) {
  Pairs p;
  for (std::size_t a = 0; a < cm.classes(); ++a)
    for (std::size_t b = 0; b < cm.classes(); ++b)
      for (std::uint64_t k = 0; k < cm.at(a, b); ++k) p.emplace_back(static_cast<int>(a), static_cast<int>(b));
  return p;
}

struct OracleScores {
  double precision, recall, f1;
};

inline OracleScores oracle_prf(const Pairs& pairs, int k) {
  double tp = 0, fp = 0, fn = 0;
  for (auto [a, p] : pairs) {
    if (a == k && p == k) tp += 1;
    if (a != k && p == k) fp += 1;
    if (a == k && p != k) fn += 1;
  }
  const double precision = tp + fp == 0 ? 0.0 : tp / (tp + fp);
  const double recall = tp + fn == 0 ? 0.0 : tp / (tp + fn);
  const double f1 = precision + recall == 0 ? 0.0 : 2 * precision * recall / (precision + recall);
  return {precision, recall, f1};
}

inline double oracle_kappa(const Pairs& pairs, int classes) {
  const double n = static_cast<double>(pairs.size());
  double agree = 0;
  std::vector<double> row(classes, 0), col(classes, 0);
  for (auto [a, p] : pairs) {
    agree += a == p;
    row[a] += 1;
    col[p] += 1;
  }
  const double p_o = agree / n;
  double p_e = 0;
  for (int k = 0; k < classes; ++k) p_e += (row[k] / n) * (col[k] / n);
  if (p_e >= 1.0) return p_o >= 1.0 ? 1.0 : 0.0;
  return (p_o - p_e) / (1 - p_e);
}

inline double oracle_grade_kappa(const Pairs& pairs, int k) {
  Pairs bin;
  for (auto [a, p] : pairs) bin.emplace_back(a == k ? 1 : 0, p == k ? 1 : 0);
  return oracle_kappa(bin, 2);
}

inline double oracle_neighbor(const Pairs& pairs) {
  double off = 0, near = 0;
  for (auto [a, p] : pairs) {
    if (a == p) continue;
    off += 1;
    near += std::abs(a - p) == 1;
  }
  return off == 0 ? 1.0 : near / off;
}

inline double oracle_mae(const std::vector<double>& p, const std::vector<double>& a) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - a[i]);
  return s / static_cast<double>(p.size());
}

inline double oracle_dice(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  double inter = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] && b[i];
    sa += a[i] != 0;
    sb += b[i] != 0;
  }
  return sa + sb == 0 ? 1.0 : 2 * inter / (sa + sb);
}

inline double oracle_bbox_mse(const std::vector<Box>& p, const std::vector<Box>& g) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d[4] = {p[i].cx - g[i].cx, p[i].cy - g[i].cy, p[i].w - g[i].w, p[i].h - g[i].h};
    for (double v : d) s += v * v;
  }
  return s / static_cast<double>(4 * p.size());
}

// Relative agreement with a floor for exact zeros.
inline bool close_rel(double a, double b, double tol = 1e-12) {
  if (a == b) return true;
  return std::abs(a - b) <= tol * std::max(std::abs(a), std::abs(b));
}

// 5x5 matrix with a random sparsity pattern; never empty.
inline ConfusionMatrix random_confusion(Rng& rng, int classes = 5) {
  std::vector<std::vector<std::uint64_t>> c(classes, std::vector<std::uint64_t>(classes, 0));
  const double density = rng.uniform(0.1, 1.0);
  std::uint64_t total = 0;
  for (auto& row : c)
    for (auto& v : row)
      if (rng.uniform() < density) total += v = rng.below(25);
  if (total == 0) c[rng.below(classes)][rng.below(classes)] = 1 + rng.below(5);
  return ConfusionMatrix::from_counts(c);
}

}  // namespace klg::testing
